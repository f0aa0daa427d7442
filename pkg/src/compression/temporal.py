#!/usr/bin/env python3
"""
时间重采样：把逐帧特征平均到 fMRI 采样间隔 (TR)，并按血流动力学延迟平移
"""

from typing import List, Optional

import numpy as np

from .base import CompressionError

# 帧时间戳与窗口边界比较时的容差（以帧为单位）
_EDGE_TOL = 1e-9


def window_bounds(n_frames: int, frame_rate: float, tr_seconds: float,
                  n_samples: Optional[int] = None) -> np.ndarray:
    """
    每个 TR 窗口的起始帧

    第 t 个窗口包含满足 t*TR*f <= k < (t+1)*TR*f 的帧 k；末尾不完整的窗口丢弃。

    Returns:
        np.ndarray: 长度 n_samples+1 的帧边界
    """
    if frame_rate <= 0 or tr_seconds <= 0:
        raise CompressionError(f"frame_rate 和 tr_seconds 必须为正: {frame_rate}, {tr_seconds}")
    frames_per_tr = frame_rate * tr_seconds
    if frames_per_tr < 1 - _EDGE_TOL:
        raise CompressionError(
            f"empty TR window: 帧率 {frame_rate} Hz 在 {tr_seconds} s 内不足一帧"
        )
    available = int(np.floor(n_frames / frames_per_tr + _EDGE_TOL))
    if n_samples is None:
        n_samples = available
    elif n_samples > available:
        raise CompressionError(
            f"帧数 {n_frames} 只够 {available} 个 TR, 需要 {n_samples}"
        )
    if n_samples < 1:
        raise CompressionError(f"帧数 {n_frames} 不足一个 TR 窗口")

    edges = np.ceil(np.arange(n_samples + 1) * frames_per_tr - _EDGE_TOL).astype(int)
    if np.any(np.diff(edges) < 1):
        raise CompressionError("empty TR window")
    return edges


def temporal_resample(frames: np.ndarray, frame_rate: float, tr_seconds: float = 2.0,
                      lag_trs: int = 0, n_samples: Optional[int] = None) -> np.ndarray:
    """
    箱形平均到 TR，再整体后移 lag_trs 个采样

    前 lag_trs 行补零，末尾多出的行丢弃。

    Args:
        frames: [T_frames, D] 逐帧特征
        frame_rate: 帧率 (Hz)
        tr_seconds: 重复时间 (s)
        lag_trs: 血流动力学延迟（采样数）
        n_samples: 期望输出行数（None 表示尽可能多的完整窗口）

    Returns:
        np.ndarray: [n_samples, D]
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise CompressionError(f"逐帧特征必须是 2 维, 实际 {frames.shape}")
    if lag_trs < 0:
        raise CompressionError(f"lag_trs 不能为负: {lag_trs}")

    edges = window_bounds(frames.shape[0], frame_rate, tr_seconds, n_samples)
    sums = np.add.reduceat(frames[:edges[-1]], edges[:-1], axis=0)
    samples = sums / np.diff(edges).astype(np.float64)[:, None]

    if lag_trs == 0:
        return samples
    shifted = np.zeros_like(samples)
    if lag_trs < samples.shape[0]:
        shifted[lag_trs:] = samples[:-lag_trs]
    return shifted


def resample_sessions(frames: np.ndarray, frame_rate: float, session_frames: List[int],
                      session_lengths: List[int], tr_seconds: float = 2.0,
                      lag_trs: int = 0) -> np.ndarray:
    """
    逐会话重采样

    延迟补零发生在每个会话开头，窗口不跨越会话边界。
    """
    if len(session_frames) != len(session_lengths):
        raise CompressionError(
            f"会话数不一致: 帧 {len(session_frames)} vs 采样 {len(session_lengths)}"
        )
    if sum(session_frames) != frames.shape[0]:
        raise CompressionError(f"session_frames 之和 {sum(session_frames)} != 帧数 {frames.shape[0]}")

    parts = []
    start = 0
    for n_frames, n_samples in zip(session_frames, session_lengths):
        parts.append(temporal_resample(frames[start:start + n_frames], frame_rate,
                                       tr_seconds, lag_trs, n_samples=n_samples))
        start += n_frames
    return np.concatenate(parts, axis=0)

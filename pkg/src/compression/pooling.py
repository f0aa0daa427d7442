#!/usr/bin/env python3
"""
通道内平均池化压缩

- APIC: 在每个通道内部按目标网格求局部均值，通道之间从不混合
- APBIC: 先做 APIC，再把相邻通道分组求均值，使各层输出特征数一致

两者都用 np.add.reduceat 按固定顺序归约，结果可复现。
"""

from typing import Set, Tuple

import numpy as np

from core.tensor_store import LayerActivationSeries

from .base import (
    CompressionError, Compressor, CompressorCapability, CompressorRegistry,
    PoolSpec, partition_bounds,
)


def _as_tensor(acts) -> np.ndarray:
    data = acts.data if isinstance(acts, LayerActivationSeries) else np.asarray(acts)
    if data.ndim != 4:
        raise CompressionError(f"激活张量必须是 [T, C, H, W], 实际 {data.shape}")
    return data.astype(np.float64, copy=False)


def _pool_cells(data: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """[T, C, H, W] → [T, C, h_out, w_out] 的格内均值"""
    _, _, height, width = data.shape
    spec.check_grid(height, width)
    rows = partition_bounds(height, spec.target_grid[0])
    cols = partition_bounds(width, spec.target_grid[1])

    sums = np.add.reduceat(data, rows[:-1], axis=2)
    sums = np.add.reduceat(sums, cols[:-1], axis=3)
    counts = np.outer(np.diff(rows), np.diff(cols)).astype(np.float64)
    return sums / counts


def apic_compress(acts, spec: PoolSpec) -> np.ndarray:
    """
    APIC：通道内平均池化

    输出特征 (c, i, j) 是通道 c 中落在网格单元 (i, j) 的激活的算术平均，
    特征按 (c, i, j) 行优先展开。

    Args:
        acts: LayerActivationSeries 或 [T, C, H, W] 数组
        spec: 池化参数（使用 target_grid）

    Returns:
        np.ndarray: [T_frames, C * h_out * w_out]

    Raises:
        CompressionError: 目标网格大于输入网格
    """
    data = _as_tensor(acts)
    pooled = _pool_cells(data, spec)
    return pooled.reshape(pooled.shape[0], -1)


def apbic_compress(acts, spec: PoolSpec) -> np.ndarray:
    """
    APBIC：通道内池化后再在相邻通道组之间求均值

    通道按索引划分为 G 个连续、大小接近的组，第 g 组覆盖
    [floor(g*C/G), floor((g+1)*C/G))。

    Returns:
        np.ndarray: [T_frames, G * h_out * w_out]

    Raises:
        CompressionError: 该层尺寸无法达到 target_features
    """
    data = _as_tensor(acts)
    channels = data.shape[1]
    groups = spec.groups_for(channels)

    pooled = _pool_cells(data, spec)
    bounds = partition_bounds(channels, groups)
    grouped = np.add.reduceat(pooled, bounds[:-1], axis=1)
    grouped /= np.diff(bounds).astype(np.float64)[None, :, None, None]
    return grouped.reshape(grouped.shape[0], -1)


class ApicCompressor(Compressor):
    """通道内平均池化 (APIC)"""

    @property
    def name(self) -> str:
        return "apic"

    def capabilities(self) -> Set[CompressorCapability]:
        return {CompressorCapability.CHANNEL_PRESERVING}

    def output_dim(self, shape: Tuple[int, int, int], spec: PoolSpec) -> int:
        channels, height, width = shape
        spec.check_grid(height, width)
        return channels * spec.cells

    def frame_features(self, acts: LayerActivationSeries, spec: PoolSpec) -> np.ndarray:
        return apic_compress(acts, spec)


class ApbicCompressor(Compressor):
    """通道内 + 通道间平均池化 (APBIC)"""

    @property
    def name(self) -> str:
        return "apbic"

    def capabilities(self) -> Set[CompressorCapability]:
        return {CompressorCapability.FIXED_OUTPUT_SIZE}

    def output_dim(self, shape: Tuple[int, int, int], spec: PoolSpec) -> int:
        channels, height, width = shape
        spec.check_grid(height, width)
        return spec.groups_for(channels) * spec.cells

    def frame_features(self, acts: LayerActivationSeries, spec: PoolSpec) -> np.ndarray:
        return apbic_compress(acts, spec)


# 注册压缩方案
CompressorRegistry.register(ApicCompressor)
CompressorRegistry.register(ApbicCompressor)

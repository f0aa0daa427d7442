#!/usr/bin/env python3
"""
合成数据生成器与暴力对照实现

生成带通道内空间相关性的逐帧激活和已知真值的体素响应，
用于回归测试和验收实验。另外提供两个独立的朴素实现：
    - oracle_ridge: 原始空间岭回归（稠密 LU 求解）
    - oracle_pool:  逐单元循环的 APIC / APBIC

随机数算法（跨语言可复现）：
    每个用途一条独立子流，Generator(Philox(SeedSequence(seed, spawn_key=key)))
        激活:   key = (0, 层序号, 会话序号)
        权重:   key = (1, 层序号)
        噪声:   key = (2,)
    激活 = uniform_filter(白噪声, 窗口 k×k, 环绕边界) + 通道公共分量，
    再截断为 float32；真值在截断之后计算。
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from compression.base import PoolSpec
from compression.pooling import apic_compress
from compression.temporal import resample_sessions

from .tensor_store import (
    ActivationEntry, DatasetManifest, Layer, LayerActivationSeries, Stream, VoxelSeries,
    representation_label, save_manifest, write_tensor,
)

logger = logging.getLogger(__name__)

# 随机子流用途
_STREAM_ACTIVATIONS = 0
_STREAM_WEIGHTS = 1
_STREAM_NOISE = 2

# cluster_plan 需要的表示
CLUSTER_REPRESENTATIONS = ("L1.flow", "L2.flow", "L4.flow", "L2.rgb", "L4.rgb")

MIXTURE = "mixture"


class SynthError(ValueError):
    """合成数据参数不合法"""


class SignalBasis(Enum):
    CHANNEL_MEANS = "channel_means"
    PIXEL_LEVEL = "pixel_level"


@dataclass(frozen=True)
class LayerShape:
    """一个 (stream, layer) 的激活形状"""
    stream: Stream
    layer: Layer
    channels: int
    height: int
    width: int

    @property
    def label(self) -> str:
        return representation_label(self.stream, self.layer)

    @classmethod
    def from_dict(cls, doc: Dict) -> "LayerShape":
        return cls(
            stream=Stream(doc["stream"]),
            layer=Layer.parse(str(doc["layer"])),
            channels=int(doc["channels"]),
            height=int(doc["height"]),
            width=int(doc["width"]),
        )

    def to_dict(self) -> Dict:
        return {
            "stream": self.stream.value,
            "layer": self.layer.name,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
        }


def _default_layers() -> List[LayerShape]:
    return [
        LayerShape(Stream.FLOW, Layer.L1, 8, 16, 16),
        LayerShape(Stream.FLOW, Layer.L2, 16, 8, 8),
        LayerShape(Stream.FLOW, Layer.L4, 32, 4, 4),
        LayerShape(Stream.RGB, Layer.L2, 16, 8, 8),
        LayerShape(Stream.RGB, Layer.L4, 32, 4, 4),
    ]


@dataclass
class SynthSpec:
    """合成数据集参数"""
    seed: int = 0
    sessions: int = 12
    samples_per_session: int = 100
    frame_rate: float = 2.0
    layers: List[LayerShape] = field(default_factory=_default_layers)
    voxels: int = 200
    snr: float = 4.0
    signal_basis: SignalBasis = SignalBasis.CHANNEL_MEANS
    cluster_plan: Optional[List[Tuple[int, int]]] = None
    tr_seconds: float = 2.0
    lag_trs: int = 2
    signal_grid: Tuple[int, int] = (1, 1)
    smooth_width: int = 3
    silent_voxels: int = 0
    mask_fraction: float = 1.0

    def __post_init__(self):
        self.signal_basis = SignalBasis(self.signal_basis)
        self.signal_grid = (int(self.signal_grid[0]), int(self.signal_grid[1]))
        if self.cluster_plan is not None:
            self.cluster_plan = [(int(c), int(n)) for c, n in self.cluster_plan]

    @property
    def session_lengths(self) -> List[int]:
        return [self.samples_per_session] * self.sessions

    @property
    def frames_per_session(self) -> int:
        return int(math.ceil(self.samples_per_session * self.frame_rate * self.tr_seconds - 1e-9))

    @property
    def generating_voxels(self) -> int:
        return self.voxels - self.silent_voxels

    def validate(self) -> None:
        """
        Raises:
            SynthError: 任一计数非正、snr 为负、层重复等
        """
        if not 0 <= self.seed < 2 ** 64:
            raise SynthError(f"seed 必须是 64 位无符号整数: {self.seed}")
        for name in ("sessions", "samples_per_session", "voxels", "smooth_width"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} 必须为正: {getattr(self, name)}")
        if self.frame_rate <= 0 or self.tr_seconds <= 0:
            raise SynthError("frame_rate 和 tr_seconds 必须为正")
        if self.frame_rate * self.tr_seconds < 1:
            raise SynthError("每个 TR 至少需要一帧")
        if self.lag_trs < 0:
            raise SynthError(f"lag_trs 不能为负: {self.lag_trs}")
        if not self.snr >= 0:
            raise SynthError(f"snr 必须 >= 0: {self.snr}")
        if not 0 <= self.silent_voxels <= self.voxels:
            raise SynthError(f"silent_voxels 超出范围: {self.silent_voxels}")
        if not 0 < self.mask_fraction <= 1:
            raise SynthError(f"mask_fraction 必须在 (0, 1]: {self.mask_fraction}")
        if not self.layers:
            raise SynthError("至少需要一层")
        labels = [l.label for l in self.layers]
        if len(set(labels)) != len(labels):
            raise SynthError(f"重复的层: {labels}")
        for shape in self.layers:
            if min(shape.channels, shape.height, shape.width) < 1:
                raise SynthError(f"{shape.label}: 形状必须为正")
            if self.signal_basis is SignalBasis.CHANNEL_MEANS and (
                    self.signal_grid[0] > shape.height or self.signal_grid[1] > shape.width):
                raise SynthError(f"{shape.label}: signal_grid {self.signal_grid} 大于激活网格")
        if self.cluster_plan is not None:
            self._validate_plan(labels)

    def _validate_plan(self, labels: List[str]) -> None:
        missing = [r for r in CLUSTER_REPRESENTATIONS if r not in labels]
        if missing:
            raise SynthError(f"infeasible cluster_plan: 缺少表示 {', '.join(missing)}")
        codes = [c for c, _ in self.cluster_plan]
        if any(c < 0 or c > 7 for c in codes) or len(set(codes)) != len(codes):
            raise SynthError(f"infeasible cluster_plan: 编码必须是互不相同的 0..7: {codes}")
        if any(n < 1 for _, n in self.cluster_plan):
            raise SynthError("infeasible cluster_plan: 体素数必须为正")
        planned = sum(n for _, n in self.cluster_plan)
        if planned > self.generating_voxels:
            raise SynthError(
                f"infeasible cluster_plan: 计划 {planned} 个体素, "
                f"只有 {self.generating_voxels} 个非静默体素"
            )

    @classmethod
    def from_dict(cls, doc: Dict) -> "SynthSpec":
        doc = dict(doc)
        if "layers" in doc:
            doc["layers"] = [LayerShape.from_dict(l) for l in doc["layers"]]
        if "snr" in doc:
            doc["snr"] = float(doc["snr"])
        return cls(**doc)

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "sessions": self.sessions,
            "samples_per_session": self.samples_per_session,
            "frame_rate": self.frame_rate,
            "layers": [l.to_dict() for l in self.layers],
            "voxels": self.voxels,
            "snr": self.snr if math.isfinite(self.snr) else "inf",
            "signal_basis": self.signal_basis.value,
            "cluster_plan": None if self.cluster_plan is None else [list(p) for p in self.cluster_plan],
            "tr_seconds": self.tr_seconds,
            "lag_trs": self.lag_trs,
            "signal_grid": list(self.signal_grid),
            "smooth_width": self.smooth_width,
            "silent_voxels": self.silent_voxels,
            "mask_fraction": self.mask_fraction,
        }


@dataclass
class GroundTruth:
    """
    生成真值

    weights[label] 是 [D_signal, V] 的系数矩阵，未使用该表示的体素列为 0；
    assignments[v] 为生成表示的标签、'mixture'（cluster_plan 体素）或 ''（静默）。
    """
    assignments: List[str]
    weights: Dict[str, np.ndarray]
    noiseless_responses: np.ndarray
    noise_std: np.ndarray
    planned_codes: np.ndarray
    signal_features: Dict[str, int] = field(default_factory=dict)

    def voxel_weights(self, voxel: int) -> Dict[str, np.ndarray]:
        return {label: w[:, voxel] for label, w in self.weights.items() if np.any(w[:, voxel])}

    def generating_voxels(self, label: Optional[str] = None) -> np.ndarray:
        """由单一表示生成的体素（label 为 None 时不限表示）"""
        assigned = np.array(self.assignments, dtype=object)
        if label is None:
            return np.flatnonzero((assigned != "") & (assigned != MIXTURE))
        return np.flatnonzero(assigned == label)

    def to_dict(self) -> Dict:
        return {
            "assignments": list(self.assignments),
            "planned_codes": [int(c) for c in self.planned_codes],
            "noise_std": [float(s) for s in self.noise_std],
            "signal_features": dict(self.signal_features),
        }


@dataclass
class SynthDataset:
    spec: SynthSpec
    activations: List[LayerActivationSeries]
    voxels: VoxelSeries
    truth: GroundTruth

    def __iter__(self) -> Iterator:
        return iter((self.activations, self.voxels, self.truth))


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _gen_activations(spec: SynthSpec, index: int, shape: LayerShape) -> LayerActivationSeries:
    n_frames = spec.frames_per_session
    k = spec.smooth_width
    parts = []
    for session in range(spec.sessions):
        rng = _rng(spec.seed, _STREAM_ACTIVATIONS, index, session)
        white = rng.standard_normal((n_frames, shape.channels, shape.height, shape.width))
        smooth = ndimage.uniform_filter(white, size=(1, 1, k, k), mode="wrap")
        offset = rng.standard_normal((n_frames, shape.channels, 1, 1))
        parts.append((smooth + offset).astype(np.float32))
    return LayerActivationSeries(
        stream=shape.stream,
        layer=shape.layer,
        data=np.concatenate(parts, axis=0),
        frame_rate=spec.frame_rate,
        session_frames=[n_frames] * spec.sessions,
    )


def signal_features(spec: SynthSpec, acts: LayerActivationSeries) -> np.ndarray:
    """生成响应所用的、与 TR 对齐的特征 [T, D_signal]"""
    if spec.signal_basis is SignalBasis.CHANNEL_MEANS:
        frames = apic_compress(acts, PoolSpec(target_grid=spec.signal_grid))
    else:
        frames = acts.data.reshape(acts.data.shape[0], -1).astype(np.float64)
    return resample_sessions(frames, acts.frame_rate, acts.session_frames,
                             spec.session_lengths, spec.tr_seconds, spec.lag_trs)


def _plan_weights(code: int) -> Dict[str, float]:
    """cluster_plan 体素各表示的方差份额"""
    bit0, bit1, bit2 = code & 1, (code >> 1) & 1, (code >> 2) & 1
    return {
        "L4.rgb": 2.0,
        "L1.flow": 3.0 if bit2 else 1.0,
        "L2.rgb": 3.0 if bit1 else 1.0,
        "L2.flow": 3.0 if bit0 else 1.0,
        "L4.flow": 1.0 if bit0 else 3.0,
    }


def gen_dataset(spec: SynthSpec) -> SynthDataset:
    """
    生成合成数据集

    体素顺序：先是 cluster_plan 中的体素（按计划顺序），然后是按层轮流
    分配的单表示体素，最后是 silent_voxels 个只含噪声的体素。

    Args:
        spec: 合成参数

    Returns:
        SynthDataset，可解包为 (activations, voxels, truth)

    Raises:
        SynthError: 参数不合法或 cluster_plan 不可实现
    """
    spec.validate()
    n_samples = sum(spec.session_lengths)
    n_voxels = spec.voxels

    activations = [_gen_activations(spec, i, shape) for i, shape in enumerate(spec.layers)]
    features = {acts.label: signal_features(spec, acts) for acts in activations}
    labels = [shape.label for shape in spec.layers]

    assignments = [""] * n_voxels
    planned_codes = np.full(n_voxels, -1, dtype=np.int64)
    cursor = 0
    for code, count in spec.cluster_plan or []:
        for v in range(cursor, cursor + count):
            assignments[v] = MIXTURE
            planned_codes[v] = code
        cursor += count
    for i, v in enumerate(range(cursor, spec.generating_voxels)):
        assignments[v] = labels[i % len(labels)]

    weights: Dict[str, np.ndarray] = {}
    for index, label in enumerate(labels):
        feats = features[label]
        raw = _rng(spec.seed, _STREAM_WEIGHTS, index).standard_normal((feats.shape[1], n_voxels))
        w = np.zeros_like(raw)
        own = np.array([a == label for a in assignments])
        w[:, own] = raw[:, own]
        mixed = planned_codes >= 0
        if mixed.any() and label in CLUSTER_REPRESENTATIONS:
            signals = feats @ raw[:, mixed]
            std = signals.std(axis=0)
            if np.any(std <= 0):
                raise SynthError(f"infeasible cluster_plan: {label} 的信号方差为零")
            share = np.array([_plan_weights(c)[label] for c in planned_codes[mixed]])
            w[:, mixed] = raw[:, mixed] * (np.sqrt(share) / std)
        weights[label] = w

    noiseless = np.zeros((n_samples, n_voxels))
    for label in labels:
        noiseless += features[label] @ weights[label]

    noise = _rng(spec.seed, _STREAM_NOISE).standard_normal((n_samples, n_voxels))
    silent = np.array([a == "" for a in assignments])
    if math.isinf(spec.snr):
        noise_std = np.zeros(n_voxels)
    elif spec.snr == 0:
        noise_std = np.ones(n_voxels)
    else:
        noise_std = np.sqrt(noiseless.var(axis=0) / spec.snr)
    noise_std[silent] = 1.0
    responses = noise * noise_std if spec.snr == 0 else noiseless + noise * noise_std
    responses[:, silent] = noise[:, silent]

    mask = np.zeros(n_voxels, dtype=bool)
    mask[:max(1, int(round(spec.mask_fraction * n_voxels)))] = True

    truth = GroundTruth(
        assignments=assignments,
        weights=weights,
        noiseless_responses=noiseless,
        noise_std=noise_std,
        planned_codes=planned_codes,
        signal_features={label: int(features[label].shape[1]) for label in labels},
    )
    voxels = VoxelSeries(data=responses, session_lengths=spec.session_lengths, mask=mask)
    logger.info("合成数据集: %d 层, %d 样本, %d 体素 (seed=%d)",
                len(labels), n_samples, n_voxels, spec.seed)
    return SynthDataset(spec=spec, activations=activations, voxels=voxels, truth=truth)


def write_dataset(out_dir: str, dataset: SynthDataset) -> str:
    """
    把合成数据集写成 DVFT 张量 + JSON 清单

    Returns:
        str: manifest.json 的路径
    """
    spec = dataset.spec
    os.makedirs(os.path.join(out_dir, "activations"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "truth"), exist_ok=True)

    entries = []
    for acts in dataset.activations:
        rel = f"activations/{acts.label}.dvft"
        write_tensor(os.path.join(out_dir, rel), acts.data, dtype="f32le")
        entries.append(ActivationEntry(
            stream=acts.stream, layer=acts.layer, path=rel,
            frame_rate=acts.frame_rate, session_frames=list(acts.session_frames),
        ))

    write_tensor(os.path.join(out_dir, "responses.dvft"), dataset.voxels.data, dtype="f64le")
    write_tensor(os.path.join(out_dir, "mask.dvft"),
                 dataset.voxels.mask.astype(np.float32), dtype="f32le")
    write_tensor(os.path.join(out_dir, "truth", "noiseless.dvft"),
                 dataset.truth.noiseless_responses, dtype="f64le")
    for label, w in dataset.truth.weights.items():
        write_tensor(os.path.join(out_dir, "truth", f"weights_{label}.dvft"), w, dtype="f64le")

    doc = {"spec": spec.to_dict(), **dataset.truth.to_dict()}
    with open(os.path.join(out_dir, "ground_truth.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, indent=2)

    manifest = DatasetManifest(
        tr_seconds=spec.tr_seconds,
        session_lengths=spec.session_lengths,
        activations=entries,
        responses_path="responses.dvft",
        mask_path="mask.dvft",
        ground_truth="ground_truth.json",
        root=out_dir,
    )
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(path, manifest)
    return path


# ============================================================
# 朴素对照实现（仅供测试）
# ============================================================

def oracle_ridge(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """原始空间岭回归: (XᵀX + αI) w = Xᵀy，稠密 LU 求解"""
    if not alpha > 0:
        raise ValueError(f"alpha 必须为正: {alpha}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lhs = x.T @ x + alpha * np.eye(x.shape[1])
    return np.linalg.solve(lhs, x.T @ y)


def oracle_pool(acts: np.ndarray, spec: PoolSpec, scheme: str) -> np.ndarray:
    """逐单元循环的 APIC / APBIC"""
    acts = np.asarray(acts, dtype=np.float64)
    n_frames, channels, height, width = acts.shape
    gh, gw = spec.target_grid

    cells = np.zeros((n_frames, channels, gh, gw))
    for c in range(channels):
        for i in range(gh):
            r0, r1 = (i * height) // gh, ((i + 1) * height) // gh
            for j in range(gw):
                c0, c1 = (j * width) // gw, ((j + 1) * width) // gw
                cells[:, c, i, j] = acts[:, c, r0:r1, c0:c1].mean(axis=(1, 2))

    if scheme == "apic":
        return cells.reshape(n_frames, -1)
    if scheme != "apbic":
        raise ValueError(f"未知方案: {scheme}")

    groups = spec.channel_groups or spec.target_features // (gh * gw)
    out = np.zeros((n_frames, groups, gh, gw))
    for g in range(groups):
        members = range((g * channels) // groups, ((g + 1) * channels) // groups)
        for i in range(gh):
            for j in range(gw):
                out[:, g, i, j] = np.mean([cells[:, c, i, j] for c in members], axis=0)
    return out.reshape(n_frames, -1)

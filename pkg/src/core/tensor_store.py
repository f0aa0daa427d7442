#!/usr/bin/env python3
"""
DVFT 张量存储

流水线各阶段之间传递的所有数组都使用同一种极简二进制格式 (DVFT)：

    magic "DVFT" | version u16 | dtype u8 | ndim u8 | header_length u32
    | dims (u64 × ndim) | payload (行优先, 小端)

数据集的附加信息（流、层、帧率、会话长度、掩码路径）保存在 JSON 清单中，
格式说明见 docs/FORMAT.md。
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DVFT"
FORMAT_VERSION = 1
MAX_NDIM = 4

# 固定头部: magic(4) + version(2) + dtype(1) + ndim(1) + header_length(4)
_FIXED_HEADER = struct.Struct("<4sHBBI")

DTYPES: Dict[str, Tuple[int, np.dtype]] = {
    "f32le": (0, np.dtype("<f4")),
    "f64le": (1, np.dtype("<f8")),
}
_DTYPE_BY_CODE = {code: (name, dt) for name, (code, dt) in DTYPES.items()}

MANIFEST_FORMAT = "dvft-manifest"
MANIFEST_VERSION = 1

PathLike = Union[str, "os.PathLike[str]"]


class TensorFormatError(ValueError):
    """DVFT 文件格式错误"""


class ManifestError(ValueError):
    """数据集清单错误"""


@dataclass(frozen=True)
class TensorHeader:
    """DVFT 文件头"""
    version: int
    dtype: str
    dims: Tuple[int, ...]

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def header_length(self) -> int:
        return _FIXED_HEADER.size + 8 * self.ndim

    @property
    def payload_length(self) -> int:
        return int(np.prod(self.dims, dtype=np.uint64)) * DTYPES[self.dtype][1].itemsize

    def to_dict(self) -> Dict:
        return {"version": self.version, "dtype": self.dtype, "dims": list(self.dims)}


def _encode_header(dims: Tuple[int, ...], dtype: str) -> bytes:
    if not 1 <= len(dims) <= MAX_NDIM:
        raise TensorFormatError(f"ndim out of range: {len(dims)} (允许 1..{MAX_NDIM})")
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"dimension must be >= 1: {tuple(dims)}")
    if dtype not in DTYPES:
        raise TensorFormatError(f"unsupported dtype: {dtype}")
    code = DTYPES[dtype][0]
    header_length = _FIXED_HEADER.size + 8 * len(dims)
    fixed = _FIXED_HEADER.pack(MAGIC, FORMAT_VERSION, code, len(dims), header_length)
    return fixed + struct.pack(f"<{len(dims)}Q", *dims)


def _decode_header(raw: bytes) -> TensorHeader:
    if len(raw) < _FIXED_HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, code, ndim, header_length = _FIXED_HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic: {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported version: {version}")
    if code not in _DTYPE_BY_CODE:
        raise TensorFormatError(f"unsupported dtype code: {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise TensorFormatError(f"ndim out of range: {ndim}")
    expected = _FIXED_HEADER.size + 8 * ndim
    if header_length != expected:
        raise TensorFormatError(
            f"header length mismatch: 声明 {header_length}, 应为 {expected}"
        )
    if len(raw) < expected:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, _FIXED_HEADER.size)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"dimension must be >= 1: {dims}")
    return TensorHeader(version=version, dtype=_DTYPE_BY_CODE[code][0], dims=tuple(dims))


def write_tensor(path: PathLike, tensor: np.ndarray, dtype: str = "f32le") -> None:
    """
    写出 DVFT 张量

    Args:
        path: 目标文件路径
        tensor: 稠密数组（1~4 维）
        dtype: 'f32le'（默认，激活值）或 'f64le'（回归中间结果）

    Raises:
        TensorFormatError: 维度不合法或 dtype 不支持
        OSError: 写入失败
    """
    array = np.asarray(tensor)
    header = _encode_header(tuple(int(d) for d in array.shape), dtype)
    payload = np.ascontiguousarray(array, dtype=DTYPES[dtype][1]).tobytes(order="C")

    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    logger.debug("写出 %s: dims=%s dtype=%s", path, array.shape, dtype)


def read_tensor_header(path: PathLike) -> TensorHeader:
    """只读取并校验文件头（用于输出校验等轻量检查）"""
    with open(path, "rb") as f:
        raw = f.read(_FIXED_HEADER.size + 8 * MAX_NDIM)
    return _decode_header(raw)


def read_tensor(path: PathLike) -> np.ndarray:
    """
    读取 DVFT 张量

    头部任何不一致都会立即报错，不做容错。

    Args:
        path: 文件路径

    Returns:
        np.ndarray: 形状取自头部，dtype 与文件一致

    Raises:
        TensorFormatError: magic 错误、版本/dtype 不支持、负载截断等
    """
    with open(path, "rb") as f:
        raw = f.read()
    header = _decode_header(raw)

    payload = memoryview(raw)[header.header_length:]
    if len(payload) < header.payload_length:
        raise TensorFormatError(
            f"truncated payload: 需要 {header.payload_length} 字节, 实际 {len(payload)}"
        )
    if len(payload) > header.payload_length:
        raise TensorFormatError(
            f"trailing bytes: 多出 {len(payload) - header.payload_length} 字节"
        )
    dt = DTYPES[header.dtype][1]
    return np.frombuffer(payload, dtype=dt).reshape(header.dims).copy()


# ============================================================
# 领域数据结构
# ============================================================

class Stream(Enum):
    """双流网络的两条支路"""
    RGB = "rgb"
    FLOW = "flow"


class Layer(IntEnum):
    """卷积层，按抽象程度排序：L1 最低，L4 最高"""
    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4

    @classmethod
    def parse(cls, name: str) -> "Layer":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"未知层: {name}") from None


def representation_label(stream: Stream, layer: Layer) -> str:
    """'L4.flow' 形式的表示名"""
    return f"{layer.name}.{stream.value}"


@dataclass
class LayerActivationSeries:
    """
    单个 (stream, layer) 的逐帧激活

    flow 支路的每一“帧”对应一个光流栈（连续 5 个光流场），而非原始视频帧。
    """
    stream: Stream
    layer: Layer
    data: np.ndarray                     # [T_frames, C, H, W]
    frame_rate: float                    # Hz
    session_frames: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"激活张量必须是 4 维 [T, C, H, W], 实际 {self.data.shape}")
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate 必须为正: {self.frame_rate}")
        if not self.session_frames:
            self.session_frames = [self.data.shape[0]]
        if sum(self.session_frames) != self.data.shape[0]:
            raise ValueError(
                f"session_frames 之和 {sum(self.session_frames)} != 帧数 {self.data.shape[0]}"
            )

    @property
    def label(self) -> str:
        return representation_label(self.stream, self.layer)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(C, H, W)"""
        _, c, h, w = self.data.shape
        return c, h, w


@dataclass
class VoxelSeries:
    """体素响应矩阵 [T_samples, V]，带会话边界和选择掩码"""
    data: np.ndarray
    session_lengths: List[int]
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"体素响应必须是 2 维 [T, V], 实际 {self.data.shape}")
        if sum(self.session_lengths) != self.data.shape[0]:
            raise ValueError(
                f"session_lengths 之和 {sum(self.session_lengths)} != 样本数 {self.data.shape[0]}"
            )
        if self.mask is None:
            self.mask = np.ones(self.data.shape[1], dtype=bool)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != (self.data.shape[1],):
            raise ValueError(f"掩码长度 {self.mask.shape} 与体素数 {self.data.shape[1]} 不符")

    @property
    def n_voxels(self) -> int:
        return self.data.shape[1]


def session_slices(session_lengths: List[int]) -> List[slice]:
    """会话长度 → 行切片"""
    bounds = np.concatenate([[0], np.cumsum(session_lengths)]).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# ============================================================
# 数据集清单
# ============================================================

@dataclass
class ActivationEntry:
    """清单中的一条激活记录"""
    stream: Stream
    layer: Layer
    path: str
    frame_rate: float
    session_frames: List[int]

    @property
    def label(self) -> str:
        return representation_label(self.stream, self.layer)

    def to_dict(self) -> Dict:
        return {
            "stream": self.stream.value,
            "layer": self.layer.name,
            "path": self.path,
            "frame_rate": self.frame_rate,
            "session_frames": list(self.session_frames),
        }


@dataclass
class DatasetManifest:
    """数据集 JSON 清单（路径相对于清单文件所在目录）"""
    tr_seconds: float
    session_lengths: List[int]
    activations: List[ActivationEntry]
    responses_path: str
    mask_path: Optional[str] = None
    ground_truth: Optional[str] = None
    root: str = "."

    def resolve(self, relpath: str) -> str:
        return os.path.join(self.root, relpath)

    def find(self, label: str) -> ActivationEntry:
        for entry in self.activations:
            if entry.label == label:
                return entry
        raise ManifestError(f"清单中没有表示 {label}")

    def to_dict(self) -> Dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "tr_seconds": self.tr_seconds,
            "session_lengths": list(self.session_lengths),
            "activations": [a.to_dict() for a in self.activations],
            "responses": {"path": self.responses_path, "mask_path": self.mask_path},
            "ground_truth": self.ground_truth,
        }


def load_manifest(path: PathLike) -> DatasetManifest:
    """
    读取并校验数据集清单

    Raises:
        ManifestError: 字段缺失或不一致
    """
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)

    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: 不是 {MANIFEST_FORMAT} 文件")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: 不支持的清单版本 {doc.get('version')}")

    try:
        session_lengths = [int(n) for n in doc["session_lengths"]]
        activations = [
            ActivationEntry(
                stream=Stream(a["stream"]),
                layer=Layer.parse(a["layer"]),
                path=a["path"],
                frame_rate=float(a["frame_rate"]),
                session_frames=[int(n) for n in a["session_frames"]],
            )
            for a in doc["activations"]
        ]
        manifest = DatasetManifest(
            tr_seconds=float(doc["tr_seconds"]),
            session_lengths=session_lengths,
            activations=activations,
            responses_path=doc["responses"]["path"],
            mask_path=doc["responses"].get("mask_path"),
            ground_truth=doc.get("ground_truth"),
            root=os.path.dirname(os.path.abspath(path)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{path}: 清单字段错误: {e}") from e

    if not session_lengths or any(n < 1 for n in session_lengths):
        raise ManifestError(f"{path}: session_lengths 必须非空且为正")
    labels = [a.label for a in activations]
    if len(set(labels)) != len(labels):
        raise ManifestError(f"{path}: 重复的表示 {labels}")
    for entry in activations:
        if len(entry.session_frames) != len(session_lengths):
            raise ManifestError(
                f"{path}: {entry.label} 的会话数 {len(entry.session_frames)} "
                f"与 session_lengths ({len(session_lengths)}) 不符"
            )
    return manifest


def save_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, ensure_ascii=False, indent=2)


def read_activations(manifest: DatasetManifest, entry: ActivationEntry) -> LayerActivationSeries:
    """按清单记录读取一组激活"""
    data = read_tensor(manifest.resolve(entry.path))
    if data.ndim != 4:
        raise ManifestError(f"{entry.path}: 激活张量应为 4 维, 实际 {data.ndim}")
    return LayerActivationSeries(
        stream=entry.stream,
        layer=entry.layer,
        data=data,
        frame_rate=entry.frame_rate,
        session_frames=list(entry.session_frames),
    )


def read_voxels(manifest: DatasetManifest) -> VoxelSeries:
    """读取体素响应和掩码"""
    data = read_tensor(manifest.resolve(manifest.responses_path)).astype(np.float64)
    if data.ndim != 2:
        raise ManifestError(f"{manifest.responses_path}: 响应张量应为 2 维")
    mask = None
    if manifest.mask_path:
        mask = read_tensor(manifest.resolve(manifest.mask_path)) != 0
    try:
        return VoxelSeries(data=data, session_lengths=list(manifest.session_lengths), mask=mask)
    except ValueError as e:
        raise ManifestError(str(e)) from e

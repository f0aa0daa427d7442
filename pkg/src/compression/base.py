#!/usr/bin/env python3
"""
空间压缩抽象基类

定义所有压缩方案（APIC / APBIC / PCA）必须实现的统一接口，
确保流水线可以在不同方案之间互换。
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum, auto
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from core.tensor_store import LayerActivationSeries


class CompressionError(ValueError):
    """压缩参数与输入不匹配"""


class CompressorCapability(Enum):
    """压缩方案特性"""
    CHANNEL_PRESERVING = auto()   # 不在通道之间混合数值
    FIXED_OUTPUT_SIZE = auto()    # 所有层输出相同特征数
    SPLIT_DEPENDENT = auto()      # 变换需在每个外层划分的训练会话上拟合


def partition_bounds(length: int, cells: int) -> np.ndarray:
    """
    把长度为 length 的轴均分为 cells 段

    第 i 段覆盖 [floor(i*L/n), floor((i+1)*L/n))，cells <= length 时每段非空。

    Returns:
        np.ndarray: 长度 cells+1 的边界数组
    """
    if cells < 1:
        raise CompressionError(f"网格大小必须为正: {cells}")
    if cells > length:
        raise CompressionError(f"target grid larger than input grid: {cells} > {length}")
    return (np.arange(cells + 1) * length) // cells


@dataclass
class PoolSpec:
    """
    单层的池化参数

    target_grid 用于 APIC；APBIC 另外需要 channel_groups，或者给出
    target_features 由其推导 G = target_features / (h*w)。
    """
    target_grid: Tuple[int, int] = (2, 2)
    channel_groups: Optional[int] = None
    target_features: Optional[int] = None

    def __post_init__(self):
        self.target_grid = (int(self.target_grid[0]), int(self.target_grid[1]))
        if min(self.target_grid) < 1:
            raise CompressionError(f"target_grid 必须为正: {self.target_grid}")

    @property
    def cells(self) -> int:
        return self.target_grid[0] * self.target_grid[1]

    def check_grid(self, height: int, width: int) -> None:
        h_out, w_out = self.target_grid
        if h_out > height or w_out > width:
            raise CompressionError(
                f"target grid larger than input grid: {self.target_grid} > {(height, width)}"
            )

    def groups_for(self, channels: int) -> int:
        """按分组规则得到 APBIC 的组数 G"""
        groups = self.channel_groups
        if groups is None:
            if self.target_features is None:
                raise CompressionError("APBIC 需要 channel_groups 或 target_features")
            if self.target_features % self.cells:
                raise CompressionError(
                    f"target_features {self.target_features} 不能被网格 {self.target_grid} 整除"
                )
            groups = self.target_features // self.cells
        if groups < 1 or groups > channels:
            raise CompressionError(
                f"target_features not achievable: G={groups}, 通道数 {channels}"
            )
        if self.target_features is not None and groups * self.cells != self.target_features:
            raise CompressionError(
                f"target_features not achievable: G*h*w = {groups * self.cells} "
                f"!= {self.target_features}"
            )
        return groups

    def to_dict(self) -> Dict:
        return {
            "target_grid": list(self.target_grid),
            "channel_groups": self.channel_groups,
            "target_features": self.target_features,
        }


@dataclass
class DesignMatrix:
    """压缩并与 TR 对齐后的特征矩阵 [T_samples, D]"""
    data: np.ndarray
    session_lengths: List[int]
    representation_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 2:
            raise CompressionError(f"设计矩阵必须是 2 维, 实际 {self.data.shape}")
        if sum(self.session_lengths) != self.data.shape[0]:
            raise CompressionError(
                f"session_lengths 之和 {sum(self.session_lengths)} != 行数 {self.data.shape[0]}"
            )
        if not np.all(np.isfinite(self.data)):
            raise CompressionError(f"{self.representation_id}: 设计矩阵含 NaN/Inf")

    @property
    def n_features(self) -> int:
        return self.data.shape[1]


class SplitTransform(ABC):
    """在训练行上拟合、再作用于所有行的变换（例如 PCA）"""

    @abstractmethod
    def fit(self, train: np.ndarray) -> "SplitTransform":
        pass

    @abstractmethod
    def transform(self, x: np.ndarray) -> np.ndarray:
        pass


class Compressor(ABC):
    """
    压缩方案抽象基类

    frame_features 把 [T, C, H, W] 激活变成逐帧特征 [T, D]；
    依赖划分的方案（PCA）另外通过 split_transform 提供每个划分上拟合的变换。
    """

    @property
    @abstractmethod
    def name(self) -> str:
        """方案名称"""
        pass

    @abstractmethod
    def capabilities(self) -> Set[CompressorCapability]:
        pass

    @abstractmethod
    def output_dim(self, shape: Tuple[int, int, int], spec: PoolSpec) -> int:
        """
        逐帧特征维数

        Args:
            shape: (C, H, W)
            spec: 该层的池化参数
        """
        pass

    @abstractmethod
    def frame_features(self, acts: LayerActivationSeries, spec: PoolSpec) -> np.ndarray:
        pass

    def split_transform(self, n_components: int,
                        cap_to_samples: bool = False) -> Optional[SplitTransform]:
        """默认无需按划分拟合"""
        return None

    def supports(self, capability: CompressorCapability) -> bool:
        return capability in self.capabilities()


class CompressorRegistry:
    """压缩方案注册中心"""

    _compressors: Dict[str, type] = {}
    _instances: Dict[str, Compressor] = {}

    @classmethod
    def register(cls, compressor_class: type) -> None:
        instance = compressor_class()
        cls._compressors[instance.name] = compressor_class

    @classmethod
    def get(cls, name: str) -> Optional[Compressor]:
        if name not in cls._instances and name in cls._compressors:
            cls._instances[name] = cls._compressors[name]()
        return cls._instances.get(name)

    @classmethod
    def list_available(cls) -> List[str]:
        return sorted(cls._compressors)

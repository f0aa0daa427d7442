#!/usr/bin/env python3
"""
主成分分析 (PCA) 压缩

变换只在训练会话上学习，然后作用于全部会话。用中心化训练矩阵的
thin SVD 计算，分量符号固定为“绝对值最大的坐标为正”，保证可复现。
"""

import logging
from dataclasses import dataclass
from typing import Set, Tuple

import numpy as np
from scipy import linalg

from core.tensor_store import LayerActivationSeries

from .base import (
    CompressionError, Compressor, CompressorCapability, CompressorRegistry,
    DesignMatrix, PoolSpec, SplitTransform,
)

logger = logging.getLogger(__name__)

# 全部列的总方差低于该值视为退化输入
_DEGENERATE_VARIANCE = 1e-24


@dataclass
class PcaModel(SplitTransform):
    """训练好的 PCA 模型"""
    mean: np.ndarray                 # [D]
    components: np.ndarray           # [n_components, D]，行正交归一
    explained_variance: np.ndarray   # [n_components]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_features(self) -> int:
        return self.components.shape[1]

    def fit(self, train: np.ndarray) -> "PcaModel":
        return pca_fit(train, self.n_components)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return _project(self, np.asarray(x, dtype=np.float64))


def _rows(x) -> np.ndarray:
    data = x.data if isinstance(x, DesignMatrix) else np.asarray(x)
    if data.ndim != 2:
        raise CompressionError(f"PCA 输入必须是 2 维, 实际 {data.shape}")
    return data.astype(np.float64, copy=False)


def pca_fit(train, n_components: int) -> PcaModel:
    """
    在训练行上拟合 PCA

    Args:
        train: DesignMatrix 或 [T_train, D] 数组
        n_components: 保留的主成分数

    Returns:
        PcaModel: 分量按奇异值降序排列

    Raises:
        CompressionError: n_components 过大，或输入全为常数
    """
    data = _rows(train)
    n_samples, n_features = data.shape
    if n_components < 1 or n_components > min(n_samples, n_features):
        raise CompressionError(
            f"n_components too large: {n_components} > min({n_samples}, {n_features})"
        )

    mean = data.mean(axis=0)
    centered = data - mean
    if float(np.sum(centered * centered)) < _DEGENERATE_VARIANCE:
        raise CompressionError("degenerate input: 训练数据所有列均为常数")

    _, s, vt = linalg.svd(centered, full_matrices=False, lapack_driver="gesdd")
    components = vt[:n_components]

    # 符号约定：每个分量绝对值最大的坐标为正
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(n_components), pivots])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]

    denom = max(n_samples - 1, 1)
    explained = (s[:n_components] ** 2) / denom
    logger.debug("PCA: %d 样本 × %d 特征 → %d 分量", n_samples, n_features, n_components)
    return PcaModel(mean=mean, components=np.ascontiguousarray(components),
                    explained_variance=explained)


def _project(model: PcaModel, data: np.ndarray) -> np.ndarray:
    if data.ndim != 2 or data.shape[1] != model.n_features:
        raise CompressionError(
            f"dimension mismatch: 输入 {data.shape[-1]} 个特征, 模型 {model.n_features}"
        )
    return (data - model.mean) @ model.components.T


def pca_transform(model: PcaModel, x):
    """
    (x − mean) · componentsᵀ

    输入为 DesignMatrix 时返回 DesignMatrix（保留会话边界），否则返回数组。
    """
    if isinstance(x, DesignMatrix):
        return DesignMatrix(
            data=_project(model, x.data.astype(np.float64, copy=False)),
            session_lengths=list(x.session_lengths),
            representation_id=x.representation_id,
        )
    return _project(model, _rows(x))


def pca_inverse(model: PcaModel, scores: np.ndarray) -> np.ndarray:
    """把主成分得分映射回特征空间"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != model.n_components:
        raise CompressionError(
            f"dimension mismatch: 得分 {scores.shape}, 模型 {model.n_components} 个分量"
        )
    return scores @ model.components + model.mean


class PcaSplitTransform(SplitTransform):
    """
    尚未拟合的 PCA；每个外层划分调用一次 fit

    cap_to_samples 为真时分量数截断为 min(n_components, T_train − 1, D)。
    """

    def __init__(self, n_components: int, cap_to_samples: bool = False):
        self.n_components = n_components
        self.cap_to_samples = cap_to_samples

    def fit(self, train: np.ndarray) -> PcaModel:
        n = self.n_components
        if self.cap_to_samples:
            data = _rows(train)
            n = max(1, min(n, data.shape[0] - 1, data.shape[1]))
        return pca_fit(train, n)

    def transform(self, x: np.ndarray) -> np.ndarray:
        raise CompressionError("PCA 变换尚未拟合")


class PcaCompressor(Compressor):
    """
    PCA 压缩

    逐帧特征是展平的原始激活 C*H*W；降维发生在每个划分的训练会话上。
    """

    @property
    def name(self) -> str:
        return "pca"

    def capabilities(self) -> Set[CompressorCapability]:
        return {
            CompressorCapability.FIXED_OUTPUT_SIZE,
            CompressorCapability.SPLIT_DEPENDENT,
        }

    def output_dim(self, shape: Tuple[int, int, int], spec: PoolSpec) -> int:
        channels, height, width = shape
        return channels * height * width

    def frame_features(self, acts: LayerActivationSeries, spec: PoolSpec) -> np.ndarray:
        data = acts.data if isinstance(acts, LayerActivationSeries) else np.asarray(acts)
        return data.reshape(data.shape[0], -1).astype(np.float64)

    def split_transform(self, n_components: int, cap_to_samples: bool = False) -> PcaSplitTransform:
        return PcaSplitTransform(n_components, cap_to_samples)


CompressorRegistry.register(PcaCompressor)

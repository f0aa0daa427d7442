#!/usr/bin/env python3
"""
Voxelwise Video Encoder - 空间压缩方案

支持三种方案：
1. apic  - 通道内平均池化，不混合通道
2. apbic - 通道内 + 相邻通道组平均，各层输出维数一致
3. pca   - 主成分分析，在每个划分的训练会话上拟合

使用示例：
    from compression import get_compressor, PoolSpec

    compressor = get_compressor('apic')
    features = compressor.frame_features(acts, PoolSpec(target_grid=(2, 2)))
"""

from .base import (
    CompressionError,
    Compressor,
    CompressorCapability,
    CompressorRegistry,
    DesignMatrix,
    PoolSpec,
    SplitTransform,
    partition_bounds,
)

# 导入并注册压缩方案
from .pooling import ApbicCompressor, ApicCompressor, apbic_compress, apic_compress
from .pca import PcaCompressor, PcaModel, pca_fit, pca_inverse, pca_transform
from .temporal import resample_sessions, temporal_resample, window_bounds


def get_compressor(name: str) -> Compressor:
    """
    获取压缩方案

    Args:
        name: 'apic'、'apbic' 或 'pca'

    Raises:
        ValueError: 方案不存在
    """
    compressor = CompressorRegistry.get(name)
    if compressor is None:
        raise ValueError(
            f"压缩方案 '{name}' 不存在。可用方案: {', '.join(list_compressors())}"
        )
    return compressor


def list_compressors() -> list:
    """列出所有已注册的压缩方案"""
    return CompressorRegistry.list_available()


__all__ = [
    # 核心类
    'CompressionError',
    'Compressor',
    'CompressorCapability',
    'CompressorRegistry',
    'DesignMatrix',
    'PoolSpec',
    'SplitTransform',
    # 具体方案
    'ApicCompressor',
    'ApbicCompressor',
    'PcaCompressor',
    'PcaModel',
    # 函数
    'apic_compress',
    'apbic_compress',
    'pca_fit',
    'pca_transform',
    'pca_inverse',
    'temporal_resample',
    'resample_sessions',
    'window_bounds',
    'partition_bounds',
    'get_compressor',
    'list_compressors',
]

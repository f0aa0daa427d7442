"""
Voxelwise Video Encoder (VVE)

用视频动作识别网络各层的激活预测 fMRI 体素响应：
空间压缩 (APIC / APBIC / PCA) → TR 对齐 → 核岭回归 → 层间对比与分区。

快速使用:
    from core.config import load_config
    from core.pipeline import EncodingPipeline

    pipeline = EncodingPipeline(load_config("config.json"))
    pipeline.run_all()
"""

__version__ = "0.1.0"
__author__ = "VVE Contributors"

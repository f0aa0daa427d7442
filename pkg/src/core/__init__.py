"""VVE 核心：张量存储、编码模型、分析、合成数据与流水线"""

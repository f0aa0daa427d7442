#!/usr/bin/env python3
"""
Voxelwise Video Encoder 命令行入口

使用方法:
    vve synth --out data/
    vve compress --config config.json
    vve fit-score --config config.json --threads 4
    vve contrast --config config.json
    vve parcellate --config config.json
    vve benchmark-compression --config config.json
    vve run-all --config config.json

日志级别由环境变量 VOXELWISE_LOG 控制（DEBUG/INFO/WARNING/ERROR，默认 WARNING）。

退出码: 0 成功；1 输出校验失败；2 输入、配置或数据错误。
"""

import argparse
import logging
import math
import os
import sys
from typing import Dict, List, Optional

# 添加 src 目录到路径
src_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if src_dir not in sys.path:
    sys.path.insert(0, src_dir)

from compression import CompressionError, list_compressors
from core.analysis import AnalysisError
from core.config import ConfigError, PipelineConfig, load_config
from core.encoder import EncoderError, FactorizationError
from core.pipeline import EncodingPipeline
from core.synth import SynthError
from core.tensor_store import ManifestError, TensorFormatError

logger = logging.getLogger("core.cli")

LOG_ENV = "VOXELWISE_LOG"
LOG_LEVELS = {"DEBUG": logging.DEBUG, "INFO": logging.INFO,
              "WARNING": logging.WARNING, "ERROR": logging.ERROR}

PIPELINE_ERRORS = (
    TensorFormatError, ManifestError, CompressionError, EncoderError, FactorizationError,
    AnalysisError, SynthError, ConfigError, OSError,
)

EXIT_OK = 0
EXIT_INVALID_OUTPUT = 1
EXIT_ERROR = 2


def setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed 必须是 64 位无符号整数: {text}")
    return value


def _threads(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"threads 至少为 1: {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', default=None, help='JSON 配置文件')
    common.add_argument('-o', '--out', default=None, help='输出目录（覆盖 output_dir）')
    common.add_argument('-j', '--threads', type=_threads, default=None,
                        help='并行外层划分数（需要 joblib）')
    common.add_argument('--seed', type=_seed, default=None, help='随机种子（覆盖配置）')
    common.add_argument('-m', '--manifest', default=None, help='数据集清单（覆盖 manifest）')

    parser = argparse.ArgumentParser(
        prog='vve',
        description='体素编码流水线：视频网络激活 → 压缩 → 岭回归 → 对比与分区',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  %(prog)s synth --out data/                          # 生成合成数据集
  %(prog)s compress -m data/manifest.json --out run/  # 压缩并对齐到 TR
  %(prog)s fit-score -m data/manifest.json --out run/ # 留一会话评估
  %(prog)s parcellate --out run/                      # 8 类符号分区
"""
    )
    parser.add_argument('--list-schemes', action='store_true', help='列出可用压缩方案')
    sub = parser.add_subparsers(dest='command')
    sub.add_parser('synth', parents=[common], help='生成合成数据集')
    sub.add_parser('compress', parents=[common], help='空间压缩 + 时间重采样')
    sub.add_parser('fit-score', parents=[common], help='核岭回归 + 留一会话评估')
    sub.add_parser('contrast', parents=[common], help='层间对比图')
    sub.add_parser('parcellate', parents=[common], help='三对比符号分区')
    sub.add_parser('benchmark-compression', parents=[common], help='比较 pca/apic/apbic')
    sub.add_parser('run-all', parents=[common], help='compress → fit-score → contrast → parcellate')
    return parser


def _print_synth(result: Dict) -> None:
    s = result["summary"]
    print(f"合成数据集已写出: {result['manifest']}")
    print(f"\n🧪 数据集摘要 (seed={s['seed']}):")
    print(f"   表示: {', '.join(s['representations'])}")
    print(f"   会话: {s['sessions']}, 样本: {s['samples']}, 体素: {s['voxels']}")
    print(f"   snr: {s['snr'] if math.isfinite(s['snr']) else '∞'}")


def _print_compress(result: Dict) -> None:
    s = result["summary"]
    print(f"设计矩阵已写出: {result['design_dir']}")
    print(f"\n🗜️ 压缩摘要 (方案: {s['scheme']}):")
    for label, n in s["representations"].items():
        print(f"   {label}: {n} 个特征")
    print(f"   合计: {s['total_features']}")


def _print_fit_score(result: Dict) -> None:
    print(f"运行报告已写出: {result['report']}")
    print("\n📈 拟合摘要:")
    for label, s in result["summary"].items():
        alphas = ", ".join(f"{a:.3g}" for a in s["alphas"])
        print(f"   {label}: {s['n_above_threshold']} 个体素 m_cv > 阈值"
              f" (零方差 {s['n_flagged']}; α = {alphas})")


def _print_contrast(result: Dict) -> None:
    s = result["summary"]
    print(f"对比图已写出: {result['contrast_dir']}")
    print("\n🔀 对比摘要:")
    for cid, c in s["contrasts"].items():
        print(f"   {cid}: {c['positive']} 个体素为正 (标记 {c['flagged']})")
    print("\n   最佳表示:")
    for label, n in s["best_representation"].items():
        print(f"     {label}: {n}")


def _print_profiles(result: Dict) -> None:
    s = result["summary"]
    print(f"分区已写出: {result['profile_dir']}")
    print(f"\n🧠 分区摘要 ({s['n_active']}/{s['n_voxels']} 个活跃体素):")
    if not s["profiles"]:
        print("   （无活跃体素）")
    for row in s["profiles"]:
        print(f"   {row['code']} ({row['bits']}): {row['voxel_count']:>6}"
              f"  {row['fraction']:6.1%}  {row['label']}")


def _print_benchmark(result: Dict) -> None:
    s = result["summary"]
    print(f"基准结果已写出: {result['benchmark_dir']}")
    print(f"\n⚖️ 压缩方案对比 (参考: {s['reference']}):")
    for row in s["rows"]:
        print(f"   {row['scheme']:>6} 划分 {row['split']}: {row['n_voxels_above']:>6} 个体素"
              f"  ×{row['ratio_vs_reference']:.3g}")


def run(args: argparse.Namespace) -> int:
    config: PipelineConfig = load_config(args.config, overrides={
        "output_dir": args.out,
        "threads": args.threads,
        "seed": args.seed,
        "manifest": args.manifest,
    })
    pipeline = EncodingPipeline(config)

    if args.command == 'synth':
        _print_synth(pipeline.synth())
    elif args.command == 'compress':
        _print_compress(pipeline.compress())
    elif args.command == 'fit-score':
        _print_fit_score(pipeline.fit_score())
    elif args.command == 'contrast':
        _print_contrast(pipeline.contrast())
    elif args.command == 'parcellate':
        _print_profiles(pipeline.parcellate())
    elif args.command == 'benchmark-compression':
        _print_benchmark(pipeline.benchmark())
    elif args.command == 'run-all':
        result = pipeline.run_all()
        _print_compress(result["compress"])
        _print_fit_score(result["fit_score"])
        _print_contrast(result["contrast"])
        _print_profiles(result["parcellate"])

    problems = pipeline.validate_outputs()
    if problems:
        for p in problems:
            print(f"❌ 输出校验失败: {p}", file=sys.stderr)
        return EXIT_INVALID_OUTPUT
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.list_schemes:
        print(f"可用压缩方案: {list_compressors()}")
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_ERROR

    try:
        return run(args)
    except PIPELINE_ERRORS as e:
        logger.error("%s 失败: %s", args.command, e)
        print(f"❌ {args.command}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())

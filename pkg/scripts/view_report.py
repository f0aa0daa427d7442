#!/usr/bin/env python3
"""
运行输出查看器
用法: python scripts/view_report.py <输出目录> [选项]

选项:
    --fit       只显示拟合报告（每个划分的 α 和体素数）
    --profiles  只显示分区摘要
    --bench     只显示压缩方案对比
    --all       显示全部信息 (默认)
"""

import json
import os
import sys


def print_header(text):
    print('\n' + '═' * 60)
    print(f' {text}')
    print('═' * 60)


def load(out_dir, *parts):
    path = os.path.join(out_dir, *parts)
    if not os.path.exists(path):
        return None
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def view_fit(report):
    reps = report['representations']
    print_header(f"📈 拟合报告 (方案 {report['scheme']}, {len(reps)} 个表示)")
    for label, rep in reps.items():
        print(f"\n  {label}  ({rep['n_features']} 个特征)")
        print(f"      m_cv > 阈值: {rep['n_above_threshold']}  零方差: {rep['n_flagged']}")
        for s in rep['splits']:
            print(f"      ├── 会话 {s['held_session']:>2}: α = {s['alpha']:<10.4g}"
                  f" {s['n_above_threshold']:>6} 个体素  {s['seconds']:.2f}s")


def view_profiles(summary):
    print_header(f"🧠 分区摘要 ({summary['n_active']}/{summary['n_voxels']} 个活跃体素)")
    print(f"  对比: {', '.join(summary['contrasts'])}")
    for row in summary['profiles']:
        bar = '█' * int(round(row['fraction'] * 40))
        print(f"  {row['code']} ({row['bits']}) {row['voxel_count']:>6}  {bar} {row['label']}")


def view_bench(doc):
    print_header(f"⚖️ 压缩方案对比 (参考 {doc['reference']}, 阈值 {doc['selection_threshold']})")
    for row in doc['rows']:
        print(f"  {row['scheme']:>6}  划分 {row['split']}: {row['n_voxels_above']:>6}"
              f"  ×{row['ratio_vs_reference']:.3g}  {row.get('fit_seconds', 0):.2f}s")


def main():
    if len(sys.argv) < 2:
        print(__doc__)
        sys.exit(1)

    out_dir = sys.argv[1]
    if not os.path.isdir(out_dir):
        print(f"错误: 目录不存在 - {out_dir}")
        sys.exit(1)

    opts = sys.argv[2:] if len(sys.argv) > 2 else ['--all']
    sections = [
        ('--fit', ('reports', 'fit_score.json'), view_fit),
        ('--profiles', ('profiles', 'profile_summary.json'), view_profiles),
        ('--bench', ('benchmark', 'benchmark.json'), view_bench),
    ]
    shown = 0
    for flag, parts, view in sections:
        if '--all' not in opts and flag not in opts:
            continue
        doc = load(out_dir, *parts)
        if doc is not None:
            view(doc)
            shown += 1

    if not shown:
        print(f"{out_dir} 中没有可显示的报告")
    print()


if __name__ == '__main__':
    main()

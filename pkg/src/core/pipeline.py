#!/usr/bin/env python3
"""
编码流水线 - 各子命令背后的阶段执行器

阶段之间通过输出目录中的文件交接：

    design/     压缩 + TR 对齐后的设计矩阵
    scores/     每个表示的 m_cv 得分图
    reports/    拟合报告
    contrasts/  层间对比图、逐体素最佳表示
    profiles/   8 类符号分区
    benchmark/  压缩方案对比

每个阶段返回一个带 summary 的结果字典，供命令行打印摘要。
"""

import json
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from compression import (
    CompressorCapability, DesignMatrix, get_compressor, resample_sessions,
)

from .analysis import (
    HIERARCHY_CONTRASTS, PARCELLATION_CONTRASTS, AnalysisError, ContrastMap,
    ProfileMap, best_representation, contrast_name, parcellate, profile_label,
    profile_summary, standard_contrasts,
)
from .config import ConfigError, PipelineConfig
from .encoder import ScoreMap, evaluate
from .synth import gen_dataset, write_dataset
from .tensor_store import (
    DatasetManifest, ManifestError, TensorFormatError, load_manifest, read_activations,
    read_tensor, read_tensor_header, read_voxels, session_slices, write_tensor,
)

logger = logging.getLogger(__name__)

DESIGN_MANIFEST = "design_manifest.json"
FLOAT_FORMAT = "%.12g"


def benchmark_ratio(count: int, reference: int) -> float:
    """count / reference；reference 为 0 时两者都为 0 记 1.0，否则记 inf"""
    if reference == 0:
        return 1.0 if count == 0 else float("inf")
    return count / reference


class EncodingPipeline:
    """
    体素编码流水线

    使用方法:
        pipeline = EncodingPipeline(load_config("config.json"))
        pipeline.compress()
        pipeline.fit_score()
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.output_dir = config.output_dir
        # 本次运行写出的 DVFT 文件及其期望形状
        self.written: List[Tuple[str, Tuple[int, ...]]] = []
        # 本次运行写出的报告：CSV 记录行数，JSON 为 None
        self.documents: List[Tuple[str, Optional[int]]] = []

    # ------------------------------------------------------------
    # 文件辅助
    # ------------------------------------------------------------

    def _path(self, *parts: str) -> str:
        path = os.path.join(self.output_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def _write_tensor(self, path: str, tensor: np.ndarray, dtype: str = "f64le") -> None:
        write_tensor(path, tensor, dtype=dtype)
        self.written.append((path, tuple(np.shape(tensor))))

    def _write_json(self, path: str, doc: Dict) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, ensure_ascii=False, indent=2)
        self.documents.append((path, None))

    def _write_csv(self, path: str, table: pd.DataFrame) -> None:
        table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.documents.append((path, len(table)))

    def _check_tensor(self, path: str, shape: Tuple[int, ...]) -> Optional[str]:
        try:
            header = read_tensor_header(path)
        except (OSError, TensorFormatError) as e:
            return f"{path}: {e}"
        if header.dims != shape:
            return f"{path}: 形状 {header.dims} != 期望 {shape}"
        expected = header.header_length + header.payload_length
        if os.path.getsize(path) != expected:
            return f"{path}: 文件长度 {os.path.getsize(path)} != {expected}"
        return None

    @staticmethod
    def _check_document(path: str, n_rows: Optional[int]) -> Optional[str]:
        try:
            if n_rows is None:
                with open(path, "r", encoding="utf-8") as f:
                    json.load(f)
                return None
            table = pd.read_csv(path)
        except (OSError, ValueError) as e:
            return f"{path}: {e}"
        if len(table) != n_rows:
            return f"{path}: {len(table)} 行 != 期望 {n_rows}"
        return None

    def validate_outputs(self) -> List[str]:
        """重新读取本次写出的 DVFT 头、CSV 和 JSON，返回问题列表"""
        problems = [self._check_tensor(path, shape) for path, shape in self.written]
        problems += [self._check_document(path, n) for path, n in self.documents]
        return [p for p in problems if p is not None]

    def load_manifest(self) -> DatasetManifest:
        """
        Raises:
            ConfigError: 未配置 manifest，或 TR 与配置不一致
        """
        if not self.config.manifest:
            raise ConfigError("manifest: 该子命令需要数据集清单")
        manifest = load_manifest(self.config.manifest)
        if abs(manifest.tr_seconds - self.config.temporal.tr_seconds) > 1e-9:
            raise ConfigError(
                f"temporal.tr_seconds={self.config.temporal.tr_seconds} "
                f"与清单的 {manifest.tr_seconds} 不一致"
            )
        return manifest

    # ------------------------------------------------------------
    # synth
    # ------------------------------------------------------------

    def synth(self) -> Dict:
        """生成合成数据集并写入 output_dir"""
        spec = self.config.synth_spec()
        dataset = gen_dataset(spec)
        manifest_path = write_dataset(self.output_dir, dataset)
        for acts in dataset.activations:
            self.written.append((self._path("activations", f"{acts.label}.dvft"), acts.data.shape))
        self.written.append((self._path("responses.dvft"), dataset.voxels.data.shape))
        self.written.append((self._path("mask.dvft"), dataset.voxels.mask.shape))
        self.written.append((self._path("truth", "noiseless.dvft"),
                             dataset.truth.noiseless_responses.shape))
        for label, w in dataset.truth.weights.items():
            self.written.append((self._path("truth", f"weights_{label}.dvft"), w.shape))
        self.documents += [(manifest_path, None), (self._path("ground_truth.json"), None)]
        return {
            "manifest": manifest_path,
            "summary": {
                "seed": spec.seed,
                "representations": [a.label for a in dataset.activations],
                "sessions": spec.sessions,
                "samples": int(sum(spec.session_lengths)),
                "voxels": spec.voxels,
                "snr": spec.snr,
            },
        }

    # ------------------------------------------------------------
    # compress
    # ------------------------------------------------------------

    def _min_train_samples(self, session_lengths: List[int], outer_splits: int) -> int:
        total = sum(session_lengths)
        return total - max(session_lengths[:outer_splits])

    def _check_pca(self, manifest: DatasetManifest, outer_splits: int) -> None:
        """n_components 必须不超过每个划分的训练样本数和原始特征数"""
        n = self.config.compression.n_components
        t_train = self._min_train_samples(manifest.session_lengths, outer_splits)
        if n > t_train:
            raise ConfigError(
                f"compression.n_components={n} 超过最少的训练样本数 {t_train}"
            )
        for entry in manifest.activations:
            dims = read_tensor_header(manifest.resolve(entry.path)).dims
            n_features = int(np.prod(dims[1:]))
            if n > n_features:
                raise ConfigError(
                    f"compression.n_components={n} 超过 {entry.label} 的特征数 {n_features}"
                )

    def build_designs(self, manifest: DatasetManifest, scheme: str) -> Dict[str, DesignMatrix]:
        """对清单中的每个 (stream, layer) 做空间压缩 + 时间重采样"""
        compressor = get_compressor(scheme)
        temporal = self.config.temporal
        designs = {}
        for entry in manifest.activations:
            acts = read_activations(manifest, entry)
            spec = self.config.compression.pool_spec(entry.layer, scheme)
            frames = compressor.frame_features(acts, spec)
            data = resample_sessions(frames, acts.frame_rate, acts.session_frames,
                                     manifest.session_lengths, temporal.tr_seconds,
                                     temporal.lag_trs)
            designs[entry.label] = DesignMatrix(
                data=data,
                session_lengths=list(manifest.session_lengths),
                representation_id=f"{entry.label}.{scheme}",
            )
            logger.info("%s: %d 个特征", designs[entry.label].representation_id, data.shape[1])
        # PCA 的维数在每个划分上变换后才固定
        if (compressor.supports(CompressorCapability.FIXED_OUTPUT_SIZE)
                and not compressor.supports(CompressorCapability.SPLIT_DEPENDENT)):
            sizes = {label: d.n_features for label, d in designs.items()}
            if len(set(sizes.values())) > 1:
                raise ConfigError(f"{scheme}: 各层输出维数必须一致, 实际 {sizes}")
        return designs

    def compress(self) -> Dict:
        """
        写出每个表示的设计矩阵

        Raises:
            ConfigError: PCA 分量数超过训练样本数（在任何计算之前检查）
        """
        manifest = self.load_manifest()
        scheme = self.config.compression.scheme
        if scheme == "pca":
            self._check_pca(manifest, self.config.ridge.outer_splits)

        designs = self.build_designs(manifest, scheme)
        entries = []
        for label, design in designs.items():
            rel = f"{label}.dvft"
            self._write_tensor(self._path("design", rel), design.data)
            layer = manifest.find(label).layer
            entries.append({
                "label": label,
                "representation_id": design.representation_id,
                "path": rel,
                "n_features": design.n_features,
                "pool_spec": self.config.compression.pool_spec(layer, scheme).to_dict(),
            })

        self._write_json(self._path("design", DESIGN_MANIFEST), {
            "scheme": scheme,
            "n_components": self.config.compression.n_components if scheme == "pca" else None,
            "tr_seconds": self.config.temporal.tr_seconds,
            "lag_trs": self.config.temporal.lag_trs,
            "session_lengths": list(manifest.session_lengths),
            "representations": entries,
        })
        return {
            "design_dir": os.path.join(self.output_dir, "design"),
            "summary": {
                "scheme": scheme,
                "representations": {e["label"]: e["n_features"] for e in entries},
                "total_features": int(sum(e["n_features"] for e in entries)),
            },
        }

    # ------------------------------------------------------------
    # fit-score
    # ------------------------------------------------------------

    def load_designs(self) -> Tuple[Dict, Dict[str, DesignMatrix]]:
        path = os.path.join(self.output_dir, "design", DESIGN_MANIFEST)
        if not os.path.exists(path):
            raise ManifestError(f"{path} 不存在, 请先运行 compress")
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        designs = {}
        for entry in doc["representations"]:
            data = read_tensor(os.path.join(self.output_dir, "design", entry["path"]))
            designs[entry["label"]] = DesignMatrix(
                data=data.astype(np.float64),
                session_lengths=list(doc["session_lengths"]),
                representation_id=entry["representation_id"],
            )
        return doc, designs

    def _evaluate(self, design: DesignMatrix, voxels, scheme: str,
                  outer_splits: Optional[int] = None, cap_pca: bool = False) -> ScoreMap:
        cfg = self.config.ridge.ridge_config(voxels.mask, outer_splits=outer_splits)
        compressor = get_compressor(scheme)
        transform = None
        if compressor.supports(CompressorCapability.SPLIT_DEPENDENT):
            transform = compressor.split_transform(self.config.compression.n_components,
                                                   cap_to_samples=cap_pca)
        return evaluate(design, voxels, cfg, split_transform=transform,
                        n_jobs=self.config.threads)

    def fit_score(self) -> Dict:
        """对每个表示运行留一会话评估，写出得分图和运行报告"""
        manifest = self.load_manifest()
        voxels = read_voxels(manifest)
        design_doc, designs = self.load_designs()
        scheme = design_doc["scheme"]
        ridge = self.config.ridge

        report = {
            "scheme": scheme,
            "ridge": ridge.ridge_config(voxels.mask).to_dict(),
            "use_mask": ridge.use_mask,
            "representations": {},
        }
        summary = {}
        for label, design in designs.items():
            score_map = self._evaluate(design, voxels, scheme)
            self._write_score_map(label, score_map)
            counts = {
                "n_above_threshold": score_map.count_above(ridge.selection_threshold),
                "n_flagged": int(score_map.flagged.sum()),
            }
            report["representations"][label] = {
                "representation_id": score_map.representation_id,
                "n_features": design.n_features,
                "n_splits_used": score_map.n_splits_used,
                **counts,
                "splits": [s.to_dict() for s in score_map.splits],
            }
            summary[label] = {
                **counts,
                "alphas": [s.alpha for s in score_map.splits],
            }

        report_path = self._path("reports", "fit_score.json")
        self._write_json(report_path, report)
        return {"report": report_path, "summary": summary}

    def _write_score_map(self, label: str, score_map: ScoreMap) -> None:
        self._write_tensor(self._path("scores", f"{label}.dvft"), score_map.scores)
        self._write_csv(self._path("scores", f"{label}.csv"), pd.DataFrame({
            "voxel_id": np.arange(score_map.n_voxels),
            "score": score_map.scores,
            "flagged": score_map.flagged.astype(int),
        }))

    def load_score_maps(self) -> Dict[str, ScoreMap]:
        """按设计清单的顺序读取 scores/*.dvft"""
        path = os.path.join(self.output_dir, "design", DESIGN_MANIFEST)
        if not os.path.exists(path):
            raise ManifestError(f"{path} 不存在, 请先运行 compress")
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        maps = {}
        for entry in doc["representations"]:
            label = entry["label"]
            score_path = os.path.join(self.output_dir, "scores", f"{label}.dvft")
            if not os.path.exists(score_path):
                raise AnalysisError(f"缺少得分图 {score_path}, 请先运行 fit-score")
            maps[label] = ScoreMap.from_array(read_tensor(score_path),
                                              representation_id=entry["representation_id"])
        return maps

    # ------------------------------------------------------------
    # contrast / parcellate
    # ------------------------------------------------------------

    def _write_contrast(self, cmap: ContrastMap) -> None:
        self._write_tensor(self._path("contrasts", f"{cmap.contrast_id}.dvft"), cmap.values)
        self._write_csv(self._path("contrasts", f"{cmap.contrast_id}.csv"), pd.DataFrame({
            "voxel_id": np.arange(cmap.n_voxels),
            "value": cmap.values,
            "flagged": cmap.flagged.astype(int),
        }))

    def contrast(self) -> Dict:
        """
        计算层级对比和分区对比（两种方向都输出），以及逐体素最佳表示

        缺少某个表示时跳过对应对比；一个都算不出时报错。
        """
        score_maps = self.load_score_maps()
        pairs = []
        for a, b in HIERARCHY_CONTRASTS + PARCELLATION_CONTRASTS:
            if (a, b) in pairs:
                continue
            if a in score_maps and b in score_maps:
                pairs.append((a, b))
            else:
                logger.warning("跳过对比 %s: 缺少得分图", contrast_name(a, b))
        if not pairs:
            raise AnalysisError("没有可计算的对比: 缺少所需表示的得分图")

        contrasts = standard_contrasts(score_maps, pairs)
        for cmap in contrasts:
            self._write_contrast(cmap)

        threshold = self.config.analysis.activity_threshold
        best = best_representation(score_maps, threshold)
        best_scores = np.array([
            score_maps[best.labels[i]].scores[v] if i >= 0 else np.nan
            for v, i in enumerate(best.index)
        ])
        self._write_csv(self._path("contrasts", "best_representation.csv"), pd.DataFrame({
            "voxel_id": np.arange(best.index.size),
            "best_index": best.index,
            "best_label": [best.labels[i] if i >= 0 else "" for i in best.index],
            "best_score": best_scores,
        }))
        return {
            "contrast_dir": os.path.join(self.output_dir, "contrasts"),
            "summary": {
                "contrasts": {
                    c.contrast_id: {
                        "positive": int(c.positive().sum()),
                        "flagged": int(c.flagged.sum()),
                    }
                    for c in contrasts
                },
                "best_representation": best.counts(),
            },
        }

    def parcellate(self) -> Dict:
        """
        三对比符号分区

        Raises:
            AnalysisError: 缺少 L1.flow / L2.flow / L4.flow / L2.rgb / L4.rgb 的得分图
        """
        score_maps = self.load_score_maps()
        c1, c2, c3 = standard_contrasts(score_maps, PARCELLATION_CONTRASTS)
        threshold = self.config.analysis.activity_threshold
        profile = parcellate(c1, c2, c3, list(score_maps.values()), threshold)
        rows = profile_summary(profile)

        self._write_tensor(self._path("profiles", "profile.dvft"),
                           profile.codes.astype(np.float64))
        self._write_csv(self._path("profiles", "profile.csv"), pd.DataFrame({
            "voxel_id": np.arange(profile.codes.size),
            "code": profile.codes,
            "label": [profile_label(int(c)) for c in profile.codes],
        }))
        summary_doc = self._profile_doc(profile, rows)
        self._write_json(self._path("profiles", "profile_summary.json"), summary_doc)
        return {"profile_dir": os.path.join(self.output_dir, "profiles"), "summary": summary_doc}

    @staticmethod
    def _profile_doc(profile: ProfileMap, rows) -> Dict:
        return {
            "activity_threshold": profile.activity_threshold,
            "contrasts": list(profile.contrast_ids),
            "n_voxels": int(profile.codes.size),
            "n_active": profile.n_active,
            "profiles": [r.to_dict() for r in rows],
        }

    # ------------------------------------------------------------
    # benchmark-compression
    # ------------------------------------------------------------

    def benchmark(self) -> Dict:
        """
        在同一数据集上比较各压缩方案

        每个 (方案, 划分) 统计掩码内至少有一个表示 m_cv 超过阈值的体素数，
        并与参考方案在同一划分上的计数求比值。PCA 分量数按划分截断为
        min(n_components, T_train − 1)。
        """
        manifest = self.load_manifest()
        voxels = read_voxels(manifest)
        bench = self.config.benchmark
        threshold = self.config.ridge.selection_threshold
        mask = voxels.mask if self.config.ridge.use_mask else np.ones(voxels.n_voxels, bool)
        held_sessions = list(range(bench.outer_splits))
        slices = session_slices(list(manifest.session_lengths))
        if bench.outer_splits > len(slices):
            raise ConfigError(
                f"benchmark.outer_splits={bench.outer_splits} 超过会话数 {len(slices)}"
            )

        per_rep = []
        above_any: Dict[Tuple[str, int], np.ndarray] = {}
        seconds: Dict[Tuple[str, int], float] = {}
        for scheme in bench.schemes:
            designs = self.build_designs(manifest, scheme)
            for label, design in designs.items():
                score_map = self._evaluate(design, voxels, scheme,
                                           outer_splits=bench.outer_splits, cap_pca=True)
                for split in score_map.splits:
                    above = ~split.flagged & (np.nan_to_num(split.scores, nan=-np.inf) > threshold)
                    above &= mask
                    key = (scheme, split.held_session)
                    above_any[key] = above_any.get(key, np.zeros_like(above)) | above
                    seconds[key] = seconds.get(key, 0.0) + split.seconds
                    per_rep.append({
                        "scheme": scheme,
                        "representation": label,
                        "split": held_sessions.index(split.held_session),
                        "held_session": split.held_session,
                        "n_features": design.n_features,
                        "alpha": split.alpha,
                        "n_voxels_above": int(above.sum()),
                        "fit_seconds": round(split.seconds, 4),
                    })

        rows = []
        for scheme in bench.schemes:
            for i, held in enumerate(held_sessions):
                count = int(above_any[(scheme, held)].sum())
                reference = int(above_any[(bench.reference, held)].sum())
                rows.append({
                    "scheme": scheme,
                    "split": i,
                    "held_session": held,
                    "n_voxels_above": count,
                    "ratio_vs_reference": benchmark_ratio(count, reference),
                    "fit_seconds": round(seconds[(scheme, held)], 4),
                })
        ref_counts = {
            (r["representation"], r["held_session"]): r["n_voxels_above"]
            for r in per_rep if r["scheme"] == bench.reference
        }
        for r in per_rep:
            r["ratio_vs_reference"] = benchmark_ratio(
                r["n_voxels_above"], ref_counts[(r["representation"], r["held_session"])]
            )

        self._write_csv(self._path("benchmark", "benchmark.csv"), pd.DataFrame(rows))
        self._write_csv(self._path("benchmark", "benchmark_by_representation.csv"),
                        pd.DataFrame(per_rep))
        doc = {
            "schemes": list(bench.schemes),
            "reference": bench.reference,
            "outer_splits": bench.outer_splits,
            "selection_threshold": threshold,
            "rows": rows,
            "by_representation": per_rep,
        }
        self._write_json(self._path("benchmark", "benchmark.json"), doc)
        return {"benchmark_dir": os.path.join(self.output_dir, "benchmark"), "summary": doc}

    # ------------------------------------------------------------
    # run-all
    # ------------------------------------------------------------

    def run_all(self) -> Dict:
        """compress → fit-score → contrast → parcellate"""
        return {
            "compress": self.compress(),
            "fit_score": self.fit_score(),
            "contrast": self.contrast(),
            "parcellate": self.parcellate(),
        }


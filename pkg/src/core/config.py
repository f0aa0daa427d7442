#!/usr/bin/env python3
"""
流水线配置

一个 JSON 文档驱动所有子命令。用户配置按键深度合并到随包发布的
default_config.json 之上；任何层级出现未知键都会报错，并给出点分路径。
"""

import copy
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

import numpy as np

from compression.base import CompressionError, PoolSpec

from .encoder import EncoderError, RidgeConfig, default_alpha_grid
from .synth import SynthError, SynthSpec
from .tensor_store import Layer

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "default_config.json")

SCHEMES = ("pca", "apic", "apbic")
MAX_SEED = 2 ** 64 - 1


class ConfigError(ValueError):
    """配置不合法"""


def _check_keys(doc: Any, allowed, path: str) -> Dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: 应为对象, 实际 {type(doc).__name__}")
    for key in doc:
        if key not in allowed:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key: {dotted}")
    return doc


def _int(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: 应为整数, 实际 {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: 必须 >= {minimum}, 实际 {value}")
    return value


def _float(value: Any, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: 应为数值, 实际 {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{path}: 必须为正, 实际 {value}")
    return float(value)


def deep_merge(base: Dict, override: Dict) -> Dict:
    """override 中的对象逐键合并进 base，其余值直接替换"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class LayerPoolConfig:
    """
    单层池化配置

    target_grid 给 APIC；APBIC 使用 apbic_grid（缺省时退回 target_grid），
    组数由 target_features / (h*w) 推导，除非显式给出 channel_groups。
    """
    target_grid: Optional[List[int]] = None
    apbic_grid: Optional[List[int]] = None
    channel_groups: Optional[int] = None
    target_features: Optional[int] = None
    present: frozenset = frozenset()

    KEYS = ("target_grid", "apbic_grid", "channel_groups", "target_features")

    @staticmethod
    def _grid(doc: Dict, key: str, path: str) -> Optional[List[int]]:
        grid = doc.get(key)
        if grid is None:
            return None
        if not isinstance(grid, list) or len(grid) != 2:
            raise ConfigError(f"{path}.{key}: 应为 [h, w]")
        return [_int(g, f"{path}.{key}", 1) for g in grid]

    @classmethod
    def from_dict(cls, doc: Dict, path: str) -> "LayerPoolConfig":
        _check_keys(doc, cls.KEYS, path)
        groups = doc.get("channel_groups")
        if groups is not None:
            groups = _int(groups, f"{path}.channel_groups", 1)
        features = doc.get("target_features")
        if features is not None:
            features = _int(features, f"{path}.target_features", 1)
        return cls(target_grid=cls._grid(doc, "target_grid", path),
                   apbic_grid=cls._grid(doc, "apbic_grid", path),
                   channel_groups=groups, target_features=features,
                   present=frozenset(doc))

    def to_dict(self) -> Dict:
        """只输出配置中出现过的键"""
        return {key: getattr(self, key) for key in self.KEYS if key in self.present}


@dataclass
class CompressionConfig:
    scheme: str = "apic"
    n_components: int = 2000
    layers: Dict[str, LayerPoolConfig] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Dict, path: str = "compression") -> "CompressionConfig":
        _check_keys(doc, ("scheme", "n_components", "layers"), path)
        scheme = doc.get("scheme", "apic")
        if scheme not in SCHEMES:
            raise ConfigError(f"{path}.scheme: 必须是 {'|'.join(SCHEMES)}, 实际 {scheme!r}")
        layer_docs = _check_keys(doc.get("layers", {}), ("default",) + tuple(l.name for l in Layer),
                                 f"{path}.layers")
        layers = {
            name: LayerPoolConfig.from_dict(sub, f"{path}.layers.{name}")
            for name, sub in layer_docs.items()
        }
        return cls(
            scheme=scheme,
            n_components=_int(doc.get("n_components", 2000), f"{path}.n_components", 1),
            layers=layers,
        )

    def pool_spec(self, layer: Layer, scheme: str = "apic") -> PoolSpec:
        """默认设置叠加该层的覆盖项；scheme 为 apbic 时使用 apbic_grid"""
        merged = LayerPoolConfig(target_grid=[2, 2])
        for name in ("default", layer.name):
            override = self.layers.get(name)
            if override is None:
                continue
            for key in override.present:
                setattr(merged, key, getattr(override, key))
        grid = merged.target_grid
        if scheme == "apbic" and merged.apbic_grid is not None:
            grid = merged.apbic_grid
        if grid is None:
            raise ConfigError(f"compression.layers.{layer.name}: 缺少 target_grid")
        try:
            if scheme != "apbic":
                return PoolSpec(target_grid=tuple(grid))
            return PoolSpec(target_grid=tuple(grid),
                            channel_groups=merged.channel_groups,
                            target_features=merged.target_features)
        except CompressionError as e:
            raise ConfigError(f"compression.layers.{layer.name}: {e}") from e

    def to_dict(self) -> Dict:
        return {
            "scheme": self.scheme,
            "n_components": self.n_components,
            "layers": {name: cfg.to_dict() for name, cfg in self.layers.items()},
        }


@dataclass
class TemporalConfig:
    tr_seconds: float = 2.0
    lag_trs: int = 2

    @classmethod
    def from_dict(cls, doc: Dict, path: str = "temporal") -> "TemporalConfig":
        _check_keys(doc, ("tr_seconds", "lag_trs"), path)
        return cls(
            tr_seconds=_float(doc.get("tr_seconds", 2.0), f"{path}.tr_seconds", positive=True),
            lag_trs=_int(doc.get("lag_trs", 2), f"{path}.lag_trs", 0),
        )

    def to_dict(self) -> Dict:
        return {"tr_seconds": self.tr_seconds, "lag_trs": self.lag_trs}


@dataclass
class RidgeSection:
    alphas: Optional[List[float]] = None
    alpha_min: float = 1e-3
    alpha_max: float = 1e5
    n_alphas: int = 20
    inner_folds: int = 5
    outer_splits: int = 5
    selection_threshold: float = 0.1
    use_mask: bool = True

    @classmethod
    def from_dict(cls, doc: Dict, path: str = "ridge") -> "RidgeSection":
        _check_keys(doc, [f.name for f in fields(cls)], path)
        alphas = doc.get("alphas")
        if alphas is not None:
            if not isinstance(alphas, list) or not alphas:
                raise ConfigError(f"{path}.alphas: 应为非空数组")
            alphas = [_float(a, f"{path}.alphas", positive=True) for a in alphas]
        use_mask = doc.get("use_mask", True)
        if not isinstance(use_mask, bool):
            raise ConfigError(f"{path}.use_mask: 应为布尔值")
        section = cls(
            alphas=alphas,
            alpha_min=_float(doc.get("alpha_min", 1e-3), f"{path}.alpha_min", positive=True),
            alpha_max=_float(doc.get("alpha_max", 1e5), f"{path}.alpha_max", positive=True),
            n_alphas=_int(doc.get("n_alphas", 20), f"{path}.n_alphas", 1),
            inner_folds=_int(doc.get("inner_folds", 5), f"{path}.inner_folds", 2),
            outer_splits=_int(doc.get("outer_splits", 5), f"{path}.outer_splits", 1),
            selection_threshold=_float(doc.get("selection_threshold", 0.1),
                                       f"{path}.selection_threshold"),
            use_mask=use_mask,
        )
        if alphas is None and section.alpha_min >= section.alpha_max and section.n_alphas > 1:
            raise ConfigError(f"{path}: alpha_min 必须小于 alpha_max")
        return section

    def alpha_grid(self) -> np.ndarray:
        if self.alphas is not None:
            return np.asarray(self.alphas, dtype=np.float64)
        return default_alpha_grid(self.alpha_min, self.alpha_max, self.n_alphas)

    def ridge_config(self, mask: Optional[np.ndarray] = None,
                     outer_splits: Optional[int] = None) -> RidgeConfig:
        """
        构造 RidgeConfig；use_mask 为 false 时掩码被忽略（全部体素参与 α 选择）
        """
        if mask is not None and not self.use_mask:
            mask = np.ones_like(mask, dtype=bool)
        try:
            return RidgeConfig(
                alpha_grid=self.alpha_grid(),
                inner_folds=self.inner_folds,
                outer_splits=outer_splits or self.outer_splits,
                selection_threshold=self.selection_threshold,
                selection_mask=mask,
            )
        except EncoderError as e:
            raise ConfigError(f"ridge: {e}") from e

    def to_dict(self) -> Dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AnalysisConfig:
    activity_threshold: float = 0.1

    @classmethod
    def from_dict(cls, doc: Dict, path: str = "analysis") -> "AnalysisConfig":
        _check_keys(doc, ("activity_threshold",), path)
        return cls(activity_threshold=_float(doc.get("activity_threshold", 0.1),
                                             f"{path}.activity_threshold"))

    def to_dict(self) -> Dict:
        return {"activity_threshold": self.activity_threshold}


@dataclass
class BenchmarkConfig:
    schemes: List[str] = field(default_factory=lambda: list(SCHEMES))
    outer_splits: int = 2
    reference: str = "pca"

    @classmethod
    def from_dict(cls, doc: Dict, path: str = "benchmark") -> "BenchmarkConfig":
        _check_keys(doc, ("schemes", "outer_splits", "reference"), path)
        schemes = doc.get("schemes", list(SCHEMES))
        if not isinstance(schemes, list) or not schemes:
            raise ConfigError(f"{path}.schemes: 应为非空数组")
        for s in schemes:
            if s not in SCHEMES:
                raise ConfigError(f"{path}.schemes: 未知方案 {s!r}")
        reference = doc.get("reference", "pca")
        if reference not in schemes:
            raise ConfigError(f"{path}.reference: {reference!r} 不在 schemes 中")
        return cls(
            schemes=list(schemes),
            outer_splits=_int(doc.get("outer_splits", 2), f"{path}.outer_splits", 1),
            reference=reference,
        )

    def to_dict(self) -> Dict:
        return {"schemes": list(self.schemes), "outer_splits": self.outer_splits,
                "reference": self.reference}


_SYNTH_KEYS = tuple(f.name for f in fields(SynthSpec))


@dataclass
class PipelineConfig:
    """完整配置"""
    manifest: Optional[str] = None
    output_dir: str = "vve_out"
    seed: int = 0
    threads: int = 1
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    ridge: RidgeSection = field(default_factory=RidgeSection)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    synth: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Dict) -> "PipelineConfig":
        """
        从已合并的字典构造配置

        Raises:
            ConfigError: 未知键、类型或取值错误
        """
        _check_keys(doc, [f.name for f in fields(cls)], "")
        manifest = doc.get("manifest")
        if manifest is not None and not isinstance(manifest, str):
            raise ConfigError("manifest: 应为路径字符串")
        output_dir = doc.get("output_dir", "vve_out")
        if not isinstance(output_dir, str) or not output_dir:
            raise ConfigError("output_dir: 应为非空字符串")
        seed = _int(doc.get("seed", 0), "seed", 0)
        if seed > MAX_SEED:
            raise ConfigError(f"seed: 超出 64 位无符号范围: {seed}")
        synth = _check_keys(doc.get("synth", {}), _SYNTH_KEYS, "synth")

        config = cls(
            manifest=manifest,
            output_dir=output_dir,
            seed=seed,
            threads=_int(doc.get("threads", 1), "threads", 1),
            compression=CompressionConfig.from_dict(doc.get("compression", {})),
            temporal=TemporalConfig.from_dict(doc.get("temporal", {})),
            ridge=RidgeSection.from_dict(doc.get("ridge", {})),
            analysis=AnalysisConfig.from_dict(doc.get("analysis", {})),
            benchmark=BenchmarkConfig.from_dict(doc.get("benchmark", {})),
            synth=dict(synth),
        )
        config.synth_spec()
        return config

    def synth_spec(self) -> SynthSpec:
        """合成参数；seed 未单独给出时使用全局 seed"""
        doc = dict(self.synth)
        doc.setdefault("seed", self.seed)
        try:
            spec = SynthSpec.from_dict(doc)
            spec.validate()
        except (SynthError, TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"synth: {e}") from e
        return spec

    def to_dict(self) -> Dict:
        return {
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "threads": self.threads,
            "compression": self.compression.to_dict(),
            "temporal": self.temporal.to_dict(),
            "ridge": self.ridge.to_dict(),
            "analysis": self.analysis.to_dict(),
            "benchmark": self.benchmark.to_dict(),
            "synth": dict(self.synth),
        }


def load_default_config() -> Dict:
    with open(DEFAULT_CONFIG_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def load_config(path: Optional[str] = None, overrides: Optional[Dict] = None) -> PipelineConfig:
    """
    读取配置文件并与默认配置合并

    Args:
        path: 用户配置 JSON（None 表示只用默认配置）
        overrides: 命令行覆盖项（值为 None 的键被忽略）

    Returns:
        PipelineConfig

    Raises:
        ConfigError: 文件不是合法 JSON 或校验失败
    """
    doc = load_default_config()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: 不是合法的 JSON: {e}") from e
        _check_keys(user, list(doc), "")
        doc = deep_merge(doc, user)
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    # 命令行 seed 同时覆盖 synth.seed
    if (overrides or {}).get("seed") is not None and isinstance(doc.get("synth"), dict):
        doc["synth"] = dict(doc.get("synth") or {}, seed=overrides["seed"])
    return PipelineConfig.from_dict(doc)

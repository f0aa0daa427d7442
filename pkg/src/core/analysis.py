#!/usr/bin/env python3
"""
层间对比与 8 类符号分区

对比图是两个表示得分的逐体素差值；分区根据三个对比的符号
给每个活跃体素一个 3 位编码：

    bit0 = (L2.flow − L4.flow) > 0
    bit1 = (L2.rgb  − L4.rgb ) > 0
    bit2 = (L1.flow − L4.rgb ) > 0
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .encoder import ScoreMap

logger = logging.getLogger(__name__)

INACTIVE = -1
N_PROFILES = 8

# 层级对比（高层 − 低层）
HIERARCHY_CONTRASTS: List[Tuple[str, str]] = [
    ("L4.flow", "L2.flow"),
    ("L4.rgb", "L2.rgb"),
    ("L1.flow", "L4.rgb"),
]

# 分区使用的对比，顺序即 bit0, bit1, bit2
PARCELLATION_CONTRASTS: List[Tuple[str, str]] = [
    ("L2.flow", "L4.flow"),
    ("L2.rgb", "L4.rgb"),
    ("L1.flow", "L4.rgb"),
]

# 三个主要簇: code -> (名称, 显示颜色)
PROFILE_LABELS: Dict[int, Tuple[str, str]] = {
    3: ("foveal early visual", "deep blue"),
    7: ("peripheral early visual", "green"),
    0: ("lateral high-level", "yellow"),
}


class AnalysisError(ValueError):
    """对比/分区输入不一致"""


def contrast_name(a: str, b: str) -> str:
    """'L4.flow-minus-L2.flow'"""
    return f"{a}-minus-{b}"


def profile_label(code: int) -> str:
    if code == INACTIVE:
        return "inactive"
    return PROFILE_LABELS.get(code, ("minor", ""))[0]


@dataclass
class ContrastMap:
    """两个得分图之差；任一输入被标记的体素在输出中同样被标记（值为 NaN）"""
    values: np.ndarray
    flagged: np.ndarray
    contrast_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.flagged = np.asarray(self.flagged, dtype=bool).ravel()
        if self.values.shape != self.flagged.shape:
            raise AnalysisError("values 与 flagged 长度不一致")
        self.values = np.where(self.flagged, np.nan, self.values)

    @property
    def n_voxels(self) -> int:
        return self.values.size

    def positive(self) -> np.ndarray:
        """严格为正的体素；零和被标记的体素都视为非正"""
        return ~self.flagged & (np.nan_to_num(self.values, nan=0.0) > 0)


@dataclass
class ProfileMap:
    """每个体素的 3 位符号编码（0..7），不活跃为 INACTIVE"""
    codes: np.ndarray
    activity_threshold: float = 0.1
    contrast_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).ravel()
        bad = (self.codes != INACTIVE) & ((self.codes < 0) | (self.codes >= N_PROFILES))
        if np.any(bad):
            raise AnalysisError(f"非法编码: {np.unique(self.codes[bad]).tolist()}")

    @property
    def active(self) -> np.ndarray:
        return self.codes != INACTIVE

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


@dataclass
class ProfileRow:
    code: int
    voxel_count: int
    fraction: float
    label: str

    def to_dict(self) -> Dict:
        return {
            "code": self.code,
            "bits": format(self.code, "03b"),
            "voxel_count": self.voxel_count,
            "fraction": self.fraction,
            "label": self.label,
        }


@dataclass
class BestRepresentation:
    """逐体素得分最高的表示（-1 表示没有表示超过活跃阈值）"""
    index: np.ndarray
    labels: List[str]
    threshold: float

    def label_of(self, voxel: int) -> Optional[str]:
        i = int(self.index[voxel])
        return None if i < 0 else self.labels[i]

    def counts(self) -> Dict[str, int]:
        return {label: int(np.sum(self.index == i)) for i, label in enumerate(self.labels)}


def contrast(a: ScoreMap, b: ScoreMap, contrast_id: Optional[str] = None) -> ContrastMap:
    """
    a − b，逐体素

    Raises:
        AnalysisError: 体素数不一致
    """
    if a.n_voxels != b.n_voxels:
        raise AnalysisError(f"体素数不一致: {a.n_voxels} vs {b.n_voxels}")
    if contrast_id is None:
        contrast_id = contrast_name(a.representation_id, b.representation_id)
    flagged = a.flagged | b.flagged
    values = np.where(flagged, 0.0, np.nan_to_num(a.scores) - np.nan_to_num(b.scores))
    return ContrastMap(values=values, flagged=flagged, contrast_id=contrast_id)


def _activity(score_maps: Sequence[ScoreMap], n_voxels: int) -> np.ndarray:
    """每个体素在所有表示上的最高未标记得分（全部标记时为 -inf）"""
    if not score_maps:
        raise AnalysisError("至少需要一个得分图来判定活跃体素")
    for s in score_maps:
        if s.n_voxels != n_voxels:
            raise AnalysisError(f"体素数不一致: {s.n_voxels} vs {n_voxels}")
    stacked = np.vstack([np.where(s.flagged, -np.inf, s.scores) for s in score_maps])
    return stacked.max(axis=0)


def parcellate(c1: ContrastMap, c2: ContrastMap, c3: ContrastMap,
               activity: Sequence[ScoreMap], threshold: float = 0.1) -> ProfileMap:
    """
    符号分区

    体素活跃当且仅当其在 activity 中的最高得分 > threshold。
    活跃体素中任一对比被标记的也记为 INACTIVE（无法判定符号）。

    Args:
        c1, c2, c3: 依次对应 bit0, bit1, bit2 的对比
        activity: 参与活跃判定的得分图
        threshold: 活跃阈值

    Returns:
        ProfileMap

    Raises:
        AnalysisError: 体素数不一致
    """
    n_voxels = c1.n_voxels
    if c2.n_voxels != n_voxels or c3.n_voxels != n_voxels:
        raise AnalysisError(
            f"对比图体素数不一致: {c1.n_voxels}, {c2.n_voxels}, {c3.n_voxels}"
        )
    active = _activity(activity, n_voxels) > threshold
    decidable = ~(c1.flagged | c2.flagged | c3.flagged)

    codes = (c1.positive().astype(np.int64)
             | (c2.positive().astype(np.int64) << 1)
             | (c3.positive().astype(np.int64) << 2))
    codes = np.where(active & decidable, codes, INACTIVE)

    undecided = int(np.sum(active & ~decidable))
    if undecided:
        logger.warning("%d 个活跃体素的对比被标记, 记为 INACTIVE", undecided)

    return ProfileMap(
        codes=codes,
        activity_threshold=threshold,
        contrast_ids=[c1.contrast_id, c2.contrast_id, c3.contrast_id],
    )


def profile_summary(p: ProfileMap) -> List[ProfileRow]:
    """按体素数降序（并列按编码升序）汇总各编码"""
    n_active = p.n_active
    if n_active == 0:
        return []
    codes, counts = np.unique(p.codes[p.active], return_counts=True)
    order = sorted(zip(codes.tolist(), counts.tolist()), key=lambda cc: (-cc[1], cc[0]))
    return [
        ProfileRow(code=int(code), voxel_count=int(count),
                   fraction=count / n_active, label=profile_label(int(code)))
        for code, count in order
    ]


def best_representation(score_maps: Mapping[str, ScoreMap],
                        threshold: float = 0.1) -> BestRepresentation:
    """
    逐体素选出得分最高的表示

    并列时取 score_maps 中靠前的表示；最高得分不超过阈值的体素为 -1。
    """
    labels = list(score_maps)
    if not labels:
        raise AnalysisError("至少需要一个得分图")
    maps = [score_maps[k] for k in labels]
    n_voxels = maps[0].n_voxels
    best = _activity(maps, n_voxels)
    stacked = np.vstack([np.where(s.flagged, -np.inf, s.scores) for s in maps])
    index = np.argmax(stacked, axis=0)
    index = np.where(best > threshold, index, -1)
    return BestRepresentation(index=index, labels=labels, threshold=threshold)


def standard_contrasts(score_maps: Mapping[str, ScoreMap],
                       pairs: Sequence[Tuple[str, str]]) -> List[ContrastMap]:
    """
    按 (a, b) 标签对计算对比

    Raises:
        AnalysisError: 缺少某个表示的得分图
    """
    missing = sorted({label for pair in pairs for label in pair} - set(score_maps))
    if missing:
        raise AnalysisError(f"缺少得分图: {', '.join(missing)}")
    return [
        contrast(score_maps[a], score_maps[b], contrast_id=contrast_name(a, b))
        for a, b in pairs
    ]

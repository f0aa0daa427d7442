#!/usr/bin/env python3
"""
体素编码模型 - 核岭回归

线性核的对偶岭回归：K = X Xᵀ，A = (K + αI)⁻¹ Y，预测 = K_test A。
特征数远大于样本数时，代价只与样本数有关。

评估协议：
    - 留一会话外层划分（前 outer_splits 个会话依次作为测试会话）
    - 训练会话内 5 折交叉验证，在 20 个 α 中选择使掩码内
      m_cv > 0.1 的体素数最多者（并列时取平均 m_cv 最高者，再取最大 α）
    - 用选出的 α 在全部训练会话上拟合，对测试会话的每个体素计算 m_cv
    - 最终得分为各划分得分的体素级平均
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold, LeaveOneGroupOut
from sklearn.preprocessing import StandardScaler

from compression.base import DesignMatrix, SplitTransform

from .tensor_store import VoxelSeries

# joblib 是可选的
try:
    from joblib import Parallel, delayed
    JOBLIB_AVAILABLE = True
except ImportError:
    JOBLIB_AVAILABLE = False

logger = logging.getLogger(__name__)

# m_cv 分母低于该值的体素标记为零方差
ZERO_VARIANCE_EPS = 1e-12


class EncoderError(ValueError):
    """编码模型输入不满足约定"""


class FactorizationError(RuntimeError):
    """K + αI 的 Cholesky 分解失败（核矩阵秩亏且 α 过小）"""

    def __init__(self, pivot: int, alpha: float):
        self.pivot = pivot
        self.alpha = alpha
        super().__init__(
            f"Cholesky 分解失败: 第 {pivot} 个主元非正 (alpha={alpha:g})"
        )


def default_alpha_grid(alpha_min: float = 1e-3, alpha_max: float = 1e5,
                       n_alphas: int = 20) -> np.ndarray:
    """对数均匀的 α 网格"""
    return np.logspace(np.log10(alpha_min), np.log10(alpha_max), n_alphas)


@dataclass
class RidgeConfig:
    """岭回归与交叉验证参数"""
    alpha_grid: np.ndarray = field(default_factory=default_alpha_grid)
    inner_folds: int = 5
    outer_splits: int = 5
    selection_threshold: float = 0.1
    selection_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.alpha_grid = np.asarray(self.alpha_grid, dtype=np.float64).ravel()
        if self.alpha_grid.size == 0 or np.any(self.alpha_grid <= 0):
            raise EncoderError("alpha_grid 必须非空且全部为正")
        if np.any(np.diff(self.alpha_grid) <= 0):
            raise EncoderError("alpha_grid 必须严格升序")
        if self.inner_folds < 2:
            raise EncoderError(f"inner_folds 至少为 2: {self.inner_folds}")
        if self.outer_splits < 1:
            raise EncoderError(f"outer_splits 至少为 1: {self.outer_splits}")
        if self.selection_mask is not None:
            self.selection_mask = np.asarray(self.selection_mask).astype(bool)

    def to_dict(self) -> Dict:
        return {
            "alpha_grid": [float(a) for a in self.alpha_grid],
            "n_alphas": int(self.alpha_grid.size),
            "inner_folds": self.inner_folds,
            "outer_splits": self.outer_splits,
            "selection_threshold": self.selection_threshold,
            "mask_size": None if self.selection_mask is None else int(self.selection_mask.sum()),
        }


@dataclass
class DualSolution:
    """对偶解：dual_weights [T_train, V]"""
    dual_weights: np.ndarray
    alpha: float

    @property
    def n_train(self) -> int:
        return self.dual_weights.shape[0]


@dataclass
class SplitResult:
    """一个外层划分的结果"""
    held_session: int
    alpha: float
    counts_per_alpha: List[int]
    n_above_threshold: int
    n_above_threshold_masked: int
    n_train: int
    n_test: int
    seconds: float
    scores: np.ndarray = field(repr=False)
    flagged: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict:
        return {
            "held_session": self.held_session,
            "alpha": self.alpha,
            "counts_per_alpha": list(self.counts_per_alpha),
            "n_above_threshold": self.n_above_threshold,
            "n_above_threshold_masked": self.n_above_threshold_masked,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "seconds": round(self.seconds, 4),
        }


@dataclass
class ScoreMap:
    """
    每个体素的 m_cv（外层划分平均）

    零方差体素的分数为 NaN，并在 flagged 中显式标记。
    """
    scores: np.ndarray
    flagged: np.ndarray
    representation_id: str = ""
    n_splits_used: int = 0
    splits: List[SplitResult] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.flagged = np.asarray(self.flagged, dtype=bool).ravel()
        if self.scores.shape != self.flagged.shape:
            raise EncoderError("scores 与 flagged 长度不一致")
        self.scores = np.where(self.flagged, np.nan, self.scores)
        if np.any(np.isnan(self.scores) & ~self.flagged):
            raise EncoderError("未标记的体素出现 NaN 分数")

    @classmethod
    def from_array(cls, scores: np.ndarray, representation_id: str = "") -> "ScoreMap":
        """从 NaN 表示标记的分数向量恢复（DVFT 读回时使用）"""
        scores = np.asarray(scores, dtype=np.float64).ravel()
        return cls(scores=scores, flagged=np.isnan(scores), representation_id=representation_id)

    @property
    def n_voxels(self) -> int:
        return self.scores.size

    def count_above(self, threshold: float) -> int:
        return int(np.sum(~self.flagged & (np.nan_to_num(self.scores, nan=-np.inf) > threshold)))


def _rows(x) -> np.ndarray:
    if isinstance(x, (DesignMatrix, VoxelSeries)):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def gram(x, y_rows) -> np.ndarray:
    """
    线性核矩阵 K[i, j] = <x_i, y_j>

    Raises:
        EncoderError: 特征数不一致
    """
    a, b = _rows(x), _rows(y_rows)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise EncoderError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b.T


def krr_fit(k_train: np.ndarray, y_train, alpha: float) -> DualSolution:
    """
    求解 (K + αI) A = Y

    一次 Cholesky 分解同时求解所有体素。

    Args:
        k_train: 训练核矩阵 [T, T]，对称
        y_train: 训练响应 [T, V]（或 [T]）
        alpha: 正则强度 (> 0)

    Returns:
        DualSolution

    Raises:
        EncoderError: 输入形状或 alpha 不合法
        FactorizationError: 分解失败，附带出错主元
    """
    k = np.asarray(k_train, dtype=np.float64)
    y = _rows(y_train)
    if not alpha > 0:
        raise EncoderError(f"alpha 必须为正: {alpha}")
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise EncoderError(f"核矩阵必须是方阵: {k.shape}")
    scale = max(float(np.max(np.abs(k))), 1.0) if k.size else 1.0
    if not np.allclose(k, k.T, rtol=1e-10, atol=1e-12 * scale):
        raise EncoderError("核矩阵不对称")
    if y.shape[0] != k.shape[0]:
        raise EncoderError(f"dimension mismatch: K {k.shape}, Y {y.shape}")

    ravel = y.ndim == 1
    if ravel:
        y = y[:, None]

    a = k.copy()
    a[np.diag_indices_from(a)] += alpha
    factor, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=1)
    if info > 0:
        raise FactorizationError(pivot=int(info), alpha=float(alpha))
    if info < 0:
        raise EncoderError(f"dpotrf 参数错误 (info={info})")

    weights = linalg.cho_solve((factor, True), y, check_finite=False)
    if ravel:
        weights = weights.ravel()
    return DualSolution(dual_weights=weights, alpha=float(alpha))


def krr_predict(k_test_train: np.ndarray, sol: DualSolution) -> np.ndarray:
    """预测 = K_test_train · dual_weights"""
    k = np.asarray(k_test_train, dtype=np.float64)
    if k.ndim != 2 or k.shape[1] != sol.n_train:
        raise EncoderError(
            f"dimension mismatch: K_test_train {k.shape}, 训练样本 {sol.n_train}"
        )
    return k @ sol.dual_weights


def m_cv(y_pred, y_real) -> Optional[float]:
    """
    交叉验证决定系数

        m_cv = 1 − Σ(y_pred − y_real)² / Σ(y_real − mean(y_real))²

    Returns:
        float，或 None 表示 y_real 方差为零（零方差标记）

    Raises:
        EncoderError: 长度不一致或样本数少于 2
    """
    pred = np.asarray(y_pred, dtype=np.float64).ravel()
    real = np.asarray(y_real, dtype=np.float64).ravel()
    if pred.shape != real.shape:
        raise EncoderError(f"长度不一致: {pred.size} vs {real.size}")
    scores, flagged = m_cv_voxels(pred[:, None], real[:, None])
    return None if flagged[0] else float(scores[0])


def m_cv_voxels(y_pred: np.ndarray, y_real: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    按列计算 m_cv（sklearn r2_score, multioutput="raw_values"）

    Returns:
        (scores, flagged)：flagged 体素的 score 为 NaN
    """
    pred = np.asarray(y_pred, dtype=np.float64)
    real = np.asarray(y_real, dtype=np.float64)
    if pred.shape != real.shape or real.ndim != 2:
        raise EncoderError(f"形状不一致: {pred.shape} vs {real.shape}")
    if real.shape[0] < 2:
        raise EncoderError(f"至少需要 2 个样本: {real.shape[0]}")

    flagged = np.sum((real - real.mean(axis=0)) ** 2, axis=0) < ZERO_VARIANCE_EPS
    scores = np.asarray(r2_score(real, pred, multioutput="raw_values"), dtype=np.float64)
    scores[flagged] = np.nan
    return scores, flagged


def session_groups(session_lengths: Sequence[int]) -> np.ndarray:
    """每一行所属的会话编号"""
    return np.repeat(np.arange(len(session_lengths)), list(session_lengths))


def inner_fold_blocks(session_lengths: Sequence[int], n_folds: int) -> List[np.ndarray]:
    """
    内层交叉验证的留出行

    会话数不少于折数时，KFold 把会话按顺序分成 n_folds 组（每折为连续的整会话），
    否则把行切成 n_folds 个连续块。
    """
    n_rows = int(sum(session_lengths))
    if n_folds > n_rows:
        raise EncoderError(f"样本数 {n_rows} 少于内层折数 {n_folds}")

    splitter = KFold(n_splits=n_folds, shuffle=False)
    n_sessions = len(session_lengths)
    if n_sessions >= n_folds:
        groups = session_groups(session_lengths)
        return [
            np.flatnonzero(np.isin(groups, held))
            for _, held in splitter.split(np.arange(n_sessions))
        ]
    return [held for _, held in splitter.split(np.arange(n_rows))]


def inner_cv_scores(x_train, y_train, cfg: RidgeConfig,
                    session_lengths: Optional[Sequence[int]] = None
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """
    内层交叉验证

    对网格中每个 α，在各折的补集上拟合、在留出折上给掩码内体素打分，
    按体素对折求平均。零方差体素不参与；某体素在部分折上零方差时，
    只对其余折求平均。

    Returns:
        (counts, mean_scores)：每个 α 平均 m_cv 超过阈值的体素数，
        以及掩码内体素平均 m_cv 的均值
    """
    x = _rows(x_train)
    y = _rows(y_train)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise EncoderError(f"样本数不一致: X {x.shape[0]}, Y {y.shape[0]}")

    mask = cfg.selection_mask
    if mask is None:
        mask = np.ones(y.shape[1], dtype=bool)
    if mask.shape != (y.shape[1],):
        raise EncoderError(f"掩码长度 {mask.shape} 与体素数 {y.shape[1]} 不符")
    if not mask.any():
        raise EncoderError("empty selection mask")
    y = y[:, mask]

    if session_lengths is None:
        session_lengths = [x.shape[0]]
    folds = inner_fold_blocks(session_lengths, cfg.inner_folds)

    kernel = gram(x, x)
    n_alphas = cfg.alpha_grid.size
    sums = np.zeros((n_alphas, y.shape[1]))
    valid = np.zeros((n_alphas, y.shape[1]), dtype=int)
    rows = np.arange(x.shape[0])

    for held in folds:
        train = np.setdiff1d(rows, held, assume_unique=True)
        k_tr = kernel[np.ix_(train, train)]
        k_te = kernel[np.ix_(held, train)]
        for i, alpha in enumerate(cfg.alpha_grid):
            sol = krr_fit(k_tr, y[train], alpha)
            scores, flagged = m_cv_voxels(krr_predict(k_te, sol), y[held])
            sums[i] += np.where(flagged, 0.0, scores)
            valid[i] += ~flagged

    scored = valid > 0
    means = sums / np.maximum(valid, 1)
    counts = (scored & (means > cfg.selection_threshold)).sum(axis=1)
    n_scored = scored.sum(axis=1)
    mean_scores = np.where(n_scored > 0,
                           np.where(scored, means, 0.0).sum(axis=1) / np.maximum(n_scored, 1),
                           -np.inf)
    return counts, mean_scores


def score_alpha_grid(x_train, y_train, cfg: RidgeConfig,
                     session_lengths: Optional[Sequence[int]] = None) -> np.ndarray:
    """每个 α 下掩码内平均 m_cv 超过阈值的体素数"""
    return inner_cv_scores(x_train, y_train, cfg, session_lengths)[0]


def choose_alpha(alpha_grid: np.ndarray, counts: np.ndarray,
                 mean_scores: Optional[np.ndarray] = None) -> float:
    """
    计数最多的 α

    计数并列且大于 0 时，若给出 mean_scores，先取平均 m_cv 最高者；
    仍并列（或计数全为 0）时取最大 α。
    """
    counts = np.asarray(counts)
    best = np.flatnonzero(counts == counts.max())
    if mean_scores is not None and counts.max() > 0 and best.size > 1:
        tied = np.asarray(mean_scores)[best]
        best = best[tied == tied.max()]
    return float(np.asarray(alpha_grid)[best[-1]])


def select_alpha(x_train, y_train, cfg: RidgeConfig,
                 session_lengths: Optional[Sequence[int]] = None) -> float:
    """
    内层交叉验证选择 α

    Raises:
        EncoderError: 掩码为空
    """
    counts, mean_scores = inner_cv_scores(x_train, y_train, cfg, session_lengths)
    return choose_alpha(cfg.alpha_grid, counts, mean_scores)


def standardize(train: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """StandardScaler 只在训练行上拟合；零标准差列保持尺度 1"""
    scaler = StandardScaler().fit(train)
    return scaler.transform(train), scaler.transform(test)


def _run_splits(task: Callable[[int], SplitResult], held_sessions: List[int],
                n_jobs: int) -> List[SplitResult]:
    if n_jobs > 1 and JOBLIB_AVAILABLE and len(held_sessions) > 1:
        return Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(task)(s) for s in held_sessions
        )
    return [task(s) for s in held_sessions]


def evaluate(x: DesignMatrix, y: VoxelSeries, cfg: RidgeConfig,
             split_transform: Optional[SplitTransform] = None,
             n_jobs: int = 1) -> ScoreMap:
    """
    留一会话评估

    Args:
        x: 设计矩阵
        y: 体素响应（掩码用于 α 选择，cfg.selection_mask 优先）
        cfg: 岭回归参数
        split_transform: 需在每个划分训练行上拟合的特征变换（PCA）
        n_jobs: 并行划分数（需要 joblib）

    Returns:
        ScoreMap: 各划分平均的 m_cv，splits 中保存每个划分的明细

    Raises:
        EncoderError: 会话数不足或形状不一致
    """
    if x.data.shape[0] != y.data.shape[0]:
        raise EncoderError(f"样本数不一致: X {x.data.shape[0]}, Y {y.data.shape[0]}")
    if list(x.session_lengths) != list(y.session_lengths):
        raise EncoderError("设计矩阵与响应的会话边界不一致")
    n_sessions = len(y.session_lengths)
    if n_sessions < 2:
        raise EncoderError(f"至少需要 2 个会话: {n_sessions}")
    if cfg.outer_splits > n_sessions:
        raise EncoderError(
            f"fewer sessions than outer_splits: {n_sessions} < {cfg.outer_splits}"
        )

    mask = cfg.selection_mask if cfg.selection_mask is not None else y.mask
    split_cfg = replace(cfg, selection_mask=mask)
    groups = session_groups(y.session_lengths)
    # LeaveOneGroupOut 按会话编号升序产出划分
    outer = list(LeaveOneGroupOut().split(groups, groups=groups))[:cfg.outer_splits]
    x_all = _rows(x)
    y_all = _rows(y)

    def run_split(held: int) -> SplitResult:
        started = time.perf_counter()
        train, test = outer[held]
        train_lengths = [n for i, n in enumerate(y.session_lengths) if i != held]

        x_tr, x_te = x_all[train], x_all[test]
        if split_transform is not None:
            fitted = split_transform.fit(x_tr)
            x_tr, x_te = fitted.transform(x_tr), fitted.transform(x_te)
        x_tr, x_te = standardize(x_tr, x_te)
        y_tr, y_te = standardize(y_all[train], y_all[test])

        counts, mean_scores = inner_cv_scores(x_tr, y_tr, split_cfg, train_lengths)
        alpha = choose_alpha(split_cfg.alpha_grid, counts, mean_scores)

        sol = krr_fit(gram(x_tr, x_tr), y_tr, alpha)
        scores, flagged = m_cv_voxels(krr_predict(gram(x_te, x_tr), sol), y_te)
        above = ~flagged & (np.nan_to_num(scores, nan=-np.inf) > cfg.selection_threshold)

        result = SplitResult(
            held_session=held,
            alpha=alpha,
            counts_per_alpha=[int(c) for c in counts],
            n_above_threshold=int(above.sum()),
            n_above_threshold_masked=int((above & mask).sum()),
            n_train=int(train.size),
            n_test=int(test.size),
            seconds=time.perf_counter() - started,
            scores=scores,
            flagged=flagged,
        )
        logger.info("%s: 会话 %d 留出, alpha=%g, %d 个体素 m_cv > %g",
                    x.representation_id, held, alpha, result.n_above_threshold,
                    cfg.selection_threshold)
        return result

    splits = _run_splits(run_split, list(range(cfg.outer_splits)), n_jobs)

    # 固定顺序归约；跳过各体素零方差的划分
    stacked = np.vstack([np.where(s.flagged, 0.0, s.scores) for s in splits])
    valid = np.vstack([~s.flagged for s in splits])
    n_valid = valid.sum(axis=0)
    flagged = n_valid == 0
    mean = stacked.sum(axis=0) / np.maximum(n_valid, 1)

    return ScoreMap(
        scores=mean,
        flagged=flagged,
        representation_id=x.representation_id,
        n_splits_used=len(splits),
        splits=splits,
    )

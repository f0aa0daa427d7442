#!/usr/bin/env python3
"""
对比图与符号分区测试
"""

import itertools
import os
import sys

import numpy as np
import pytest

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.analysis import (
    INACTIVE, PARCELLATION_CONTRASTS, AnalysisError, ContrastMap, ProfileMap,
    best_representation, contrast, contrast_name, parcellate, profile_label,
    profile_summary, standard_contrasts,
)
from core.encoder import ScoreMap


def _score(values, label=""):
    values = np.asarray(values, dtype=np.float64)
    return ScoreMap.from_array(values, representation_id=label)


def _contrast(values, cid="c"):
    values = np.asarray(values, dtype=np.float64)
    return ContrastMap(values=values, flagged=np.zeros(values.size, dtype=bool), contrast_id=cid)


class TestContrast:
    """contrast 测试"""

    def test_self_contrast_is_zero(self):
        a = _score([0.3, -0.2, 0.9])
        assert contrast(a, a).values.tolist() == [0.0, 0.0, 0.0]

    def test_hand_arithmetic(self):
        c = contrast(_score([0.5, 0.2]), _score([0.1, 0.4]))
        np.testing.assert_allclose(c.values, [0.4, -0.2], atol=1e-15)

    def test_flag_propagation(self):
        c = contrast(_score([0.5, 0.2]), _score([0.1, np.nan]))
        assert c.flagged.tolist() == [False, True]
        assert np.isnan(c.values[1])
        assert not c.positive()[1]

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        a = _score(rng.uniform(-1, 1, 50), "L4.flow")
        b = _score(rng.uniform(-1, 1, 50), "L2.flow")
        np.testing.assert_array_equal(contrast(a, b).values, -contrast(b, a).values)

    def test_contrast_id(self):
        c = contrast(_score([0.1], "L4.flow"), _score([0.0], "L2.flow"))
        assert c.contrast_id == "L4.flow-minus-L2.flow"
        assert contrast_name("L1.flow", "L4.rgb") == "L1.flow-minus-L4.rgb"

    def test_length_mismatch(self):
        with pytest.raises(AnalysisError):
            contrast(_score([0.1, 0.2]), _score([0.1]))

    def test_standard_contrasts_missing_map(self):
        maps = {"L2.flow": _score([0.1]), "L4.flow": _score([0.2])}
        with pytest.raises(AnalysisError, match="L2.rgb"):
            standard_contrasts(maps, PARCELLATION_CONTRASTS)


class TestParcellate:
    """parcellate 测试"""

    def test_foveal_code(self):
        """(+, +, −) → 0b011 = 3"""
        p = parcellate(_contrast([0.2]), _contrast([0.1]), _contrast([-0.3]),
                       activity=[_score([0.5])])
        assert p.codes.tolist() == [3]
        assert profile_label(3) == "foveal early visual"

    def test_all_zero_scores_inactive(self):
        zeros = _score(np.zeros(4))
        c = contrast(zeros, zeros)
        p = parcellate(c, c, c, activity=[zeros, zeros])
        assert p.codes.tolist() == [INACTIVE] * 4
        assert p.n_active == 0

    def test_exact_zero_is_non_positive(self):
        p = parcellate(_contrast([0.0]), _contrast([0.0]), _contrast([1.0]),
                       activity=[_score([0.5])])
        assert p.codes.tolist() == [4]

    def test_threshold_is_strict(self):
        p = parcellate(_contrast([1.0, 1.0]), _contrast([1.0, 1.0]), _contrast([1.0, 1.0]),
                       activity=[_score([0.1, 0.1000001])])
        assert p.codes.tolist() == [INACTIVE, 7]

    def test_sign_enumeration_oracle(self):
        """所有 8 种符号组合与逐位枚举一致"""
        signs = list(itertools.product([1.0, -1.0], repeat=3))
        rng = np.random.default_rng(1)
        mags = rng.uniform(0.01, 1.0, size=(len(signs), 3))
        values = np.array(signs) * mags
        p = parcellate(_contrast(values[:, 0]), _contrast(values[:, 1]), _contrast(values[:, 2]),
                       activity=[_score(np.full(len(signs), 0.8))])
        expected = [sum(1 << bit for bit in range(3) if s[bit] > 0) for s in signs]
        assert p.codes.tolist() == expected

    def test_shift_preserving_signs(self):
        """不改变符号的正向平移不改变编码"""
        base = [np.array([0.2, -0.5]), np.array([0.3, -0.4]), np.array([-0.1, 0.6])]
        activity = [_score([0.9, 0.9])]
        p0 = parcellate(*[_contrast(v) for v in base], activity=activity)
        shifted = [v + np.where(v > 0, 0.05, 0.0) for v in base]
        p1 = parcellate(*[_contrast(v) for v in shifted], activity=activity)
        assert p0.codes.tolist() == p1.codes.tolist()

    def test_flagged_contrast_inactive(self):
        c1 = ContrastMap(values=[0.2, 0.2], flagged=[False, True])
        p = parcellate(c1, _contrast([0.1, 0.1]), _contrast([0.1, 0.1]),
                       activity=[_score([0.5, 0.5])])
        assert p.codes.tolist() == [7, INACTIVE]

    def test_activity_over_all_maps(self):
        """任一表示超过阈值即活跃"""
        p = parcellate(_contrast([1.0]), _contrast([1.0]), _contrast([-1.0]),
                       activity=[_score([0.0]), _score([np.nan]), _score([0.3])])
        assert p.codes.tolist() == [3]

    def test_inconsistent_voxel_count(self):
        with pytest.raises(AnalysisError):
            parcellate(_contrast([1.0]), _contrast([1.0, 2.0]), _contrast([1.0]),
                       activity=[_score([0.5])])
        with pytest.raises(AnalysisError):
            parcellate(_contrast([1.0]), _contrast([1.0]), _contrast([1.0]),
                       activity=[_score([0.5, 0.5])])

    def test_invalid_code_rejected(self):
        with pytest.raises(AnalysisError):
            ProfileMap(codes=[8])


class TestProfileSummary:
    """profile_summary 测试"""

    def test_all_inactive_is_empty(self):
        assert profile_summary(ProfileMap(codes=[INACTIVE, INACTIVE])) == []

    def test_counting(self):
        rows = profile_summary(ProfileMap(codes=[3, 3, 6]))
        assert [(r.code, r.voxel_count) for r in rows] == [(3, 2), (6, 1)]
        assert rows[0].fraction == pytest.approx(2 / 3)
        assert rows[1].fraction == pytest.approx(1 / 3)
        assert rows[1].label == "minor"
        assert rows[0].to_dict()["bits"] == "011"

    def test_partition_and_order(self):
        rng = np.random.default_rng(2)
        codes = rng.integers(-1, 8, size=500)
        p = ProfileMap(codes=codes)
        rows = profile_summary(p)
        assert sum(r.voxel_count for r in rows) == p.n_active
        keys = [(-r.voxel_count, r.code) for r in rows]
        assert keys == sorted(keys)

    def test_ties_by_code(self):
        rows = profile_summary(ProfileMap(codes=[7, 0, 7, 0]))
        assert [r.code for r in rows] == [0, 7]


class TestBestRepresentation:
    """best_representation 测试"""

    def test_argmax_and_threshold(self):
        maps = {
            "L1.flow": _score([0.5, 0.05, np.nan]),
            "L4.rgb": _score([0.2, 0.08, 0.3]),
        }
        best = best_representation(maps, threshold=0.1)
        assert best.index.tolist() == [0, -1, 1]
        assert best.label_of(2) == "L4.rgb"
        assert best.label_of(1) is None
        assert best.counts() == {"L1.flow": 1, "L4.rgb": 1}

    def test_tie_goes_to_first(self):
        maps = {"a": _score([0.4]), "b": _score([0.4])}
        assert best_representation(maps).index.tolist() == [0]

    def test_empty(self):
        with pytest.raises(AnalysisError):
            best_representation({})


if __name__ == '__main__':
    pytest.main([__file__, '-v'])

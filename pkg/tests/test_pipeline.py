#!/usr/bin/env python3
"""
配置、流水线阶段和命令行测试
"""

import json
import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from compression import get_compressor
from core.analysis import AnalysisError
from core.cli import EXIT_ERROR, EXIT_INVALID_OUTPUT, EXIT_OK, build_parser, main
from core.config import ConfigError, PipelineConfig, deep_merge, load_config
from core.pipeline import EncodingPipeline, benchmark_ratio
from core.tensor_store import Layer, read_tensor

LAYERS = [
    {"stream": "flow", "layer": "L1", "channels": 4, "height": 4, "width": 4},
    {"stream": "flow", "layer": "L2", "channels": 4, "height": 4, "width": 4},
    {"stream": "flow", "layer": "L4", "channels": 4, "height": 4, "width": 4},
    {"stream": "rgb", "layer": "L2", "channels": 4, "height": 4, "width": 4},
    {"stream": "rgb", "layer": "L4", "channels": 4, "height": 4, "width": 4},
]


def _write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


@pytest.fixture
def small_config(tmp_path):
    """6 个会话 × 40 个样本的小数据集配置"""
    return _write_config(tmp_path, {
        "seed": 5,
        "synth": {"sessions": 6, "samples_per_session": 40, "voxels": 30, "snr": 4.0,
                  "layers": LAYERS},
        "ridge": {"outer_splits": 2},
    })


@pytest.fixture
def dataset(tmp_path, small_config):
    out = tmp_path / "data"
    assert main(["synth", "-c", small_config, "-o", str(out)]) == EXIT_OK
    return str(out / "manifest.json")


class TestConfig:
    """配置加载与校验测试"""

    def test_defaults(self):
        config = load_config()
        assert config.output_dir == "vve_out"
        assert config.compression.scheme == "apic"
        assert config.ridge.alpha_grid().size == 20
        assert config.ridge.alpha_grid()[0] == pytest.approx(1e-3)
        assert config.benchmark.schemes == ["pca", "apic", "apbic"]

    def test_unknown_key_reports_dotted_path(self, tmp_path):
        path = _write_config(tmp_path, {"ridge": {"bogus": 1}})
        with pytest.raises(ConfigError, match=r"unknown key: ridge\.bogus"):
            load_config(path)

    def test_unknown_top_level_key(self, tmp_path):
        path = _write_config(tmp_path, {"extra": True})
        with pytest.raises(ConfigError, match="unknown key: extra"):
            load_config(path)

    def test_unknown_nested_layer_key(self, tmp_path):
        path = _write_config(tmp_path, {"compression": {"layers": {"L1": {"size": 3}}}})
        with pytest.raises(ConfigError, match=r"unknown key: compression\.layers\.L1\.size"):
            load_config(path)

    def test_seed_override(self):
        config = load_config(overrides={"seed": 99, "output_dir": None})
        assert config.seed == 99
        assert config.output_dir == "vve_out"
        assert config.synth_spec().seed == 99

    def test_invalid_values(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_write_config(tmp_path, {"compression": {"scheme": "dct"}}))
        with pytest.raises(ConfigError):
            load_config(_write_config(tmp_path, {"ridge": {"inner_folds": 1}}))
        with pytest.raises(ConfigError):
            load_config(_write_config(tmp_path, {"benchmark": {"schemes": ["apic"]}}))
        with pytest.raises(ConfigError):
            load_config(_write_config(tmp_path, {"synth": {"snr": -2}}))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_pool_spec_merge(self):
        config = load_config()
        spec = config.compression.pool_spec(Layer.L2)
        assert spec.target_grid == (3, 3)
        assert spec.channel_groups is None
        apbic = config.compression.pool_spec(Layer.L2, "apbic")
        assert apbic.target_grid == (2, 2)
        assert apbic.target_features == 16
        assert apbic.channel_groups is None

    def test_default_apbic_sizes_equal(self):
        """默认配置下 APBIC 在不同形状的层上输出相同的特征数"""
        config = load_config()
        compressor = get_compressor("apbic")
        shapes = {Layer.L1: (8, 16, 16), Layer.L2: (16, 8, 8), Layer.L4: (32, 4, 4)}
        dims = {layer: compressor.output_dim(shape, config.compression.pool_spec(layer, "apbic"))
                for layer, shape in shapes.items()}
        assert set(dims.values()) == {16}

    def test_seed_overrides_synth_seed(self, tmp_path):
        path = _write_config(tmp_path, {"synth": {"seed": 1, "sessions": 2}})
        assert load_config(path).synth_spec().seed == 1
        config = load_config(path, {"seed": 2})
        assert config.seed == 2
        assert config.synth_spec().seed == 2

    def test_deep_merge(self):
        merged = deep_merge({"a": {"b": 1, "c": 2}}, {"a": {"c": 3}})
        assert merged == {"a": {"b": 1, "c": 3}}

    def test_to_dict_round_trip(self):
        config = load_config()
        again = PipelineConfig.from_dict(config.to_dict())
        assert again.to_dict() == config.to_dict()


class TestStages:
    """流水线各阶段测试"""

    def test_apic_feature_count(self, tmp_path, small_config, dataset):
        """Σ C·h_out·w_out：L1 4×4, L2 3×3, L4 2×2"""
        config = load_config(small_config, {"manifest": dataset,
                                            "output_dir": str(tmp_path / "run")})
        result = EncodingPipeline(config).compress()
        reps = result["summary"]["representations"]
        assert reps == {"L1.flow": 64, "L2.flow": 36, "L4.flow": 16, "L2.rgb": 36, "L4.rgb": 16}
        design = read_tensor(tmp_path / "run" / "design" / "L1.flow.dvft")
        assert design.shape == (240, 64)

    def test_pca_too_many_components(self, tmp_path, small_config, dataset):
        """n_components 超过训练样本数时在计算前报配置错误"""
        doc = json.loads(open(small_config, encoding="utf-8").read())
        doc["compression"] = {"scheme": "pca", "n_components": 500}
        path = _write_config(tmp_path, doc, "pca.json")
        config = load_config(path, {"manifest": dataset, "output_dir": str(tmp_path / "pca")})
        with pytest.raises(ConfigError, match="n_components"):
            EncodingPipeline(config).compress()
        assert not (tmp_path / "pca" / "design").exists()

    def test_tr_mismatch(self, tmp_path, small_config, dataset):
        doc = json.loads(open(small_config, encoding="utf-8").read())
        doc["temporal"] = {"tr_seconds": 1.0}
        path = _write_config(tmp_path, doc, "tr.json")
        config = load_config(path, {"manifest": dataset, "output_dir": str(tmp_path / "tr")})
        with pytest.raises(ConfigError, match="tr_seconds"):
            EncodingPipeline(config).compress()

    def test_fit_score_report(self, tmp_path, small_config, dataset):
        run = tmp_path / "run"
        config = load_config(small_config, {"manifest": dataset, "output_dir": str(run)})
        pipeline = EncodingPipeline(config)
        pipeline.compress()
        pipeline.fit_score()

        report = json.loads((run / "reports" / "fit_score.json").read_text(encoding="utf-8"))
        rep = report["representations"]["L1.flow"]
        assert [s["held_session"] for s in rep["splits"]] == [0, 1]
        assert all(len(s["counts_per_alpha"]) == 20 for s in rep["splits"])
        table = pd.read_csv(run / "scores" / "L1.flow.csv")
        assert list(table.columns) == ["voxel_id", "score", "flagged"]
        assert len(table) == 30
        assert pipeline.validate_outputs() == []

    def test_missing_score_maps(self, tmp_path, small_config, dataset):
        config = load_config(small_config, {"manifest": dataset,
                                            "output_dir": str(tmp_path / "empty")})
        pipeline = EncodingPipeline(config)
        pipeline.compress()
        with pytest.raises(AnalysisError, match="fit-score"):
            pipeline.parcellate()

    def test_validate_outputs_detects_tampering(self, tmp_path, small_config, dataset):
        config = load_config(small_config, {"manifest": dataset,
                                            "output_dir": str(tmp_path / "run")})
        pipeline = EncodingPipeline(config)
        pipeline.compress()
        path = tmp_path / "run" / "design" / "L4.rgb.dvft"
        path.write_bytes(path.read_bytes()[:-4])
        problems = pipeline.validate_outputs()
        assert len(problems) == 1 and "L4.rgb" in problems[0]

    def test_validate_outputs_checks_tables_and_reports(self, tmp_path, small_config, dataset):
        """CSV 行数不符、JSON 无法解析都会被报告"""
        run = tmp_path / "run"
        config = load_config(small_config, {"manifest": dataset, "output_dir": str(run)})
        pipeline = EncodingPipeline(config)
        pipeline.compress()
        pipeline.fit_score()
        assert pipeline.validate_outputs() == []

        table = run / "scores" / "L2.flow.csv"
        lines = table.read_text(encoding="utf-8").splitlines()
        table.write_text("\n".join(lines[:-3]) + "\n", encoding="utf-8")
        report = run / "reports" / "fit_score.json"
        report.write_text(report.read_text(encoding="utf-8")[:-10], encoding="utf-8")

        problems = pipeline.validate_outputs()
        assert len(problems) == 2
        assert any("L2.flow.csv" in p and "27" in p for p in problems)
        assert any("fit_score.json" in p for p in problems)

    def test_apbic_layers_share_feature_count(self, tmp_path, small_config, dataset):
        doc = json.loads(open(small_config, encoding="utf-8").read())
        doc["compression"] = {"scheme": "apbic"}
        path = _write_config(tmp_path, doc, "apbic.json")
        config = load_config(path, {"manifest": dataset, "output_dir": str(tmp_path / "apbic")})
        reps = EncodingPipeline(config).compress()["summary"]["representations"]
        assert len(reps) == 5
        assert set(reps.values()) == {16}

    def test_apbic_unequal_layers_rejected(self, tmp_path, small_config, dataset):
        """某层覆盖使 APBIC 维数不一致时报配置错误"""
        doc = json.loads(open(small_config, encoding="utf-8").read())
        doc["compression"] = {
            "scheme": "apbic",
            "layers": {"L1": {"channel_groups": 1, "target_features": None}},
        }
        path = _write_config(tmp_path, doc, "uneven.json")
        config = load_config(path, {"manifest": dataset, "output_dir": str(tmp_path / "uneven")})
        with pytest.raises(ConfigError, match="各层输出维数必须一致"):
            EncodingPipeline(config).compress()
        assert not (tmp_path / "uneven" / "design" / "design_manifest.json").exists()

    def test_fit_score_protocol_report(self, tmp_path):
        """默认岭回归设置：每个划分 20 个 α、5 折内层、≥5 个外层划分、α 只在掩码内选择"""
        path = _write_config(tmp_path, {
            "seed": 8,
            "synth": {"sessions": 6, "samples_per_session": 40, "voxels": 30,
                      "mask_fraction": 0.5, "layers": LAYERS[:1]},
        })
        data = tmp_path / "data"
        assert main(["synth", "-c", path, "-o", str(data)]) == EXIT_OK
        run = tmp_path / "run"
        config = load_config(path, {"manifest": str(data / "manifest.json"),
                                    "output_dir": str(run)})
        pipeline = EncodingPipeline(config)
        pipeline.compress()
        pipeline.fit_score()

        report = json.loads((run / "reports" / "fit_score.json").read_text(encoding="utf-8"))
        ridge = report["ridge"]
        assert ridge["n_alphas"] == 20
        assert ridge["inner_folds"] == 5
        assert ridge["outer_splits"] >= 5
        assert ridge["mask_size"] == 15
        assert report["use_mask"] is True
        splits = report["representations"]["L1.flow"]["splits"]
        assert len(splits) >= 5
        for split in splits:
            assert len(split["counts_per_alpha"]) == 20
            assert max(split["counts_per_alpha"]) <= 15


class TestBenchmark:
    """压缩方案对比测试"""

    def test_ratio_rule(self):
        assert benchmark_ratio(6, 3) == 2.0
        assert benchmark_ratio(0, 0) == 1.0
        assert math.isinf(benchmark_ratio(3, 0))

    def test_self_comparison_ratio_one(self, tmp_path, small_config, dataset):
        doc = json.loads(open(small_config, encoding="utf-8").read())
        doc["benchmark"] = {"schemes": ["apic"], "reference": "apic"}
        path = _write_config(tmp_path, doc, "self.json")
        config = load_config(path, {"manifest": dataset, "output_dir": str(tmp_path / "b")})
        summary = EncodingPipeline(config).benchmark()["summary"]
        assert [r["ratio_vs_reference"] for r in summary["rows"]] == [1.0, 1.0]

        for name in ("benchmark.csv", "benchmark_by_representation.csv"):
            table = pd.read_csv(tmp_path / "b" / "benchmark" / name)
            assert "fit_seconds" in table.columns, name
            assert (table["fit_seconds"] >= 0).all()
        by_rep = pd.read_csv(tmp_path / "b" / "benchmark" / "benchmark_by_representation.csv")
        per_split = by_rep.groupby("split")["fit_seconds"].sum()
        table = pd.read_csv(tmp_path / "b" / "benchmark" / "benchmark.csv")
        np.testing.assert_allclose(table.sort_values("split")["fit_seconds"].to_numpy(),
                                   per_split.sort_index().to_numpy(), atol=1e-3)

    @pytest.mark.slow
    def test_channel_pooling_beats_pca(self, tmp_path):
        """原始维数 ≥ 20·T_train 的通道均值信号：每个划分上 apic 超过阈值的体素多于 pca"""
        sessions, samples = 6, 40
        layers = [dict(l, channels=16, height=16, width=16) for l in LAYERS[:3]]
        t_train = (sessions - 1) * samples
        assert min(l["channels"] * l["height"] * l["width"] for l in layers) >= 20 * t_train
        path = _write_config(tmp_path, {
            "seed": 21,
            "synth": {"sessions": sessions, "samples_per_session": samples, "voxels": 60,
                      "snr": 4.0, "layers": layers},
        })
        data = tmp_path / "data"
        assert main(["synth", "-c", path, "-o", str(data)]) == EXIT_OK
        out = tmp_path / "bench"
        code = main(["benchmark-compression", "-c", path, "-m", str(data / "manifest.json"),
                     "-o", str(out)])
        assert code == EXIT_OK

        table = pd.read_csv(out / "benchmark" / "benchmark.csv")
        assert len(table) == 6
        assert set(table["scheme"]) == {"pca", "apic", "apbic"}
        counts = {(r.scheme, r.split): r.n_voxels_above for r in table.itertuples()}
        for split in (0, 1):
            assert counts[("apic", split)] > counts[("pca", split)]
        by_rep = pd.read_csv(out / "benchmark" / "benchmark_by_representation.csv")
        assert len(by_rep) == 3 * 3 * 2


class TestCli:
    """命令行测试"""

    def test_parser_subcommands(self):
        args = build_parser().parse_args(["fit-score", "--threads", "2", "--seed", "0x10"])
        assert args.command == "fit-score"
        assert args.threads == 2
        assert args.seed == 16

    def test_bad_seed_rejected(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["synth", "--seed", "-1"])

    def test_list_schemes(self, capsys):
        assert main(["--list-schemes"]) == EXIT_OK
        assert "apic" in capsys.readouterr().out

    def test_no_command(self):
        assert main([]) == EXIT_ERROR

    def test_unknown_config_key_exit_code(self, tmp_path, capsys):
        path = _write_config(tmp_path, {"ridge": {"bogus": 1}})
        assert main(["fit-score", "-c", path]) == EXIT_ERROR
        assert "ridge.bogus" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["compress", "-o", str(tmp_path / "x")]) == EXIT_ERROR

    def test_exit_codes_distinct(self):
        assert len({EXIT_OK, EXIT_INVALID_OUTPUT, EXIT_ERROR}) == 3

    def test_cli_seed_overrides_synth_seed(self, tmp_path):
        """配置里 synth.seed=1，命令行 --seed 2 生成的数据集以 2 为种子"""
        path = _write_config(tmp_path, {
            "synth": {"seed": 1, "sessions": 2, "samples_per_session": 10, "voxels": 5,
                      "layers": LAYERS[:1]},
        })
        out = tmp_path / "data"
        assert main(["synth", "-c", path, "--seed", "2", "-o", str(out)]) == EXIT_OK
        truth = json.loads((out / "ground_truth.json").read_text(encoding="utf-8"))
        assert truth["spec"]["seed"] == 2

        plain = tmp_path / "plain"
        assert main(["synth", "-c", path, "-o", str(plain)]) == EXIT_OK
        truth = json.loads((plain / "ground_truth.json").read_text(encoding="utf-8"))
        assert truth["spec"]["seed"] == 1

    @pytest.mark.slow
    def test_chain_is_reproducible(self, tmp_path, small_config, dataset):
        """同一配置运行两次，得分图、对比图和分区文件逐字节一致"""
        outputs = []
        for name in ("run1", "run2"):
            out = str(tmp_path / name)
            for command in ("compress", "fit-score", "contrast", "parcellate"):
                assert main([command, "-c", small_config, "-m", dataset, "-o", out]) == EXIT_OK
            outputs.append(out)

        compared = 0
        for sub in ("design", "scores", "contrasts", "profiles"):
            names = sorted(os.listdir(os.path.join(outputs[0], sub)))
            assert names == sorted(os.listdir(os.path.join(outputs[1], sub)))
            for name in names:
                a = open(os.path.join(outputs[0], sub, name), "rb").read()
                b = open(os.path.join(outputs[1], sub, name), "rb").read()
                assert a == b, f"{sub}/{name}"
                compared += 1
        assert compared > 0

        summary = json.loads(open(os.path.join(outputs[0], "profiles", "profile_summary.json"),
                                  encoding="utf-8").read())
        assert sum(r["voxel_count"] for r in summary["profiles"]) == summary["n_active"]
        codes = read_tensor(os.path.join(outputs[0], "profiles", "profile.dvft"))
        assert codes.shape == (30,)
        assert set(np.unique(codes)) <= set(range(-1, 8))

    @pytest.mark.slow
    def test_run_all(self, tmp_path, small_config, dataset, capsys):
        out = tmp_path / "all"
        assert main(["run-all", "-c", small_config, "-m", dataset, "-o", str(out),
                     "--threads", "2"]) == EXIT_OK
        for rel in ("design/design_manifest.json", "reports/fit_score.json",
                    "contrasts/L4.flow-minus-L2.flow.dvft",
                    "contrasts/L2.flow-minus-L4.flow.dvft",
                    "contrasts/best_representation.csv",
                    "profiles/profile_summary.json"):
            assert (out / rel).exists(), rel
        assert "🧠" in capsys.readouterr().out


if __name__ == '__main__':
    pytest.main([__file__, '-v'])

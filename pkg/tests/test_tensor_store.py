#!/usr/bin/env python3
"""
DVFT 张量存储测试

测试二进制格式读写、头部校验和数据集清单。
"""

import json
import os
import struct
import sys

import numpy as np
import pytest

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.tensor_store import (
    ActivationEntry, DatasetManifest, Layer, LayerActivationSeries, ManifestError,
    Stream, TensorFormatError, VoxelSeries, load_manifest, read_activations,
    read_tensor, read_tensor_header, read_voxels, representation_label,
    save_manifest, session_slices, write_tensor,
)


class TestWriteTensor:
    """write_tensor 测试"""

    def test_identity_f32_is_44_bytes(self, tmp_path):
        """2×2 f32 单位阵: 28 字节头 + 16 字节负载"""
        path = tmp_path / "eye.dvft"
        write_tensor(path, np.eye(2, dtype=np.float32))

        raw = path.read_bytes()
        assert len(raw) == 44
        assert raw[:4] == b"DVFT"
        assert struct.unpack("<4f", raw[28:]) == (1.0, 0.0, 0.0, 1.0)

    def test_header_fields(self, tmp_path):
        """头部字段按小端布局"""
        path = tmp_path / "t.dvft"
        write_tensor(path, np.zeros((3, 4, 5)), dtype="f64le")
        raw = path.read_bytes()
        magic, version, dtype, ndim, header_length = struct.unpack_from("<4sHBBI", raw)
        assert (magic, version, dtype, ndim, header_length) == (b"DVFT", 1, 1, 3, 36)
        assert struct.unpack_from("<3Q", raw, 12) == (3, 4, 5)

    def test_empty_dims_rejected(self, tmp_path):
        """0 维输入"""
        with pytest.raises(TensorFormatError, match="ndim out of range"):
            write_tensor(tmp_path / "s.dvft", np.float32(1.0))

    def test_too_many_dims_rejected(self, tmp_path):
        with pytest.raises(TensorFormatError, match="ndim out of range"):
            write_tensor(tmp_path / "5d.dvft", np.zeros((1, 1, 1, 1, 1)))

    def test_zero_dimension_rejected(self, tmp_path):
        with pytest.raises(TensorFormatError, match="dimension must be >= 1"):
            write_tensor(tmp_path / "z.dvft", np.zeros((0, 3)))

    def test_unknown_dtype_rejected(self, tmp_path):
        with pytest.raises(TensorFormatError, match="unsupported dtype"):
            write_tensor(tmp_path / "d.dvft", np.zeros(3), dtype="i32le")


class TestReadTensor:
    """read_tensor 测试"""

    @pytest.fixture
    def written(self, tmp_path):
        path = tmp_path / "r.dvft"
        data = np.random.default_rng(0).standard_normal((3, 4, 5))
        write_tensor(path, data, dtype="f64le")
        return path, data

    def test_round_trip_bit_exact(self, written):
        """f64 写后读逐字节一致"""
        path, data = written
        back = read_tensor(path)
        assert back.shape == (3, 4, 5)
        assert back.tobytes() == data.astype("<f8").tobytes()

    def test_round_trip_f32(self, tmp_path):
        data = np.random.default_rng(1).standard_normal((6, 2, 3, 3)).astype(np.float32)
        write_tensor(tmp_path / "a.dvft", data)
        back = read_tensor(tmp_path / "a.dvft")
        assert back.dtype == np.dtype("<f4")
        np.testing.assert_array_equal(back, data)

    def test_random_dims_header_arithmetic(self, tmp_path):
        """文件长度 = 头长 + prod(dims) × 元素大小"""
        rng = np.random.default_rng(2)
        for i in range(20):
            ndim = int(rng.integers(1, 5))
            dims = tuple(int(d) for d in rng.integers(1, 5, size=ndim))
            path = tmp_path / f"p{i}.dvft"
            write_tensor(path, np.ones(dims), dtype="f32le")
            header = read_tensor_header(path)
            assert header.dims == dims
            assert os.path.getsize(path) == 12 + 8 * ndim + int(np.prod(dims)) * 4

    def test_bad_magic(self, written):
        path, _ = written
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="bad magic"):
            read_tensor(path)

    def test_truncated_payload(self, written):
        """负载少 1 字节"""
        path, _ = written
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(TensorFormatError, match="truncated payload"):
            read_tensor(path)

    def test_trailing_bytes(self, written):
        path, _ = written
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TensorFormatError, match="trailing bytes"):
            read_tensor(path)

    def test_unsupported_version(self, written):
        path, _ = written
        raw = bytearray(path.read_bytes())
        struct.pack_into("<H", raw, 4, 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="unsupported version"):
            read_tensor(path)

    def test_unsupported_dtype_code(self, written):
        path, _ = written
        raw = bytearray(path.read_bytes())
        raw[6] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="unsupported dtype"):
            read_tensor(path)

    def test_header_length_mismatch(self, written):
        path, _ = written
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 8, 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="header length mismatch"):
            read_tensor(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "h.dvft"
        path.write_bytes(b"DVFT\x01")
        with pytest.raises(TensorFormatError, match="truncated header"):
            read_tensor(path)


class TestDomainTypes:
    """领域数据结构测试"""

    def test_layer_order(self):
        """L1 最低, L4 最高"""
        assert Layer.L1 < Layer.L2 < Layer.L3 < Layer.L4
        assert Layer.parse("l3") is Layer.L3
        with pytest.raises(ValueError):
            Layer.parse("L5")

    def test_representation_label(self):
        assert representation_label(Stream.FLOW, Layer.L4) == "L4.flow"

    def test_activation_series_validation(self):
        acts = LayerActivationSeries(Stream.RGB, Layer.L2, np.zeros((6, 2, 3, 3)), 2.0)
        assert acts.session_frames == [6]
        assert acts.shape == (2, 3, 3)
        assert acts.label == "L2.rgb"
        with pytest.raises(ValueError):
            LayerActivationSeries(Stream.RGB, Layer.L2, np.zeros((6, 2, 3)), 2.0)
        with pytest.raises(ValueError):
            LayerActivationSeries(Stream.RGB, Layer.L2, np.zeros((6, 2, 3, 3)), 2.0, [2, 2])

    def test_voxel_series_validation(self):
        series = VoxelSeries(np.zeros((10, 4)), [4, 6])
        assert series.mask.tolist() == [True] * 4
        with pytest.raises(ValueError):
            VoxelSeries(np.zeros((10, 4)), [4, 5])
        with pytest.raises(ValueError):
            VoxelSeries(np.zeros((10, 4)), [10], mask=np.ones(3))

    def test_session_slices(self):
        assert session_slices([2, 3]) == [slice(0, 2), slice(2, 5)]


class TestManifest:
    """数据集清单测试"""

    @pytest.fixture
    def dataset(self, tmp_path):
        write_tensor(tmp_path / "l1.dvft", np.ones((8, 2, 4, 4), dtype=np.float32))
        write_tensor(tmp_path / "resp.dvft", np.arange(12.0).reshape(4, 3), dtype="f64le")
        write_tensor(tmp_path / "mask.dvft", np.array([1, 0, 1], dtype=np.float32))
        manifest = DatasetManifest(
            tr_seconds=2.0,
            session_lengths=[2, 2],
            activations=[ActivationEntry(Stream.FLOW, Layer.L1, "l1.dvft", 1.0, [4, 4])],
            responses_path="resp.dvft",
            mask_path="mask.dvft",
        )
        path = tmp_path / "manifest.json"
        save_manifest(path, manifest)
        return path

    def test_load_round_trip(self, dataset):
        manifest = load_manifest(dataset)
        assert manifest.session_lengths == [2, 2]
        entry = manifest.find("L1.flow")
        acts = read_activations(manifest, entry)
        assert acts.data.shape == (8, 2, 4, 4)
        voxels = read_voxels(manifest)
        assert voxels.mask.tolist() == [True, False, True]
        assert voxels.data[3, 2] == 11.0

    def test_missing_representation(self, dataset):
        with pytest.raises(ManifestError):
            load_manifest(dataset).find("L4.rgb")

    def test_session_count_mismatch(self, dataset):
        doc = json.loads(dataset.read_text(encoding="utf-8"))
        doc["activations"][0]["session_frames"] = [8]
        dataset.write_text(json.dumps(doc), encoding="utf-8")
        with pytest.raises(ManifestError):
            load_manifest(dataset)

    def test_wrong_format(self, dataset):
        dataset.write_text(json.dumps({"format": "other"}), encoding="utf-8")
        with pytest.raises(ManifestError):
            load_manifest(dataset)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])

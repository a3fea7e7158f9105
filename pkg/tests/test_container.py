"""Testes para aasvd.container."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from aasvd.container import (
    MAGIC,
    atomic_write_text,
    decode_container,
    encode_container,
    load_covariance,
    read_container,
    save_covariance,
    write_container,
)
from aasvd.covariance import CovarianceSet
from aasvd.errors import CorruptContainerError, DimensionMismatchError


class TestContainer:
    def test_roundtrip_is_bit_exact(self, tmp_path: Path, rng: np.random.Generator):
        tensors = {"a": rng.standard_normal((3, 4)), "b.vec": np.array([[np.pi, -0.0, 1e-300]])}
        path = write_container(tmp_path / "t.aasv", tensors)
        loaded = read_container(path)
        assert list(loaded) == ["a", "b.vec"]
        for name, value in tensors.items():
            assert loaded[name].tobytes() == value.tobytes()

    def test_vector_stored_as_row(self):
        loaded = decode_container(encode_container({"g": np.ones(3)}))
        assert loaded["g"].shape == (1, 3)

    def test_layout(self):
        data = encode_container({"x": np.array([[2.0]])})
        assert data[:4] == MAGIC
        assert struct.unpack_from("<I", data, 4)[0] == 1
        assert struct.unpack_from("<I", data, 8)[0] == 1
        assert data[12:13] == b"x"
        assert struct.unpack_from("<IId", data, 13) == (1, 1, 2.0)

    def test_empty_container(self):
        assert decode_container(encode_container({})) == {}

    def test_rejects_3d(self):
        with pytest.raises(DimensionMismatchError):
            encode_container({"x": np.zeros((2, 2, 2))})

    def test_bad_magic(self):
        with pytest.raises(CorruptContainerError, match="bad magic"):
            decode_container(b"NOPE" + struct.pack("<I", 1))

    def test_bad_version(self):
        with pytest.raises(CorruptContainerError, match="version"):
            decode_container(MAGIC + struct.pack("<I", 7))

    def test_too_short(self):
        with pytest.raises(CorruptContainerError):
            decode_container(b"AAS")

    @pytest.mark.parametrize("cut", [1, 5, 12, 20])
    def test_truncated(self, cut: int):
        data = encode_container({"w": np.ones((2, 2))})
        with pytest.raises(CorruptContainerError, match="truncated"):
            decode_container(data[:-cut])

    def test_duplicate_names(self):
        one = encode_container({"w": np.ones((1, 1))})
        with pytest.raises(CorruptContainerError, match="duplicate"):
            decode_container(one + one[8:])

    def test_missing_file_is_os_error(self, tmp_path: Path):
        with pytest.raises(OSError):
            read_container(tmp_path / "absent.aasv")


class TestAtomicWrite:
    def test_overwrites_without_leftovers(self, tmp_path: Path):
        target = tmp_path / "out" / "summary.md"
        atomic_write_text(target, "first")
        atomic_write_text(target, "second")
        assert target.read_text(encoding="utf-8") == "second"
        assert [p.name for p in target.parent.iterdir()] == ["summary.md"]


class TestCovarianceCheckpoint:
    def test_roundtrip(self, tmp_path: Path, layer_problem):
        _, X, Xp = layer_problem
        cov = CovarianceSet.from_matrices(X, Xp)
        loaded = load_covariance(save_covariance(tmp_path / "cov.aasv", cov))
        np.testing.assert_array_equal(loaded.C, cov.C)
        np.testing.assert_array_equal(loaded.S, cov.S)
        np.testing.assert_array_equal(loaded.G, cov.G)
        assert loaded.columns == 40

    def test_not_a_checkpoint(self, tmp_path: Path):
        path = write_container(tmp_path / "other.aasv", {"w": np.ones((2, 2))})
        with pytest.raises(CorruptContainerError, match="not a covariance checkpoint"):
            load_covariance(path)

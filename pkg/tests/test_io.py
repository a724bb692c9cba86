import numpy as np
import pytest

from cslicegen import io
from cslicegen.errors import CheckpointError, DataError


def test_grid_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    io.write_grid(tmp_path / "g", arr, z_spacing_mm=3.0)
    header, back = io.read_grid(tmp_path / "g")
    assert header["shape"] == [2, 3, 4] and header["z_spacing_mm"] == 3.0
    assert np.array_equal(back, arr)


def test_grid_truncated(tmp_path):
    io.write_grid(tmp_path / "g", np.zeros((4, 4)))
    data = (tmp_path / "g").read_bytes()
    (tmp_path / "g").write_bytes(data[:-3])
    with pytest.raises(DataError):
        io.read_grid(tmp_path / "g")


def test_scores_roundtrip(tmp_path):
    s = np.array([0.1, 1 / 3, -2.5])
    io.write_scores(tmp_path / "s", s)
    assert np.array_equal(io.read_scores(tmp_path / "s"), s)


def test_container_roundtrip_and_corruption(tmp_path):
    arrays = {"a": np.arange(5, dtype=np.int64), "b": np.ones((2, 2), dtype=np.float32)}
    io.write_container(tmp_path / "c", {"k": 1}, arrays)
    header, back = io.read_container(tmp_path / "c")
    assert header["k"] == 1
    assert all(np.array_equal(back[k], v) and back[k].dtype == v.dtype for k, v in arrays.items())
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        io.read_container(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        io.read_container(tmp_path / "short")


def test_tsv_inf_sentinel(tmp_path):
    io.write_tsv(tmp_path / "t.tsv", ["name", "value"], [["x", float("inf")], ["y", 0.5]])
    text = (tmp_path / "t.tsv").read_text()
    assert "x\tinf" in text
    rows = io.read_tsv(tmp_path / "t.tsv")
    assert float(rows[0]["value"]) == float("inf")

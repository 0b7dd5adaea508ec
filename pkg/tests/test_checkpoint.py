"""Checkpoint format round-trip tests."""

import numpy as np
import pytest

from camenn.checkpoint import load_arrays, save_arrays
from camenn.errors import DataParseError


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "embed.cls": rng.standard_normal(8),
        "encoder.shared.0.wq": rng.standard_normal((8, 8)),
        "head.cvr.b": np.array(0.25),
        "small32": rng.standard_normal((2, 3)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert loaded[name].shape == arrays[name].shape
        assert loaded[name].tobytes() == arrays[name].tobytes()


def test_empty_checkpoint(tmp_path):
    path = tmp_path / "empty.ckpt"
    save_arrays(path, {})
    assert load_arrays(path) == {}


def test_double_round_trip_identical_bytes(tmp_path):
    arrays = {"a": np.linspace(0, 1, 7), "b": np.ones((2, 2))}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_arrays(p1, arrays)
    save_arrays(p2, load_arrays(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_arrays(path, {"a": np.ones(10)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DataParseError):
        load_arrays(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(DataParseError):
        load_arrays(path)


def test_name_with_space_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_arrays(tmp_path / "x.ckpt", {"bad name": np.ones(1)})

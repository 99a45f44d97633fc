import numpy as np
import pandas as pd
import pytest

from minifsl.checkpoint import load_checkpoint, save_checkpoint, write_loss_curves
from minifsl.errors import FormatError
from minifsl.hct import CURVE_COLUMNS
from minifsl.mlp import MlpModel
from minifsl.numerics import RngStream
from minifsl.util import fingerprint, format_remaining


@pytest.fixture
def model():
    return MlpModel(16, 3, hidden=(8, 6), embed_dim=5, rotation_head=True, image_shape=(4, 4), rng=RngStream(2))


def test_roundtrip(tmp_path, model):
    fn = tmp_path / "m.fslm"
    save_checkpoint(model, fn, fingerprint="abc")
    loaded, header = load_checkpoint(fn)
    assert header["fingerprint"] == "abc"
    assert loaded.hidden == (8, 6)
    assert loaded.image_shape == (4, 4)
    assert loaded.has_rotation_head
    for p, q in zip(model.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(p, q)
    x = np.random.default_rng(0).uniform(size=(3, 16))
    np.testing.assert_array_equal(model.embed(x), loaded.embed(x))


def test_not_a_checkpoint(tmp_path):
    fn = tmp_path / "junk.fslm"
    fn.write_bytes(b"FSLE\x00\x00")
    with pytest.raises(FormatError):
        load_checkpoint(fn)


def test_truncated_parameters(tmp_path, model):
    fn = tmp_path / "m.fslm"
    save_checkpoint(model, fn)
    fn.write_bytes(fn.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(fn)


def test_trailing_bytes(tmp_path, model):
    fn = tmp_path / "m.fslm"
    save_checkpoint(model, fn)
    fn.write_bytes(fn.read_bytes() + b"\x00" * 8)
    with pytest.raises(FormatError):
        load_checkpoint(fn)


def test_loss_curves(tmp_path):
    curves = pd.DataFrame(
        [[0, 1.0 / 3.0, 0.0, 0.0, 0.5, float("nan")], [1, 0.25, 0.125, 0.0, 0.75, 0.6]],
        columns=CURVE_COLUMNS,
    )
    fn = tmp_path / "curves.csv"
    write_loss_curves(curves, fn)
    back = pd.read_csv(fn, float_precision="round_trip")
    assert list(back.columns) == CURVE_COLUMNS
    assert back["loss_ce"][0] == 1.0 / 3.0
    assert np.isnan(back["val_acc"][0])


def test_format_remaining():
    assert format_remaining(5) == "0:05"
    assert format_remaining(65) == "1:05"
    assert format_remaining(3661) == "1:01:01"
    assert format_remaining(90061) == "1:1:01:01"


def test_fingerprint_is_order_independent():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})

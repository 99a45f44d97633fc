"""Model checkpoints and loss-curve files.

A checkpoint is ``FSLM``, a little-endian u32 header length, a UTF-8 JSON
header (architecture, parameter shapes, config fingerprint) and then every
parameter as little-endian f64, in ``model.parameters()`` order.
"""

import json

import numpy as np

from minifsl.errors import FormatError
from minifsl.hct import CURVE_COLUMNS
from minifsl.mlp import MlpModel

MAGIC = b"FSLM"


def save_checkpoint(model, filename, fingerprint=None):
    header = {
        "input_dim": model.input_dim,
        "n_classes": model.n_classes,
        "hidden": list(model.hidden),
        "embed_dim": model.embed_dim,
        "rotation_head": model.has_rotation_head,
        "image_shape": None if model.image_shape is None else list(model.image_shape),
        "shapes": [list(p.shape) for p in model.parameters()],
        "names": model.param_names(),
        "fingerprint": fingerprint,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(filename, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([len(blob)], dtype="<u4").tobytes())
        f.write(blob)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p).astype("<f8").tobytes())


def read_header(data):
    if data[:4] != MAGIC:
        raise FormatError("Not a model checkpoint", 0)
    if len(data) < 8:
        raise FormatError("Truncated header length", len(data))
    size = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if len(data) < 8 + size:
        raise FormatError("Truncated header", len(data))
    try:
        header = json.loads(data[8 : 8 + size].decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"Unreadable header: {e}", 8)
    return header, 8 + size


def load_checkpoint(filename):
    with open(filename, "rb") as f:
        data = f.read()
    header, offset = read_header(data)
    model = MlpModel(
        header["input_dim"],
        header["n_classes"],
        hidden=header["hidden"],
        embed_dim=header["embed_dim"],
        rotation_head=header["rotation_head"],
        image_shape=header["image_shape"],
    )
    for p, shape in zip(model.parameters(), header["shapes"]):
        if list(p.shape) != list(shape):
            raise FormatError(f"Parameter shape {shape} does not match architecture", offset)
        count = int(np.prod(shape))
        if len(data) < offset + 8 * count:
            raise FormatError("Truncated parameters", len(data))
        p[...] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise FormatError("Trailing bytes after parameters", offset)
    return model, header


def write_loss_curves(curves, filename):
    curves.to_csv(filename, index=False, columns=CURVE_COLUMNS, float_format="%.17g")

# Simple-minded reader and writer for feature set files

"""FSLE binary and CSV formats for feature sets.

FSLE layout, all little-endian: magic ``FSLE``, u16 version (1), u32 n,
u32 d, u8 has_labels, then n x i32 labels when present, then n x d f64
features in row-major order.

CSV layout: header ``label,f0,...,f{d-1}`` and one row per example, floats
written with 17 significant digits.
"""

import os

import numpy as np
import pandas as pd

from minifsl.episodes import FeatureSet
from minifsl.errors import FormatError

MAGIC = b"FSLE"
VERSION = 1
HEADER = np.dtype(
    [("magic", "S4"), ("version", "<u2"), ("n", "<u4"), ("d", "<u4"), ("has_labels", "u1")]
)


def write_fsle(feature_set, filename):
    header = np.zeros(1, dtype=HEADER)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["n"] = len(feature_set)
    header["d"] = feature_set.dim
    header["has_labels"] = 1
    with open(filename, "wb") as f:
        f.write(header.tobytes())
        f.write(np.asarray(feature_set.labels).astype("<i4").tobytes())
        f.write(np.ascontiguousarray(feature_set.features).astype("<f8").tobytes())


def read_fsle(filename):
    with open(filename, "rb") as f:
        data = f.read()
    if len(data) < HEADER.itemsize:
        raise FormatError("Truncated header", len(data))
    header = np.frombuffer(data, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise FormatError(f"Bad magic {bytes(header['magic'])!r}", 0)
    if header["version"] != VERSION:
        raise FormatError(f"Unsupported version {header['version']}", 4)
    n, d = int(header["n"]), int(header["d"])
    offset = HEADER.itemsize

    if header["has_labels"]:
        end = offset + 4 * n
        if len(data) < end:
            raise FormatError(f"Truncated labels, expected {n}", len(data))
        labels = np.frombuffer(data, dtype="<i4", count=n, offset=offset).astype(np.int64)
        offset = end
    else:
        labels = np.zeros(n, dtype=np.int64)

    end = offset + 8 * n * d
    if len(data) < end:
        raise FormatError(f"Truncated features, expected {n}x{d}", len(data))
    if len(data) > end:
        raise FormatError("Trailing bytes after features", end)
    features = np.frombuffer(data, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    return FeatureSet(features.astype(np.float64), labels, source=str(filename))


def write_csv(feature_set, filename):
    cols = {"label": feature_set.labels}
    for j in range(feature_set.dim):
        cols[f"f{j}"] = feature_set.features[:, j]
    pd.DataFrame(cols).to_csv(filename, index=False, float_format="%.17g")


def read_csv(filename):
    df = pd.read_csv(filename, float_precision="round_trip")
    expected = ["label"] + [f"f{j}" for j in range(df.shape[1] - 1)]
    if list(df.columns) != expected or df.shape[1] < 2:
        raise FormatError(f"CSV header must be {','.join(expected[:3])},...", 0)
    return FeatureSet(
        df.iloc[:, 1:].to_numpy(dtype=np.float64),
        df["label"].to_numpy(dtype=np.int64),
        source=str(filename),
    )


def _is_csv(filename):
    return os.path.splitext(str(filename))[1].lower() == ".csv"


def load_feature_set(filename):
    fs = read_csv(filename) if _is_csv(filename) else read_fsle(filename)
    return fs.remapped()


def save_feature_set(feature_set, filename):
    if _is_csv(filename):
        write_csv(feature_set, filename)
    else:
        write_fsle(feature_set, filename)

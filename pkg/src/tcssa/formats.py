"""Binary feature files, parameter bundles and routing assignment exports.

Feature file layout (little-endian)::

    b"SSA1" | version u16 (=1) | N u32 | D u32 | N*D float32, row-major

A parameter bundle is a small index followed by one feature-file section per
tensor::

    b"SSAP" | version u16 | meta_len u32 | meta JSON | n_sections u32 |
    repeated: name_len u16 | name utf-8 | feature-file section
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .numerics import InvalidInputError
from .params import ModelParams

MAGIC = b"SSA1"
VERSION = 1
HEADER = struct.Struct("<4sHII")
PARAMS_MAGIC = b"SSAP"


class FeatureFormatError(ValueError):
    """Bad magic or unsupported version."""


class FeatureCorruptionError(ValueError):
    """Payload length disagrees with the header."""


def encode_features(matrix) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise InvalidInputError(f"feature matrix must be 2-D, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("refusing to write NaN/Inf features")
    narrowed = m.astype("<f4")
    if not np.all(np.isfinite(narrowed)):
        raise InvalidInputError("values overflow float32")
    return HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]) + narrowed.tobytes(order="C")


def decode_features(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one feature section at `offset`; returns (matrix, next offset)."""
    if len(buf) - offset < HEADER.size:
        raise FeatureCorruptionError(
            f"header needs {HEADER.size} bytes, only {len(buf) - offset} available"
        )
    magic, version, n, d = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}")
    start = offset + HEADER.size
    need = 4 * n * d
    have = len(buf) - start
    if have < need:
        raise FeatureCorruptionError(f"payload needs {need} bytes, found {have}")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=start)
    return data.astype(np.float64).reshape(n, d), start + need


def write_feature_file(path, matrix) -> None:
    blob = encode_features(matrix)
    Path(path).write_bytes(blob)


def read_feature_file(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m, end = decode_features(buf)
    if end != len(buf):
        raise FeatureCorruptionError(f"payload needs {end - HEADER.size} bytes, found {len(buf) - HEADER.size}")
    return m


def save_params(path, params: ModelParams) -> None:
    arrays = params.arrays()
    meta = {
        "activation": params.slot_mlp.activation,
        "residual": params.slot_mlp.residual,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(PARAMS_MAGIC + struct.pack("<HI", VERSION, len(meta_bytes)) + meta_bytes)
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(encode_features(arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)))
    Path(path).write_bytes(out.getvalue())


def load_params(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != PARAMS_MAGIC:
        raise FeatureFormatError(f"bad parameter magic {buf[:4]!r}")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported parameter version {version}")
    pos = 10
    meta = json.loads(buf[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nlen].decode()
        m, pos = decode_features(buf, pos + 2 + nlen)
        arrays[name] = m.reshape(meta["shapes"][name])
    return ModelParams.from_arrays(arrays, meta["activation"], meta["residual"])


def format_assignments(table) -> str:
    """One row per patch: index, best slot, its weight, second slot, its weight."""
    if table.top_k < 2:
        raise InvalidInputError("assignment export needs top_k >= 2")
    lines = ["patch_index,slot_1,weight_1,slot_2,weight_2"]
    for j in range(table.n_patches):
        s1, s2 = table.slots[j, :2]
        w1, w2 = table.weights[j, :2]
        lines.append(f"{j},{s1},{w1:.9g},{s2},{w2:.9g}")
    return "\n".join(lines) + "\n"


def write_assignments(path, table) -> None:
    Path(path).write_text(format_assignments(table))

"""Binary interchange formats: feature files, embedding files, and weight
checkpoints.  All payloads are 32-bit little-endian floats; writes go to a
temp file in the target directory followed by an atomic rename."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"VIFE"
EMBEDDING_MAGIC = b"VIEM"
CHECKPOINT_MAGIC = b"VIWT"
FORMAT_VERSION = 1

FEATURE_KINDS = ("Me", "Ha", "Rh", "Ly")
FEATURE_TAGS = {kind: i for i, kind in enumerate(FEATURE_KINDS)}


class FormatError(Exception):
    """Malformed or truncated binary file."""


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n, path, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated while reading {what}")
    return data


# -----------------------------------------------------------------------
# feature files: magic, version u16, kind u8, rows u32, cols u32, payload
# -----------------------------------------------------------------------


def write_feature(path, values: np.ndarray, kind: str):
    if kind not in FEATURE_TAGS:
        raise ValueError(f"unknown feature kind {kind!r}")
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("feature values must be 2-D")
    header = struct.pack(
        "<4sHBII", FEATURE_MAGIC, FORMAT_VERSION, FEATURE_TAGS[kind], *values.shape
    )
    atomic_write_bytes(path, header + values.tobytes())


def read_feature(path):
    """Returns (values float32 (rows, cols), kind)."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, struct.calcsize("<4sHBII"), path, "header")
        magic, version, tag, rows, cols = struct.unpack("<4sHBII", header)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if tag >= len(FEATURE_KINDS):
            raise FormatError(f"{path}: unknown feature tag {tag}")
        payload = _read_exact(fh, rows * cols * 4, path, "payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return values.copy(), FEATURE_KINDS[tag]


# -----------------------------------------------------------------------
# embedding files: magic, version u16, presence mask u8, dim u32, then one
# dim-float block per present feature in canonical order
# -----------------------------------------------------------------------


def write_embedding(path, parts: dict):
    """parts maps feature kind -> 1-D vector; all dims must match."""
    if not parts:
        raise ValueError("no embedding parts to write")
    dims = {len(v) for v in parts.values()}
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dims: {sorted(dims)}")
    dim = dims.pop()
    mask = 0
    blocks = []
    for kind in FEATURE_KINDS:
        if kind in parts:
            mask |= 1 << FEATURE_TAGS[kind]
            blocks.append(np.ascontiguousarray(parts[kind], dtype="<f4").tobytes())
    unknown = set(parts) - set(FEATURE_KINDS)
    if unknown:
        raise ValueError(f"unknown feature kinds: {sorted(unknown)}")
    header = struct.pack("<4sHBI", EMBEDDING_MAGIC, FORMAT_VERSION, mask, dim)
    atomic_write_bytes(path, header + b"".join(blocks))


def read_embedding(path):
    """Returns dict of feature kind -> float32 vector."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, struct.calcsize("<4sHBI"), path, "header")
        magic, version, mask, dim = struct.unpack("<4sHBI", header)
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        parts = {}
        for kind in FEATURE_KINDS:
            if mask & (1 << FEATURE_TAGS[kind]):
                block = _read_exact(fh, dim * 4, path, f"{kind} block")
                parts[kind] = np.frombuffer(block, dtype="<f4").copy()
    return parts


# -----------------------------------------------------------------------
# checkpoints: magic, version u16, tensor count u32, then per tensor a
# u16-length utf-8 name, ndim u8, u32 dims, and the float payload
# -----------------------------------------------------------------------


def write_checkpoint(path, weights: dict):
    chunks = [struct.pack("<4sHI", CHECKPOINT_MAGIC, FORMAT_VERSION, len(weights))]
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def read_checkpoint(path):
    """Returns dict of tensor name -> float64 array."""
    weights = {}
    with open(path, "rb") as fh:
        header = _read_exact(fh, struct.calcsize("<4sHI"), path, "header")
        magic, version, count = struct.unpack("<4sHI", header)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path, "name length"))
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path, "rank"))
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(fh, 4 * ndim, path, "shape")
            )
            n = int(np.prod(shape)) if ndim else 1
            data = _read_exact(fh, n * 4, path, f"tensor {name}")
            weights[name] = (
                np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
            )
    return weights

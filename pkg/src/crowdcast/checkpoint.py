"""Flat binary archive for parameters and other named float tensors.

Layout: magic ``HSTTN1``, u32 record count, then per record a u32
name length, UTF-8 name, u32 ndim, u32 dims, and the values as
little-endian float32.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HSTTN1"


class CheckpointError(ValueError):
    """Archive is malformed or disagrees with the constructed model."""


def save_archive(path, arrays):
    """Write a name -> array mapping; values are stored as float32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes())


def load_archive(path):
    """Read an archive back as an ordered name -> float64 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint archive")
    off = len(MAGIC)

    def u32():
        nonlocal off
        if off + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated archive")
        (v,) = struct.unpack_from("<I", blob, off)
        off += 4
        return v

    count = u32()
    out = {}
    for _ in range(count):
        nlen = u32()
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        raw = blob[off : off + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated data for record {name!r}")
        off += nbytes
        out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes after last record")
    return out


def verify_names_shapes(loaded, expected):
    """Check that a loaded archive matches expected name -> shape pairs."""
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names disagree (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if loaded[name].shape != tuple(shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {loaded[name].shape}, model {tuple(shape)}"
            )

"""Bit-exact binary checkpoint container.

Layout (all integers little-endian):
    magic bytes b"TS3D"
    format version  u32
    entry count     u32
    per entry:
        name length u32, UTF-8 name bytes,
        dtype tag   u8 (0 = float32, 1 = float64),
        rank        u8,
        extents     u32 per axis,
        raw little-endian element data
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TS3D"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_arrays(path, arrays: dict) -> None:
    """Write a name -> float array mapping; insertion order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAG_FOR:
                raise ValueError(f"unsupported dtype {arr.dtype} for entry '{name}'")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"'{path}' is not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if tag not in _DTYPE_TAGS:
            raise ValueError(f"unknown dtype tag {tag} for entry '{name}'")
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        dtype = _DTYPE_TAGS[tag]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * dtype.itemsize
        out[name] = arr.copy()
    return out


def save_model(path, model) -> None:
    save_arrays(path, {name: p.data for name, p in model.named_parameters()})


def load_model(path, model) -> None:
    """Load parameters by name; mismatched key sets raise with the diff listed."""
    arrays = load_arrays(path)
    model_names = [name for name, _ in model.named_parameters()]
    missing = [n for n in model_names if n not in arrays]
    extra = [n for n in arrays if n not in model_names]
    if missing or extra:
        raise ValueError(
            "checkpoint/model mismatch; "
            f"missing from checkpoint: {missing or 'none'}; "
            f"unknown in checkpoint: {extra or 'none'}"
        )
    for name, p in model.named_parameters():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for '{name}': checkpoint {arr.shape}, model {p.data.shape}"
            )
        p.tensor.data = arr.astype(p.data.dtype).copy()

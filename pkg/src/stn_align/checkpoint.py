"""Flat binary archive of named tensors plus the pipeline spec.

Byte layout (all integers little-endian, all floats IEEE 754
little-endian, tensor data in C order):

    offset 0   magic bytes  b"STNCKPT1"
    u32        tensor count N
    u32        spec blob length L
    L bytes    UTF-8 key=value lines describing the pipeline spec
    N records, each:
        u16        name length M
        M bytes    UTF-8 tensor name
        u8         dtype code (0 = float64, 1 = float32)
        u8         rank R
        R x u32    extents
        data       product(extents) * itemsize bytes

Records are written in sorted name order so equal states produce
byte-identical files.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from . import networks

MAGIC = b"STNCKPT1"
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES_BY_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def write_tensors(fh, tensors, spec_text=""):
    blob = spec_text.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", len(tensors), len(blob)))
    fh.write(blob)
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _CODES_BY_KIND.get(arr.dtype)
        if code is None:
            raise TypeError(f"tensor {name} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_tensors(fh):
    """Returns (tensors dict, spec text)."""
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    count, blob_len = struct.unpack("<II", fh.read(8))
    spec_text = fh.read(blob_len).decode("utf-8")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", fh.read(2))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        dtype = _DTYPE_CODES[code]
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
        tensors[name] = data.reshape(shape).copy()
    return tensors, spec_text


def checkpoint_bytes(state):
    buf = io.BytesIO()
    write_tensors(buf, state.params(), networks.spec_to_text(state.spec))
    return buf.getvalue()


def save_checkpoint(path, state):
    with open(path, "wb") as fh:
        write_tensors(fh, state.params(), networks.spec_to_text(state.spec))


def load_checkpoint(path):
    """Rebuild a pipeline state from a checkpoint file."""
    with open(path, "rb") as fh:
        tensors, spec_text = read_tensors(fh)
    spec = networks.spec_from_text(spec_text)
    state = networks.build_pipeline(spec, seed=0)
    state.load_params(tensors)
    return state

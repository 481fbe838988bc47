"""Image and raw-tensor file IO.

Grayscale images interchange as binary PGM (P5, maxval 255) with pixel
values mapped linearly from [0, 1]. Lossless float persistence uses a
small raw tensor format:

    magic b"STNTENS1", u8 dtype code (0 = float64, 1 = float32),
    u8 rank, rank x u32 little-endian extents, C-order little-endian data.

PNG support is optional and requires Pillow.
"""

from __future__ import annotations

import struct

import numpy as np

TENSOR_MAGIC = b"STNTENS1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def write_pgm(path, image):
    """Write a float image in [0, 1] as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM wants a 2-d grayscale image, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


def read_pgm(path):
    """Read a binary PGM into a float64 image scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # the single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / 255.0


def write_png(path, image):
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError("PNG support requires Pillow (pip install Pillow)") from exc
    data = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def read_png(path):
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("PNG support requires Pillow (pip install Pillow)") from exc
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_image(path, image):
    """Dispatch on extension: .pgm (always available) or .png (Pillow)."""
    p = str(path)
    if p.endswith(".png"):
        write_png(p, image)
    else:
        write_pgm(p, image)


def read_image(path):
    p = str(path)
    if p.endswith(".png"):
        return read_png(p)
    if p.endswith(".ten"):
        return read_tensor(p)
    return read_pgm(p)


def write_tensor(path, arr):
    """Lossless raw tensor file (see module docstring for the layout)."""
    arr = np.ascontiguousarray(arr)
    code = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(TENSOR_MAGIC))
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a raw tensor file")
        code, rank = struct.unpack("<BB", fh.read(2))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        dtype = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).copy()

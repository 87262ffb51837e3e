"""Image and depth-grid file formats.

Depth grid (``.bin``): a 16-byte little-endian header followed by row-major
data::

    bytes 0-3    magic  b"DGRD"
    bytes 4-7    uint32 height
    bytes 8-11   uint32 width
    bytes 12-15  uint32 dtype code (1 = float32)

then ``height * width`` little-endian float32 values.
"""

from __future__ import annotations

import io
import struct

import numpy as np
from PIL import Image

from .archive import atomic_write_bytes
from .errors import SceneLoadError

DEPTH_MAGIC = b"DGRD"
_HEADER = struct.Struct("<4sIII")
_DTYPES = {1: np.dtype("<f4")}


def encode_depth_grid(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("depth grid must be two-dimensional")
    h, w = depth.shape
    return _HEADER.pack(DEPTH_MAGIC, h, w, 1) + depth.tobytes(order="C")


def write_depth_grid(path, depth: np.ndarray):
    atomic_write_bytes(path, encode_depth_grid(depth))


def read_depth_grid(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise SceneLoadError(f"cannot read depth grid {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise SceneLoadError(f"{path}: truncated depth grid header")
    magic, h, w, code = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC or code not in _DTYPES:
        raise SceneLoadError(f"{path}: not a depth grid (magic={magic!r}, dtype={code})")
    dtype = _DTYPES[code]
    expected = _HEADER.size + h * w * dtype.itemsize
    if len(data) != expected:
        raise SceneLoadError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype, offset=_HEADER.size).reshape(h, w).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray):
    """Write an ``(H, W, 3)`` float image in ``[0, 1]`` or a uint8 array."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise SceneLoadError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0

"""Image file formats: 8-bit PNG for inspection, raw IMGF floats for tests.

IMGF layout: magic "IMGF", then height, width, channels as little-endian
u32, then float32 values row-major. Both writers are bitwise deterministic
for identical inputs (the PNG encoder uses a fixed zlib level and no
filtering heuristics).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["write_png", "write_imgf", "read_imgf"]

_IMGF_MAGIC = b"IMGF"


def write_png(path, image: np.ndarray) -> None:
    """Write an (H, W), (H, W, 1), (H, W, 3) or (H, W, 4) float image.

    Values are clipped to [0, 1] and quantized to 8 bits.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3, 4):
        raise ValueError(f"unsupported channel count {c}")
    color_type = {1: 0, 3: 2, 4: 6}[c]
    data = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    raw = b"".join(b"\x00" + data[row].tobytes() for row in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    png = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw, 6))
        + chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(png)


def write_imgf(path, image: np.ndarray) -> None:
    """Write an (H, W) or (H, W, C) array as raw little-endian float32."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(_IMGF_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(img.astype("<f4").tobytes())


def read_imgf(path) -> np.ndarray:
    """Read an IMGF file back as a float64 (H, W, C) array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _IMGF_MAGIC:
            raise ValueError(f"bad IMGF magic {magic!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4")
    return data.reshape(h, w, c).astype(np.float64)

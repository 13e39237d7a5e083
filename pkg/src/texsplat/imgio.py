"""Image file I/O: 8-bit PNG for display images, PFM for float data.

PFM scanlines are stored bottom-to-top; a negative scale marks little
endian. Arrays here follow image convention, row 0 at the top.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_png(path, img):
    """Write a display-space image in [0, 1] as 8-bit PNG.

    Args:
        img: (H, W) or (H, W, 3) floats; values are clipped.
    """
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1], (H, W) or (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    return arr.astype(np.float64) / 255.0


def write_pfm(path, data):
    """Write float32 data as PFM; (H, W) -> 'Pf', (H, W, 3) -> 'PF'."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM holds 1- or 3-channel images")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little endian
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM written by write_pfm (or any conforming file)."""
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind == b"PF":
            channels = 3
        elif kind == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: header {kind!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * channels
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return raw.reshape(shape)[::-1].astype(np.float32)

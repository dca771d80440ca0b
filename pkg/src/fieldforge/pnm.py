"""Binary PGM (P5) and PPM (P6) images with values in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past them (skips # comments)."""
    out, i = [], 0
    while len(out) < count:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        out.append(data[i:j])
        i = j
    return out, i + 1  # single whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    n = w * h * channels
    raster = np.frombuffer(data, dtype=dtype, count=n, offset=start).astype(np.float64) / maxval
    return raster.reshape(h, w) if channels == 1 else raster.reshape(h, w, 3)


def write_pnm(path, image: np.ndarray, maxval: int = 255) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError("expected an (H, W) or (H, W, 3) image")
    h, w = img.shape[:2]
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    raster = np.round(img * maxval).astype(dtype)
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + raster.tobytes())

"""Image files: 8-bit gamma-encoded PNG and raw float32 dumps.

Raw dump layout: ASCII line ``evsplat-raw 1 <height> <width> <channels>\\n``
followed by height*width*channels little-endian float32 values in row-major
(H, W, C) order, holding linear intensities.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError
from .metrics import display_to_linear, linear_to_display

RAW_MAGIC = "evsplat-raw"


def write_png(path, linear: np.ndarray) -> None:
    disp = np.round(linear_to_display(linear) * 255.0).astype(np.uint8)
    Image.fromarray(disp).save(path)


def read_png(path) -> np.ndarray:
    """Linear intensities from an 8-bit PNG."""
    disp = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return display_to_linear(disp)


def write_raw(path, linear: np.ndarray) -> None:
    img = np.asarray(linear, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(f"{RAW_MAGIC} 1 {h} {w} {c}\n".encode("ascii"))
        f.write(img.tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].decode("ascii").split()
    if len(parts) != 5 or parts[:2] != [RAW_MAGIC, "1"]:
        raise ContractError(f"{path}: not a raw image dump")
    h, w, c = map(int, parts[2:])
    arr = np.frombuffer(data[nl + 1:], dtype="<f4")
    if arr.size != h * w * c:
        raise ContractError(f"{path}: truncated raw image")
    return arr.reshape(h, w, c).astype(np.float64)

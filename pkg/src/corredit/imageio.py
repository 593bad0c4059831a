"""Image buffers: validation, PPM/PNG/PGM I/O and builtin test patterns.

An image is a float64 array of shape (H, W, C) with C in {1, 3} and values
in [0, 1]. Pixel centers sit at integer coordinates; x indexes columns.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError, ShapeError


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an image buffer and return it as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ShapeError(f"image must have shape (H, W, 1|3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"image has an empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError("image values must lie in [0, 1]")
    return arr


def normalize_image(arr: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and add a channel axis to 2-D input."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return check_image(np.clip(np.nan_to_num(arr), 0.0, 1.0))


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luminance plane of shape (H, W)."""
    if image.shape[2] == 1:
        return image[:, :, 0]
    return image @ np.array([0.299, 0.587, 0.114])


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        data = np.asarray(im, dtype=np.float64) / 255.0
    return normalize_image(data)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write PNG, PPM (P6) or PGM depending on the suffix."""
    path = Path(path)
    image = check_image(image)
    q = quantize(image)
    suffix = path.suffix.lower()
    if q.shape[2] == 1:
        im = Image.fromarray(q[:, :, 0], mode="L")
    else:
        im = Image.fromarray(q, mode="RGB")
    if suffix == ".ppm" and q.shape[2] == 1:
        im = im.convert("RGB")
    fmt = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM"}.get(suffix)
    if fmt is None:
        raise ParameterError(f"unsupported image format: {path.suffix!r}")
    if suffix == ".pgm" and im.mode != "L":
        im = im.convert("L")
    im.save(path, format=fmt)


def smooth_texture(size: int, seed: int, channels: int = 3, octaves: int = 4) -> np.ndarray:
    """Band-limited random texture, a stand-in for natural image content."""
    rng = np.random.default_rng(seed)
    out = np.zeros((size, size, channels))
    for octave in range(octaves):
        cells = 4 * 2 ** octave
        coarse = rng.random((cells + 1, cells + 1, channels))
        coords = np.linspace(0, cells, size, endpoint=False)
        i0 = np.floor(coords).astype(int)
        f = coords - i0
        f = f * f * (3 - 2 * f)
        rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
        layer = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
        out += layer / 2 ** octave
    out -= out.min()
    out /= max(out.max(), 1e-12)
    return out


def builtin_pattern(name: str, size: int = 64, seed: int = 0) -> np.ndarray:
    if name == "checkerboard":
        yy, xx = np.mgrid[0:size, 0:size]
        board = ((yy // 8 + xx // 8) % 2).astype(np.float64)
        return np.repeat(board[:, :, None], 3, axis=2)
    if name == "texture":
        return smooth_texture(size, seed)
    if name == "noise":
        return np.random.default_rng(seed).random((size, size, 3))
    if name == "gray":
        return np.full((size, size, 3), 0.5)
    raise ParameterError(f"unknown builtin pattern {name!r}")

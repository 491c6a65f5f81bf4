"""Minimal binary PGM/PPM raster output and contour overlay rendering.

The overlay export draws a grayscale base slice with the ground-truth
contour in green and the predicted contour in red (yellow where the two
coincide), in plain netpbm formats that need no imaging dependency.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

TRUTH_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
BOTH_COLOR = (255, 255, 0)


def _as_u8_plane(image: np.ndarray, channels: int) -> np.ndarray:
    arr = np.asarray(image)
    want = 2 if channels == 1 else 3
    if arr.ndim != want or (channels == 3 and arr.shape[2] != 3):
        raise ValueError(f"expected a {'HxW' if channels == 1 else 'HxWx3'} "
                         f"array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    return arr


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary (P5) grayscale image from a (H, W) uint8 array."""
    gray = _as_u8_plane(gray, 1)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary (P6) color image from a (H, W, 3) uint8 array."""
    rgb = _as_u8_plane(rgb, 3)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_netpbm(path, magic: bytes, values_per_pixel: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if (not blob.startswith(magic)
            or not blob[len(magic):len(magic) + 1].isspace()):
        raise DataError(f"{path}: not a {magic.decode()} file (bad magic)")
    # Three whitespace-separated header tokens (width, height, maxval);
    # splitting the whole blob would eat pixel bytes that happen to be
    # whitespace values, so scan the header explicitly.
    pos = len(magic)
    tokens = []
    for _ in range(3):
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed header")
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos + 1:]  # exactly one whitespace byte precedes the raster
    if len(data) != h * w * values_per_pixel:
        raise DataError(f"{path}: expected {h * w * values_per_pixel} pixel "
                        f"bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    shape = (h, w) if values_per_pixel == 1 else (h, w, values_per_pixel)
    return arr.reshape(shape)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels: mask pixels with a 4-neighbor outside the mask
    (image-edge mask pixels count as boundary)."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    interior = np.zeros_like(m)
    interior[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                            & m[1:-1, :-2] & m[1:-1, 2:])
    return m & ~interior


def render_overlay(base01: np.ndarray, truth_mask: np.ndarray,
                   pred_mask: np.ndarray) -> np.ndarray:
    """Grayscale base in [0, 1] with truth/pred contours over-colored."""
    base = np.asarray(base01, dtype=np.float64)
    if base.ndim != 2:
        raise ValueError(f"base slice must be 2-D, got shape {base.shape}")
    if base.shape != np.asarray(truth_mask).shape or \
            base.shape != np.asarray(pred_mask).shape:
        raise ValueError("base, truth, and pred must share one shape")
    gray = np.clip(np.rint(base * 255.0), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    truth_edge = mask_contour(truth_mask)
    pred_edge = mask_contour(pred_mask)
    rgb[truth_edge] = TRUTH_COLOR
    rgb[pred_edge] = PRED_COLOR
    rgb[truth_edge & pred_edge] = BOTH_COLOR
    return rgb

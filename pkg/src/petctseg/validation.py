"""Input validation helpers shared by the estimator and CLI surfaces."""

from __future__ import annotations

import numpy as np


def check_image_stack(X, name: str = "X") -> np.ndarray:
    """Validate a batch of multi-channel images.

    Requires a (N, C, H, W) numeric array with N >= 1 and finite values;
    returns it as float32.
    """
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-dimensional (N, C, H, W), "
                         f"got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must hold at least one sample")
    if not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_mask_stack(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    """Validate binary target masks against an image stack.

    Accepts (N, H, W) or (N, 1, H, W); returns float32 (N, 1, H, W).
    """
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, 1, H, W), "
                         f"got {np.asarray(y).shape}")
    if arr.shape[0] != X.shape[0] or arr.shape[2:] != X.shape[2:]:
        raise ValueError(f"{name} shape {arr.shape} does not match "
                         f"X shape {X.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(np.float32, copy=False)


def check_spatial_divisibility(shape, depth: int, name: str = "X") -> None:
    """Spatial dims must survive `depth` rounds of 2x2 pooling."""
    h, w = shape[-2], shape[-1]
    factor = 2 ** depth
    if h % factor or w % factor:
        raise ValueError(f"{name} spatial dims {h}x{w} must be divisible by "
                         f"2^depth = {factor}")

"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np


def check_cube_array(X, n_views: int | None = None, image_size: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 ``[B, 3, N, H, W]`` array or raise ``ValueError``.

    A single cube ``[3, N, H, W]`` is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ValueError(f"{name} must be [B, 3, N, H, W], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have 3 colour channels on axis 1, got {arr.shape[1]}")
    if n_views is not None and arr.shape[2] != n_views:
        raise ValueError(f"{name} has N={arr.shape[2]} views, expected {n_views}")
    if image_size is not None and arr.shape[3:] != (image_size, image_size):
        raise ValueError(f"{name} images are {arr.shape[3]}x{arr.shape[4]}, expected {image_size}x{image_size}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"X has {n_samples} samples but y has {len(y)}")
    return y

"""Input checking and array/tensor conversion shared by the estimators."""

import numpy as np
import torch

from .data import DatasetSplit
from .exceptions import UsageError


def check_images(X, *, channels=None, size=32, name="X"):
    """Validate an image batch and return it as float32 (N, H, W, C).

    ``X`` may be a :class:`DatasetSplit`, an (N, H, W, C) array in [-1, 1],
    or an (N, H, W) grayscale array. ``channels`` may be an int or a tuple of
    allowed counts.
    """
    if isinstance(X, DatasetSplit):
        X = X.images()
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise UsageError(f"{name} must be (N, H, W, C); got shape {X.shape}")
    if len(X) == 0:
        raise UsageError(f"{name} is empty")
    if size is not None and X.shape[1:3] != (size, size):
        raise UsageError(f"{name} must be {size}x{size}; got {X.shape[1]}x{X.shape[2]}")
    if channels is not None:
        allowed = (channels,) if isinstance(channels, int) else tuple(channels)
        if X.shape[3] not in allowed:
            raise UsageError(f"{name} must have {allowed} channels; got {X.shape[3]}")
    if not np.isfinite(X).all():
        raise UsageError(f"{name} contains non-finite values")
    if X.min() < -1 or X.max() > 1:
        raise UsageError(f"{name} values must lie in [-1, 1]")
    return X


def check_labels(y, n, name="y"):
    y = np.asarray(y)
    if y.shape != (n,):
        raise UsageError(f"{name} must have shape ({n},); got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise UsageError(f"{name} must be integer class labels")
    if y.min() < 0 or y.max() > 9:
        raise UsageError(f"{name} must lie in 0..9")
    return y.astype(np.int64)


def to_tensor(X, device="cpu"):
    """(N, H, W, C) array -> (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32)).permute(0, 3, 1, 2).contiguous().to(device)


def to_numpy(T):
    """(N, C, H, W) tensor -> (N, H, W, C) float32 array."""
    return T.detach().permute(0, 2, 3, 1).cpu().numpy()


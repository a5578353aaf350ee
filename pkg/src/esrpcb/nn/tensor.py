"""Array conventions shared by the network engine.

Feature maps are plain numpy arrays in channels-first layout, either
``C x H x W`` or batched ``N x C x H x W``. Parameters default to float32;
gradient checking promotes a whole network to float64.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up for an operation."""


class StateError(RuntimeError):
    """Raised when an operation is invoked out of order (e.g. backward before forward)."""


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Validate external input and return it as a contiguous float array.

    NaN and Inf are rejected here so they never enter the engine silently.
    """
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.size == 0 or any(d <= 0 for d in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def ensure_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return an NCHW view of ``x`` and whether a batch axis was added."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected CxHxW or NxCxHxW, got shape {x.shape}")

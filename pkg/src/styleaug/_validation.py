"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import math

import numpy as np
import torch


class ContractError(ValueError):
    """Raised when an input violates an operation's precondition."""


def check_images(X, *, name: str = "X", allow_single: bool = False) -> np.ndarray:
    """Validate a stack of RGB images in ``(n, H, W, 3)`` layout, 0-255 range.

    Returns a float32 array. A single ``(H, W, 3)`` image is promoted to a batch
    of one when ``allow_single`` is set.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ContractError(f"{name} must have shape (n, H, W, 3), got {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1 or X.shape[2] < 1:
        raise ContractError(f"{name} is empty: shape {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ContractError(f"{name} contains NaN or Inf")
    return X


def check_nonnegative(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ContractError(f"{name} must be finite and >= 0, got {value}")
    return value


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ContractError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def to_nchw(X: np.ndarray) -> torch.Tensor:
    """``(n, H, W, 3)`` array -> ``(n, 3, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2))).float()


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy()

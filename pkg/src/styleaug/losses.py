"""Perceptual losses: content reconstruction, Gram-matrix style, total variation.

Every function works on torch tensors and stays differentiable. Reductions are
carried out in float64 whatever the activation dtype, so the returned losses are
float64 tensors. Leading batch dimensions are allowed everywhere; a loss over a
batch comes back with one value per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from ._validation import ContractError, check_nonnegative

__all__ = [
    "FeatureMap",
    "GramMatrix",
    "StyleTarget",
    "LossWeights",
    "content_loss",
    "gram_matrix",
    "layer_style_loss",
    "style_loss",
    "tv_loss",
    "total_objective",
]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Activations of one layer flattened to ``(..., channels, positions)``."""

    data: torch.Tensor
    layer_id: str

    def __post_init__(self):
        if self.data.dim() < 2:
            raise ContractError(f"feature map needs (channels, positions), got shape {tuple(self.data.shape)}")
        if self.data.shape[-2] < 1 or self.data.shape[-1] < 1:
            raise ContractError(f"feature map {self.layer_id!r} is empty: {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise ContractError(f"feature map {self.layer_id!r} has non-finite entries")

    @classmethod
    def from_activation(cls, activation: torch.Tensor, layer_id: str) -> "FeatureMap":
        """Flatten a ``(..., C, H, W)`` activation row-major over ``(H, W)``."""
        return cls(activation.flatten(-2), layer_id)

    @property
    def n_channels(self) -> int:
        return self.data.shape[-2]

    @property
    def n_positions(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True, eq=False)
class GramMatrix:
    data: torch.Tensor
    layer_id: str

    @property
    def n_channels(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True, eq=False)
class StyleTarget:
    """Target Gram matrices with one nonnegative weight per layer, weights summing to 1."""

    grams: tuple[GramMatrix, ...]
    layer_weights: tuple[float, ...] = field(default=())

    def __post_init__(self):
        grams = tuple(self.grams)
        weights = tuple(float(w) for w in self.layer_weights) or tuple([1.0 / len(grams)] * len(grams))
        object.__setattr__(self, "grams", grams)
        object.__setattr__(self, "layer_weights", weights)
        if not grams:
            raise ContractError("style target needs at least one layer")
        if len(grams) != len(weights):
            raise ContractError(f"{len(grams)} grams but {len(weights)} layer weights")
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise ContractError(f"layer weights must be finite and >= 0: {weights}")
        if abs(math.fsum(weights) - 1.0) > 1e-9:
            raise ContractError(f"layer weights must sum to 1, got {math.fsum(weights)!r}")
        ids = [g.layer_id for g in grams]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate layer ids in style target: {ids}")

    @property
    def layer_ids(self) -> list[str]:
        return [g.layer_id for g in self.grams]


@dataclass(frozen=True)
class LossWeights:
    lambda_content: float = 7.5
    lambda_style: float = 100.0
    lambda_tv: float = 200.0

    def __post_init__(self):
        for name in ("lambda_content", "lambda_style", "lambda_tv"):
            object.__setattr__(self, name, check_nonnegative(getattr(self, name), name))
        if self.lambda_content == self.lambda_style == self.lambda_tv == 0:
            raise ContractError("at least one loss weight must be positive")


def _data(x) -> torch.Tensor:
    return x.data if isinstance(x, (FeatureMap, GramMatrix)) else x


def content_loss(F: FeatureMap, P: FeatureMap) -> torch.Tensor:
    """Half the sum of squared differences between two feature maps.

    The gradient with respect to ``F`` is ``F - P``.
    """
    f, p = _data(F), _data(P)
    if f.shape != p.shape:
        raise ContractError(f"content_loss shape mismatch: F {tuple(f.shape)} vs P {tuple(p.shape)}")
    if isinstance(F, FeatureMap) and isinstance(P, FeatureMap) and F.layer_id != P.layer_id:
        raise ContractError(f"content_loss layer mismatch: {F.layer_id!r} vs {P.layer_id!r}")
    diff = f.double() - p.double()
    return 0.5 * diff.pow(2).sum(dim=(-2, -1))


def gram_matrix(F: FeatureMap) -> GramMatrix:
    """Channel inner products ``G[i, j] = sum_k F[i, k] F[j, k]``, unnormalized.

    The lower triangle is mirrored from the upper one so the result is exactly
    symmetric.
    """
    f = _data(F).double()
    g = f @ f.transpose(-2, -1)
    g = torch.triu(g) + torch.triu(g, diagonal=1).transpose(-2, -1)
    return GramMatrix(g, getattr(F, "layer_id", ""))


def layer_style_loss(G: GramMatrix, A: GramMatrix, n_channels: int, n_positions: int) -> torch.Tensor:
    """``sum((G - A)**2) / (4 N^2 M^2)`` for one layer.

    ``A`` may omit the batch dimensions of ``G``; it is broadcast.
    """
    g, a = _data(G), _data(A)
    if n_channels < 1 or n_positions < 1:
        raise ContractError(f"need N_l, M_l >= 1, got N_l={n_channels}, M_l={n_positions}")
    expected = (n_channels, n_channels)
    if tuple(g.shape[-2:]) != expected or tuple(a.shape[-2:]) != expected:
        raise ContractError(
            f"layer_style_loss shape mismatch: G {tuple(g.shape)}, A {tuple(a.shape)}, expected (..., {n_channels}, {n_channels})"
        )
    if a.dim() > g.dim():
        raise ContractError(f"target gram has more batch dims than current: A {tuple(a.shape)} vs G {tuple(g.shape)}")
    diff = g.double() - a.double()
    scale = 4.0 * float(n_channels) ** 2 * float(n_positions) ** 2
    return diff.pow(2).sum(dim=(-2, -1)) / scale


def style_loss(
    current: Sequence[GramMatrix],
    target: StyleTarget,
    dims: Sequence[tuple[int, int]],
) -> torch.Tensor:
    """Weighted sum of per-layer style losses.

    ``current`` and ``dims`` are aligned with each other; they are matched to the
    target by ``layer_id``, so their order does not matter.
    """
    if len(current) != len(dims):
        raise ContractError(f"{len(current)} grams but {len(dims)} (N_l, M_l) pairs")
    by_id = {g.layer_id: (g, d) for g, d in zip(current, dims)}
    missing = [lid for lid in target.layer_ids if lid not in by_id]
    extra = [lid for lid in by_id if lid not in target.layer_ids]
    if missing or extra:
        raise ContractError(f"style layer mismatch: missing {missing}, unexpected {extra}")
    total = None
    for A, w in zip(target.grams, target.layer_weights):
        G, (n, m) = by_id[A.layer_id]
        term = w * layer_style_loss(G, A, n, m)
        total = term if total is None else total + term
    return total


def tv_loss(image: torch.Tensor) -> torch.Tensor:
    """Squared anisotropic total variation of ``(..., C, H, W)`` images.

    Summed over channels and both spatial directions, no normalization.
    """
    x = image.double()
    dw = x[..., :, 1:] - x[..., :, :-1]
    dh = x[..., 1:, :] - x[..., :-1, :]
    return dw.pow(2).sum(dim=(-3, -2, -1)) + dh.pow(2).sum(dim=(-3, -2, -1))


def total_objective(content, style, tv, weights: LossWeights):
    """``lambda_c * content + lambda_s * style + lambda_tv * tv``."""
    for name, value in (("content", content), ("style", style), ("tv", tv)):
        t = torch.as_tensor(value)
        if not bool(torch.isfinite(t).all()):
            raise ContractError(f"{name} loss is not finite: {value}")
        if bool((t < 0).any()):
            raise ContractError(f"{name} loss is negative: {value}")
    return weights.lambda_content * content + weights.lambda_style * style + weights.lambda_tv * tv

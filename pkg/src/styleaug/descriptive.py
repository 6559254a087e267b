"""Iterative pixel-space stylization: gradient descent on the weighted objective."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractError, check_images, check_positive_int, to_nchw, to_nhwc
from .losses import FeatureMap, LossWeights, StyleTarget, content_loss, gram_matrix, style_loss, total_objective, tv_loss
from .lossnet import FeatureMapSet, LossNetwork, compute_style_target, extract_features

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "content_loss", "style_loss", "tv_loss", "total")


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class DescriptiveRunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 500
    step_size: float = 1.0
    init: str = "white_noise"
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        check_positive_int(self.iterations, "iterations")
        check_positive_int(self.log_every, "log_every")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ContractError(f"step_size must be > 0, got {self.step_size}")
        if self.init not in ("white_noise", "content_copy"):
            raise ContractError(f"init must be white_noise or content_copy, got {self.init!r}")


@dataclass
class LossTrace:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step, content, style, tv, total):
        self.rows.append((int(step), float(content), float(style), float(tv), float(total)))

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list[float]:
        i = TRACE_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def best_so_far(self) -> list[float]:
        return list(np.minimum.accumulate(self.column("total"))) if self.rows else []

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for step, *vals in self.rows:
                w.writerow([step, *(repr(v) for v in vals)])

    @classmethod
    def from_csv(cls, path) -> "LossTrace":
        trace = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append(*(row[c] if c != "step" else int(row[c]) for c in TRACE_COLUMNS))
        return trace


def objective_terms(net, image, style_target, content_feats, weights):
    """(content, style, tv, total), each averaged over the batch."""
    layers = list(dict.fromkeys(list(style_target.layer_ids) + (list(content_feats.maps) if content_feats else [])))
    feats = extract_features(net, image, layers)
    if content_feats is not None and weights.lambda_content > 0:
        c = sum(content_loss(feats[l], content_feats[l]) for l in content_feats.maps).mean()
    else:
        c = torch.zeros((), dtype=torch.float64)
    if weights.lambda_style > 0:
        ids = style_target.layer_ids
        s = style_loss([gram_matrix(feats[l]) for l in ids], style_target, feats.dims(ids)).mean()
    else:
        s = torch.zeros((), dtype=torch.float64)
    tv = tv_loss(image).mean() if weights.lambda_tv > 0 else torch.zeros((), dtype=torch.float64)
    return c, s, tv, total_objective(c, s, tv, weights)


def optimize(
    content: torch.Tensor,
    style_target: StyleTarget,
    content_feats: FeatureMapSet | None,
    net: LossNetwork,
    cfg: DescriptiveRunConfig,
) -> tuple[torch.Tensor, LossTrace]:
    """Minimize the weighted objective over pixels with Adam, clamping to [0, 255].

    Returns the best iterate seen and the logged trace (every ``log_every``
    iterations, starting at 0).
    """
    single = content.dim() == 3
    content = (content.unsqueeze(0) if single else content).detach().float()
    if content_feats is not None and any(f.data.dim() == 2 for f in content_feats.maps.values()):
        # features of an unbatched image; give them the batch axis the iterate has
        maps = {k: FeatureMap(f.data.unsqueeze(0) if f.data.dim() == 2 else f.data, f.layer_id) for k, f in content_feats.maps.items()}
        content_feats = FeatureMapSet(maps, content_feats.source_shape)
    if cfg.init == "white_noise":
        gen = torch.Generator().manual_seed(cfg.seed)
        x = torch.rand(content.shape, generator=gen) * 255.0
    else:
        x = content.clone()
    x.requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.step_size)
    trace = LossTrace()
    best_total, best_x = math.inf, x.detach().clone()

    def evaluate(step):
        try:
            terms = objective_terms(net, x, style_target, content_feats, cfg.weights)
        except ContractError as exc:
            raise OptimizationDiverged(f"non-finite loss at step {step}: {exc}", trace) from None
        return terms

    for step in range(cfg.iterations):
        c, s, tv, total = evaluate(step)
        value = total.item()
        if step % cfg.log_every == 0:
            trace.append(step, c.item(), s.item(), tv.item(), value)
            logger.debug("step %d total %.6g", step, value)
        if value < best_total:
            best_total, best_x = value, x.detach().clone()
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 255.0)
    with torch.no_grad():
        value = float(evaluate(cfg.iterations)[3])
    if value < best_total:
        best_x = x.detach().clone()
    return (best_x[0] if single else best_x), trace


class DescriptiveStylizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on one style image, ``transform`` content images.

    Images are ``(n, H, W, 3)`` arrays in 0-255.
    """

    def __init__(
        self,
        lambda_content=7.5,
        lambda_style=100.0,
        lambda_tv=200.0,
        iterations=500,
        step_size=1.0,
        init="white_noise",
        seed=0,
        log_every=10,
        loss_network=None,
    ):
        self.lambda_content = lambda_content
        self.lambda_style = lambda_style
        self.lambda_tv = lambda_tv
        self.iterations = iterations
        self.step_size = step_size
        self.init = init
        self.seed = seed
        self.log_every = log_every
        self.loss_network = loss_network

    def _run_config(self, seed) -> DescriptiveRunConfig:
        return DescriptiveRunConfig(
            LossWeights(self.lambda_content, self.lambda_style, self.lambda_tv),
            self.iterations, self.step_size, self.init, seed, self.log_every,
        )

    def fit(self, X, y=None):
        X = check_images(X, allow_single=True)
        if X.shape[0] != 1:
            raise ContractError(f"fit takes exactly one style image, got {X.shape[0]}")
        self._run_config(self.seed)
        self.loss_network_ = self.loss_network if self.loss_network is not None else LossNetwork()
        self.style_target_ = compute_style_target(self.loss_network_, to_nchw(X)[0])
        return self

    def transform(self, X):
        check_is_fitted(self, "style_target_")
        X = check_images(X)
        net = self.loss_network_
        out, self.traces_ = [], []
        for i, img in enumerate(to_nchw(X)):
            with torch.no_grad():
                feats = extract_features(net, img.unsqueeze(0), net.content_layers)
            y, trace = optimize(img, self.style_target_, feats, net, self._run_config(self.seed + i))
            out.append(y)
            self.traces_.append(trace)
        return to_nhwc(torch.stack(out))


def write_trace(trace: LossTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(path)
    return path

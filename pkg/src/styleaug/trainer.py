"""Per-style training of the transformation network against the loss network."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractError, check_images, check_positive_int, to_nchw, to_nhwc
from .descriptive import LossTrace, objective_terms
from .images import ImageDecodeError, is_image_path, load_image, to_tensor
from .losses import LossWeights
from .lossnet import DEFAULT_CONTENT_LAYERS, DEFAULT_STYLE_LAYERS, LossNetwork, compute_style_target, extract_features
from .transformnet import (
    StyleModelCheckpoint,
    TransformNetConfig,
    TransformNetwork,
    build,
    load_checkpoint,
    save_checkpoint,
    stylize,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_checkpoint=None, trace=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.trace = trace


@dataclass(frozen=True)
class StyleTrainConfig:
    style_image_path: str
    corpus_dir: str
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 4
    steps: int = 2000
    learning_rate: float = 1e-3
    image_size: int = 256
    seed: int = 0
    checkpoint_every: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    log_every: int = 10
    style_name: str | None = None
    style_size: int | None = None
    content_layers: tuple[str, ...] = DEFAULT_CONTENT_LAYERS
    style_layers: tuple[str, ...] = DEFAULT_STYLE_LAYERS
    layer_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.steps, "steps")
        check_positive_int(self.image_size, "image_size")
        check_positive_int(self.log_every, "log_every")
        check_positive_int(self.checkpoint_every, "checkpoint_every", minimum=0)
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.style_name is None:
            object.__setattr__(self, "style_name", Path(self.style_image_path).stem)
        for name in ("content_layers", "style_layers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.layer_weights is not None:
            object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        for k in ("content_layers", "style_layers", "layer_weights"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


def make_variant(base: StyleTrainConfig, content_scale: float, name: str | None = None) -> StyleTrainConfig:
    """Copy of ``base`` with the content weight multiplied by ``content_scale``.

    The style name gets a suffix unless ``name`` is given.
    """
    if not (content_scale > 0 and math.isfinite(content_scale)):
        raise ContractError(f"content_scale must be > 0, got {content_scale}")
    w = base.weights
    weights = LossWeights(w.lambda_content * content_scale, w.lambda_style, w.lambda_tv)
    return dataclasses.replace(base, weights=weights, style_name=name or f"{base.style_name}_c{content_scale:g}")


def list_corpus(corpus_dir) -> list[Path]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise ContractError(f"corpus directory not found: {root}")
    return sorted(p for p in root.rglob("*") if p.is_file() and is_image_path(p))


class _DirCorpus:
    def __init__(self, paths: Sequence[Path], size: int):
        good = []
        for p in paths:
            try:
                load_image(p)
            except ImageDecodeError as exc:
                logger.warning("skipping corpus file: %s", exc)
                continue
            good.append(p)
        if not good:
            raise ContractError("corpus contains no decodable images")
        self.paths = good
        self._load = lru_cache(maxsize=512)(lambda i: to_tensor(load_image(self.paths[i], size)))

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i) -> torch.Tensor:
        return self._load(i)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.paths:
            h.update(p.name.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
        return h.hexdigest()


class _ArrayCorpus:
    def __init__(self, images: torch.Tensor):
        self.images = images

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i) -> torch.Tensor:
        return self.images[i]

    def digest(self) -> str:
        return hashlib.sha256(self.images.numpy().tobytes()).hexdigest()


def _batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches; each epoch is a fresh seeded shuffle."""
    rng = np.random.default_rng(seed)
    pending: deque[int] = deque()
    while True:
        while len(pending) < batch_size:
            pending.extend(int(i) for i in rng.permutation(n))
        yield [pending.popleft() for _ in range(batch_size)]


def _make_optimizer(params, cfg: StyleTrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def _validate_checkpoint(path, image_size: int) -> None:
    net, _ = load_checkpoint(path)
    probe = torch.full((3, image_size, image_size), 127.5)
    out = stylize(net, probe)
    if out.shape != probe.shape or not bool(torch.isfinite(out).all()):
        raise RuntimeError(f"checkpoint {path} failed its stylize check")


def _train_loop(net, lossnet, target, corpus, cfg: StyleTrainConfig, save_fn=None):
    opt = _make_optimizer(net.parameters(), cfg)
    batches = _batches(len(corpus), cfg.batch_size, cfg.seed)
    trace = LossTrace()
    recent: deque[float] = deque(maxlen=cfg.log_every)
    last_good = None
    net.train()
    for step in range(1, cfg.steps + 1):
        x = torch.stack([corpus[i] for i in next(batches)])
        with torch.no_grad():
            content_feats = extract_features(lossnet, x, lossnet.content_layers)
        y = net(x)
        try:
            c, s, tv, total = objective_terms(lossnet, y, target, content_feats, cfg.weights)
        except ContractError as exc:
            raise TrainingDiverged(f"non-finite loss at step {step}: {exc}", last_good, trace) from None
        recent.append(total.item())
        if (step - 1) % cfg.log_every == 0:
            trace.append(step, c.item(), s.item(), tv.item(), total.item())
        opt.zero_grad()
        total.backward()
        opt.step()
        if not all(bool(torch.isfinite(p).all()) for p in net.parameters()):
            raise TrainingDiverged(f"non-finite weights after step {step}", last_good, trace)
        if save_fn is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last_good = save_fn(step)
    net.eval()
    return trace, float(np.mean(recent))


def _training_meta(cfg: StyleTrainConfig, net_cfg, lossnet: LossNetwork, corpus_id: str, steps_done: int) -> dict:
    return {
        "lambda_content": cfg.weights.lambda_content,
        "lambda_style": cfg.weights.lambda_style,
        "lambda_tv": cfg.weights.lambda_tv,
        "content_layers": list(lossnet.content_layers),
        "style_layers": list(lossnet.style_layers),
        "layer_weights": list(cfg.layer_weights or [1.0 / len(lossnet.style_layers)] * len(lossnet.style_layers)),
        "optimizer": {"name": cfg.optimizer, "lr": cfg.learning_rate, "momentum": cfg.momentum},
        "steps": steps_done,
        "seed": cfg.seed,
        "corpus_id": corpus_id,
        "train_config": cfg.to_dict(),
        "net_config": net_cfg.to_dict(),
        "loss_network": lossnet.describe(),
    }


def train_style(
    cfg: StyleTrainConfig,
    net_cfg: TransformNetConfig | None = None,
    out_path=None,
    loss_net: LossNetwork | None = None,
) -> StyleModelCheckpoint:
    """Train one transformation network for the style image in ``cfg``.

    With ``out_path`` set, the final checkpoint goes there, intermediate ones
    (every ``checkpoint_every`` steps) go next to it as ``<stem>.step<N>.ckpt``,
    and the loss trace is written to ``<stem>.trace.csv``. Every checkpoint is
    reloaded and run once before training continues.
    """
    net_cfg = net_cfg or TransformNetConfig()
    if cfg.image_size % net_cfg.downsample_factor:
        raise ContractError(f"image_size {cfg.image_size} is not divisible by {net_cfg.downsample_factor}")
    try:
        style = to_tensor(load_image(cfg.style_image_path, cfg.style_size or cfg.image_size))
    except (ImageDecodeError, FileNotFoundError) as exc:
        raise ContractError(f"style image unusable: {exc}") from None
    corpus = _DirCorpus(list_corpus(cfg.corpus_dir), cfg.image_size)
    lossnet = loss_net or LossNetwork(content_layers=cfg.content_layers, style_layers=cfg.style_layers)
    target = compute_style_target(lossnet, style, cfg.layer_weights)
    hash_before = lossnet.compute_weights_hash()
    corpus_id = corpus.digest()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = build(net_cfg, cfg.seed)
        out = Path(out_path) if out_path is not None else None

        def save_intermediate(step):
            path = out.with_name(f"{out.stem}.step{step:06d}{out.suffix or '.ckpt'}")
            save_checkpoint(net, _training_meta(cfg, net_cfg, lossnet, corpus_id, step), path, cfg.style_name)
            _validate_checkpoint(path, max(net_cfg.downsample_factor, 8))
            return path

        trace, running = _train_loop(net, lossnet, target, corpus, cfg, save_intermediate if out else None)

    if lossnet.compute_weights_hash() != hash_before:
        raise RuntimeError("loss network weights changed during training")
    meta = _training_meta(cfg, net_cfg, lossnet, corpus_id, cfg.steps)
    meta["final_running_total"] = running
    if out is not None:
        save_checkpoint(net, meta, out, cfg.style_name)
        _validate_checkpoint(out, max(net_cfg.downsample_factor, 8))
        trace.to_csv(out.with_name(f"{out.stem}.trace.csv"))
    state = {k: v.clone() for k, v in net.state_dict().items()}
    return StyleModelCheckpoint(net_cfg, state, cfg.style_name, meta, trace=trace)


class StyleTransferTransformer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the feed-forward stylizer.

    ``fit(X)`` trains on an in-memory corpus ``X`` of ``(n, S, S, 3)`` images
    against ``style_image`` (an ``(H, W, 3)`` array); ``transform`` stylizes.
    """

    def __init__(
        self,
        style_image=None,
        lambda_content=7.5,
        lambda_style=100.0,
        lambda_tv=200.0,
        steps=200,
        batch_size=4,
        learning_rate=1e-3,
        optimizer="adam",
        seed=0,
        num_residual_blocks=5,
        base_channels=32,
        log_every=10,
        loss_network=None,
    ):
        self.style_image = style_image
        self.lambda_content = lambda_content
        self.lambda_style = lambda_style
        self.lambda_tv = lambda_tv
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.seed = seed
        self.num_residual_blocks = num_residual_blocks
        self.base_channels = base_channels
        self.log_every = log_every
        self.loss_network = loss_network

    def fit(self, X, y=None):
        X = check_images(X)
        if self.style_image is None:
            raise ContractError("style_image must be set before fit")
        style = check_images(self.style_image, name="style_image", allow_single=True)
        net_cfg = TransformNetConfig(self.num_residual_blocks, self.base_channels)
        cfg = StyleTrainConfig(
            "<array>", "<array>", LossWeights(self.lambda_content, self.lambda_style, self.lambda_tv),
            batch_size=self.batch_size, steps=self.steps, learning_rate=self.learning_rate,
            image_size=X.shape[1], seed=self.seed, optimizer=self.optimizer, log_every=self.log_every,
            style_name="array",
        )
        lossnet = self.loss_network if self.loss_network is not None else LossNetwork()
        target = compute_style_target(lossnet, to_nchw(style)[0])
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = build(net_cfg, self.seed)
            self.trace_, self.final_running_total_ = _train_loop(net, lossnet, target, _ArrayCorpus(to_nchw(X)), cfg)
        self.network_ = net
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        return to_nhwc(stylize(self.network_, to_nchw(check_images(X))))

"""Classification harness: stratified split, training, per-epoch top-1 validation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import _blob
from ._validation import ContractError, check_images, check_positive_int, to_nchw
from .augmentor import LabeledDataset
from .lossnet import verify_weights_file

logger = logging.getLogger(__name__)

BACKBONES = ("small_cnn", "vgg16_like", "vgg19_like")
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


class ClassifierDiverged(RuntimeError):
    def __init__(self, message, partial_run=None):
        super().__init__(message)
        self.partial_run = partial_run


@dataclass(frozen=True)
class ClassifierConfig:
    backbone: str = "small_cnn"
    pretrained: bool = False
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    input_size: int = 32
    weights_path: str | None = None
    weights_manifest: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ContractError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.input_size, "input_size", minimum=32)
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.pretrained and self.backbone == "small_cnn":
            raise ContractError("small_cnn has no pretrained weights")
        if self.pretrained and not self.weights_path:
            raise ContractError("pretrained=True needs weights_path")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ClassifierRun:
    config: ClassifierConfig
    per_epoch_val_accuracy: list[float]
    best_val_accuracy: float = field(init=False)
    best_epoch: int = field(init=False)
    wall_time_s: float = 0.0
    run_dir: Path | None = None
    estimator: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        accs = [float(a) for a in self.per_epoch_val_accuracy]
        if not accs or any(not 0.0 <= a <= 1.0 for a in accs):
            raise ContractError(f"per-epoch accuracies must be non-empty and in [0, 1]: {accs}")
        self.per_epoch_val_accuracy = accs
        self.best_val_accuracy = max(accs)
        self.best_epoch = accs.index(self.best_val_accuracy) + 1


def split_dataset(dataset: LabeledDataset, train_fraction: float = 0.7, seed: int = 0):
    """Stratified split: each class contributes ``round(fraction * n_c)`` train items.

    Rounding is half-up. Both halves keep the dataset's lexicographic order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c, name in enumerate(dataset.classes):
        idx = [i for i, (_, ci) in enumerate(dataset.items) if ci == c]
        if len(idx) < 2:
            raise ContractError(f"class {name!r} has {len(idx)} item(s); a split needs at least 2")
        n_train = math.floor(train_fraction * len(idx) + 0.5)
        perm = rng.permutation(len(idx))
        train_idx += [idx[j] for j in perm[:n_train]]
        val_idx += [idx[j] for j in perm[n_train:]]
    return dataset.subset(train_idx), dataset.subset(val_idx)


def top1_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ContractError(f"predictions {predictions.shape} and labels {labels.shape} must be equal-length 1-D")
    if len(labels) == 0:
        raise ContractError("top1_accuracy needs at least one prediction")
    return float(np.mean(predictions == labels))


class SmallCNN(nn.Module):
    """Three conv/BN/ReLU/pool blocks and a linear head."""

    def __init__(self, n_classes: int, widths=(16, 32, 64)):
        super().__init__()
        layers, in_ch = [], 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(2)]
            in_ch = w
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(in_ch, n_classes)

    def forward(self, x):
        return self.head(self.features(x))


class VGGClassifier(nn.Module):
    """VGG trunk, global average pool and a linear head.

    ``batch_norm`` selects the ``vgg*_bn`` layout; the plain layout does not
    train from scratch at toy scale and is kept for loading pretrained trunks.
    """

    def __init__(self, variant: str, n_classes: int, batch_norm: bool = False):
        super().__init__()
        trunk = getattr(torchvision.models, f"{variant}_bn" if batch_norm else variant)(weights=None).features
        self.features = nn.Sequential(trunk, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(512, n_classes)

    def forward(self, x):
        return self.head(self.features(x))


def make_model(cfg: ClassifierConfig, n_classes: int) -> nn.Module:
    """Build the classifier; the head starts at zero so output units are interchangeable."""
    if cfg.backbone == "small_cnn":
        model = SmallCNN(n_classes)
    else:
        model = VGGClassifier(cfg.backbone.removesuffix("_like"), n_classes, batch_norm=not cfg.pretrained)
        if cfg.pretrained:
            verify_weights_file(cfg.weights_path, cfg.weights_manifest)
            state = torch.load(cfg.weights_path, map_location="cpu", weights_only=True)
            trunk = {k.removeprefix("features."): v for k, v in state.items() if k.startswith("features.")}
            model.features[0].load_state_dict(trunk)
            for p in model.features.parameters():
                p.requires_grad_(False)
    nn.init.zeros_(model.head.weight)
    nn.init.zeros_(model.head.bias)
    return model


def _prepare(X: np.ndarray, size: int) -> torch.Tensor:
    t = to_nchw(X) / 255.0
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return (t - _MEAN) / _STD


class ImageClassifier(ClassifierMixin, BaseEstimator):
    """Estimator over ``(n, H, W, 3)`` 0-255 image arrays.

    ``fit`` accepts ``eval_set=(X_val, y_val)``; validation top-1 accuracy is
    recorded after every epoch and the weights of the best epoch are kept.
    """

    def __init__(
        self,
        backbone="small_cnn",
        pretrained=False,
        epochs=10,
        batch_size=32,
        learning_rate=1e-3,
        seed=0,
        input_size=32,
        weights_path=None,
        weights_manifest=None,
    ):
        self.backbone = backbone
        self.pretrained = pretrained
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.input_size = input_size
        self.weights_path = weights_path
        self.weights_manifest = weights_manifest

    def _config(self) -> ClassifierConfig:
        return ClassifierConfig(**self.get_params())

    def fit(self, X, y, eval_set=None):
        cfg = self._config()
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ContractError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = np.unique(y)
        y_idx = torch.from_numpy(np.searchsorted(self.classes_, y)).long()
        xt = _prepare(X, cfg.input_size)
        if eval_set is not None:
            Xv, yv = check_images(eval_set[0], name="X_val"), np.asarray(eval_set[1])
            if not np.isin(yv, self.classes_).all():
                raise ContractError("validation labels include classes absent from training")
            xv = _prepare(Xv, cfg.input_size)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            model = make_model(cfg, len(self.classes_))
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        rng = np.random.default_rng(cfg.seed)
        self.per_epoch_val_accuracy_, self.train_loss_ = [], []
        best_acc, best_state = -1.0, None
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            losses = []
            order = torch.from_numpy(rng.permutation(len(xt)))
            for start in range(0, len(xt), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss = F.cross_entropy(model(xt[idx]), y_idx[idx])
                if not torch.isfinite(loss):
                    self.model_ = model
                    raise ClassifierDiverged(f"non-finite training loss in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            self.train_loss_.append(float(np.mean(losses)))
            if eval_set is not None:
                self.model_ = model
                acc = top1_accuracy(self._predict_tensor(xv), yv)
                self.per_epoch_val_accuracy_.append(acc)
                logger.info("epoch %d loss %.4f val top-1 %.4f", epoch, self.train_loss_[-1], acc)
                if acc > best_acc:
                    best_acc, best_state = acc, {k: v.clone() for k, v in model.state_dict().items()}
        if best_state is not None:
            model.load_state_dict(best_state)
            self.best_val_accuracy_ = best_acc
            self.best_epoch_ = self.per_epoch_val_accuracy_.index(best_acc) + 1
        model.eval()
        self.model_ = model
        return self

    def _logits(self, xt: torch.Tensor) -> torch.Tensor:
        self.model_.eval()
        with torch.no_grad():
            return torch.cat([self.model_(xt[i : i + 256]) for i in range(0, len(xt), 256)])

    def _predict_tensor(self, xt):
        return self.classes_[self._logits(xt).argmax(1).numpy()]

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return torch.softmax(self._logits(_prepare(check_images(X), self.input_size)), 1).numpy()

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self._predict_tensor(_prepare(check_images(X), self.input_size))

    def score(self, X, y, sample_weight=None):
        return top1_accuracy(self.predict(X), y)


def load_arrays(dataset: LabeledDataset, size: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([dataset.load(i, size) for i in range(len(dataset))])
    return X, np.asarray(dataset.labels)


def train_classifier(train: LabeledDataset, val: LabeledDataset, cfg: ClassifierConfig, run_dir=None) -> ClassifierRun:
    """Train on ``train``, score top-1 on ``val`` every epoch.

    With ``run_dir`` set, writes ``config.json``, ``trace.csv`` and the best
    epoch's weights as ``best.ckpt``.
    """
    if tuple(train.classes) != tuple(val.classes):
        raise ContractError(f"train classes {train.classes} differ from val classes {val.classes}")
    impure = sorted({p for p in val.provenance if p != "original"})
    if impure:
        raise ContractError(f"validation set contains augmented images: {impure}")
    t0 = time.perf_counter()
    X, y = load_arrays(train, cfg.input_size)
    Xv, yv = load_arrays(val, cfg.input_size)
    est = ImageClassifier(**cfg.to_dict())
    try:
        est.fit(X, y, eval_set=(Xv, yv))
    except ClassifierDiverged as exc:
        accs = getattr(est, "per_epoch_val_accuracy_", [])
        exc.partial_run = ClassifierRun(cfg, accs) if accs else None
        raise
    run = ClassifierRun(cfg, est.per_epoch_val_accuracy_, time.perf_counter() - t0)
    run.estimator = est
    if run_dir is not None:
        run.run_dir = write_run_dir(run_dir, run, est)
    return run


def write_run_dir(run_dir, run: ClassifierRun, est: ImageClassifier) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _blob.atomic_write_bytes(run_dir / "config.json", (json.dumps(run.config.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    with open(run_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_accuracy"))
        for e, (loss, acc) in enumerate(zip(est.train_loss_, run.per_epoch_val_accuracy), start=1):
            w.writerow((e, repr(loss), repr(acc)))
    header = {
        "format_version": 1,
        "kind": "classifier",
        "config": run.config.to_dict(),
        "classes": [int(c) for c in est.classes_],
        "best_epoch": run.best_epoch,
        "best_val_accuracy": run.best_val_accuracy,
    }
    _blob.write_container(run_dir / "best.ckpt", header, est.model_.state_dict())
    return run_dir

"""Frozen VGG-style loss network: preprocessing, layer taps and style targets."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from ._validation import ContractError
from .losses import FeatureMap, GramMatrix, StyleTarget, gram_matrix

logger = logging.getLogger(__name__)

MIN_INPUT_SIZE = 32

_VGG_BLOCKS = {
    "vgg16": (2, 2, 3, 3, 3),
    "vgg19": (2, 2, 4, 4, 4),
}
_BLOCK_WIDTHS = (64, 128, 256, 512, 512)

DEFAULT_CONTENT_LAYERS = ("relu2_2",)
DEFAULT_STYLE_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")


class WeightsError(RuntimeError):
    """Backbone weights file is missing, unlisted or does not match the manifest."""


@dataclass(frozen=True)
class PreprocessSpec:
    channel_means: tuple[float, float, float] = (123.68, 116.779, 103.939)
    channel_order: str = "RGB"
    scale: float = 1.0

    def __post_init__(self):
        if len(self.channel_means) != 3 or not all(math.isfinite(m) for m in self.channel_means):
            raise ContractError(f"channel_means must be 3 finite values, got {self.channel_means}")
        if self.channel_order not in ("RGB", "BGR"):
            raise ContractError(f"channel_order must be RGB or BGR, got {self.channel_order!r}")
        if not self.scale > 0:
            raise ContractError(f"scale must be > 0, got {self.scale}")

    def apply(self, image: torch.Tensor) -> torch.Tensor:
        if self.channel_order == "BGR":
            image = image.flip(-3)
            means = self.channel_means[::-1]
        else:
            means = self.channel_means
        mean = torch.tensor(means, dtype=image.dtype, device=image.device).view(3, 1, 1)
        return (image - mean) * self.scale

    def to_dict(self) -> dict:
        return {"channel_means": list(self.channel_means), "channel_order": self.channel_order, "scale": self.scale}


@dataclass(frozen=True)
class LayerInfo:
    index: int
    channels: int
    stride: int


def vgg_layer_table(variant: str = "vgg16") -> dict[str, LayerInfo]:
    """Tappable layer ids of a VGG variant, in torchvision ``features`` index order."""
    if variant not in _VGG_BLOCKS:
        raise ContractError(f"unknown backbone {variant!r}; choose from {sorted(_VGG_BLOCKS)}")
    table = {}
    index, stride = 0, 1
    for block, (n_convs, width) in enumerate(zip(_VGG_BLOCKS[variant], _BLOCK_WIDTHS), start=1):
        for k in range(1, n_convs + 1):
            table[f"conv{block}_{k}"] = LayerInfo(index, width, stride)
            table[f"relu{block}_{k}"] = LayerInfo(index + 1, width, stride)
            index += 2
        stride *= 2
        table[f"pool{block}"] = LayerInfo(index, width, stride)
        index += 1
    return table


def build_vgg_features(variant: str = "vgg16") -> nn.Sequential:
    """Convolutional trunk laid out exactly like torchvision's ``vgg.features``.

    Pooling uses ``ceil_mode`` so a layer at cumulative stride ``s`` has
    ``ceil(H/s) * ceil(W/s)`` positions.
    """
    layers: list[nn.Module] = []
    in_ch = 3
    for n_convs, width in zip(_VGG_BLOCKS[variant], _BLOCK_WIDTHS):
        for _ in range(n_convs):
            layers += [nn.Conv2d(in_ch, width, kernel_size=3, padding=1), nn.ReLU(inplace=False)]
            in_ch = width
        layers.append(nn.MaxPool2d(kernel_size=2, stride=2, ceil_mode=True))
    return nn.Sequential(*layers)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        data = json.load(fh)
    return list(data.get("files", []))


def manifest_entry(path) -> dict:
    """Manifest row ``{path, bytes, sha256}`` for a weights file on disk."""
    p = Path(path)
    return {"path": p.name, "bytes": p.stat().st_size, "sha256": file_sha256(p)}


def verify_weights_file(path, manifest_path) -> dict:
    """Check ``path`` against its manifest row (matched by file name)."""
    p = Path(path)
    if not p.is_file():
        raise WeightsError(f"weights file not found: {p}")
    if manifest_path is None or not Path(manifest_path).is_file():
        raise WeightsError(f"weights manifest not found: {manifest_path}")
    rows = [r for r in read_manifest(manifest_path) if Path(r["path"]).name == p.name]
    if not rows:
        raise WeightsError(f"{p.name} is not listed in weights manifest {manifest_path}")
    row = rows[0]
    size = p.stat().st_size
    if size != row["bytes"]:
        raise WeightsError(f"{p.name}: size {size} does not match manifest ({row['bytes']})")
    digest = file_sha256(p)
    if digest != row["sha256"]:
        raise WeightsError(f"{p.name}: sha256 {digest} does not match manifest ({row['sha256']})")
    return row


def _seeded_init(module: nn.Sequential, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in module:
        if isinstance(m, nn.Conv2d):
            fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
                m.bias.zero_()


def state_dict_sha256(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class FeatureMapSet:
    maps: dict[str, FeatureMap]
    source_shape: tuple[int, int]

    def __getitem__(self, layer_id: str) -> FeatureMap:
        return self.maps[layer_id]

    def dims(self, layer_ids: Sequence[str]) -> list[tuple[int, int]]:
        return [(self.maps[l].n_channels, self.maps[l].n_positions) for l in layer_ids]


class LossNetwork:
    """A frozen VGG trunk that only ever runs forward.

    Without ``weights_path`` the trunk is initialized from ``init_seed``
    (He-normal, zero bias). That stands in for ImageNet weights when none are
    available locally; ``backbone_id`` records which case applies.
    """

    def __init__(
        self,
        variant: str = "vgg16",
        content_layers: Sequence[str] = DEFAULT_CONTENT_LAYERS,
        style_layers: Sequence[str] = DEFAULT_STYLE_LAYERS,
        preprocessing: PreprocessSpec | None = None,
        weights_path=None,
        manifest_path=None,
        init_seed: int = 0,
    ):
        self.variant = variant
        self.layer_table = vgg_layer_table(variant)
        self.content_layers = tuple(content_layers)
        self.style_layers = tuple(style_layers)
        for lid in self.content_layers + self.style_layers:
            self._layer(lid)
        self.preprocessing = preprocessing or PreprocessSpec()
        features = build_vgg_features(variant)
        if weights_path is not None:
            verify_weights_file(weights_path, manifest_path)
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier.")}
            features.load_state_dict(state)
            self.backbone_id = f"{variant}:{Path(weights_path).name}"
        else:
            _seeded_init(features, init_seed)
            self.backbone_id = f"{variant}:random-init-seed{init_seed}"
        features.eval()
        for p in features.parameters():
            p.requires_grad_(False)
        self._features = features
        self.weights_hash = state_dict_sha256(features)

    def _layer(self, layer_id: str) -> LayerInfo:
        try:
            return self.layer_table[layer_id]
        except KeyError:
            raise ContractError(f"unknown layer id {layer_id!r} for {self.variant}") from None

    def compute_weights_hash(self) -> str:
        return state_dict_sha256(self._features)

    def layer_channels(self, layer_id: str) -> int:
        return self._layer(layer_id).channels

    def layer_stride(self, layer_id: str) -> int:
        return self._layer(layer_id).stride

    def describe(self) -> dict:
        return {
            "backbone_id": self.backbone_id,
            "weights_sha256": self.weights_hash,
            "content_layers": list(self.content_layers),
            "style_layers": list(self.style_layers),
            "preprocessing": self.preprocessing.to_dict(),
        }


def extract_features(net: LossNetwork, image: torch.Tensor, layers: Sequence[str]) -> FeatureMapSet:
    """Run ``image`` (``(B, 3, H, W)`` or ``(3, H, W)``, RGB 0-255) through the trunk.

    Gradients flow back to ``image`` when it requires them.
    """
    if image.dim() not in (3, 4) or image.shape[-3] != 3:
        raise ContractError(f"expected (B, 3, H, W) or (3, H, W) image, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
        raise ContractError(f"image {h}x{w} is smaller than the minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
    wanted = {lid: net._layer(lid).index for lid in layers}
    x = net.preprocessing.apply(image.float())
    out: dict[str, FeatureMap] = {}
    by_index: dict[int, list[str]] = {}
    for lid, idx in wanted.items():
        by_index.setdefault(idx, []).append(lid)
    last = max(wanted.values(), default=-1)
    for idx, module in enumerate(net._features):
        if idx > last:
            break
        x = module(x)
        for lid in by_index.get(idx, ()):
            out[lid] = FeatureMap.from_activation(x, lid)
    return FeatureMapSet({lid: out[lid] for lid in layers}, (int(h), int(w)))


_target_cache: dict[tuple, StyleTarget] = {}
_cache_lock = threading.Lock()


def _image_digest(image: torch.Tensor) -> str:
    t = image.detach().cpu().float().contiguous()
    return hashlib.sha256(str(tuple(t.shape)).encode() + t.numpy().tobytes()).hexdigest()


def compute_style_target(
    net: LossNetwork,
    style_image: torch.Tensor,
    layer_weights: Sequence[float] | None = None,
    use_cache: bool = True,
) -> StyleTarget:
    """Gram matrices of ``style_image`` at the network's style layers.

    Results are memoized per (image bytes, weights hash, layers, layer weights).
    """
    layers = net.style_layers
    weights = tuple(layer_weights) if layer_weights is not None else tuple([1.0 / len(layers)] * len(layers))
    key = (_image_digest(style_image), net.weights_hash, net.preprocessing, layers, weights)
    if use_cache:
        with _cache_lock:
            hit = _target_cache.get(key)
        if hit is not None:
            return hit
    image = style_image if style_image.dim() == 4 else style_image.unsqueeze(0)
    if image.shape[0] != 1:
        raise ContractError(f"style image must be a single image, got batch of {image.shape[0]}")
    with torch.no_grad():
        feats = extract_features(net, image, layers)
    grams = tuple(GramMatrix(gram_matrix(feats[l]).data[0], l) for l in layers)
    target = StyleTarget(grams, weights)
    if use_cache:
        with _cache_lock:
            _target_cache[key] = target
    return target


def clear_style_cache() -> None:
    with _cache_lock:
        _target_cache.clear()

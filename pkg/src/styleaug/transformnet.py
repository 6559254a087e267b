"""Feed-forward image transformation network and its checkpoint format."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import _blob
from ._blob import CheckpointCorruptError, CheckpointError, CheckpointHashError, CheckpointVersionError
from ._validation import ContractError

FORMAT_VERSION = 1

__all__ = [
    "TransformNetConfig",
    "TransformNetwork",
    "StyleModelCheckpoint",
    "build",
    "stylize",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointHashError",
    "CheckpointCorruptError",
]


@dataclass(frozen=True)
class TransformNetConfig:
    num_residual_blocks: int = 5
    base_channels: int = 32
    downsample_factor: int = 4
    norm: str = "instance"
    output_activation: str = "scaled_tanh"

    def __post_init__(self):
        for name in ("num_residual_blocks", "base_channels", "downsample_factor"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")
        df = self.downsample_factor
        if df & (df - 1):
            raise ContractError(f"downsample_factor must be a power of 2, got {df}")
        if self.norm != "instance":
            raise ContractError(f"norm must be 'instance', got {self.norm!r}")
        if self.output_activation != "scaled_tanh":
            raise ContractError(f"output_activation must be 'scaled_tanh', got {self.output_activation!r}")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformNetConfig":
        return cls(**d)


class ConvLayer(nn.Module):
    """Reflection-padded convolution."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1):
        super().__init__()
        self.pad = nn.ReflectionPad2d(kernel_size // 2)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride)

    def forward(self, x):
        return self.conv(self.pad(x))


class ConvNormReLU(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.conv = ConvLayer(in_ch, out_ch, kernel_size, stride)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = ConvLayer(channels, channels, 3)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = ConvLayer(channels, channels, 3)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class TransformNetwork(nn.Module):
    """Encoder, residual trunk, nearest-upsampling decoder, scaled tanh.

    Takes and returns ``(B, 3, H, W)`` images in 0-255; ``H`` and ``W`` must be
    multiples of ``config.downsample_factor`` (``stylize`` pads for you).
    """

    def __init__(self, config: TransformNetConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        down = [ConvNormReLU(3, c, 9)]
        for _ in range(config.n_stages):
            down.append(ConvNormReLU(c, 2 * c, 3, stride=2))
            c *= 2
        self.down = nn.Sequential(*down)
        self.res = nn.Sequential(*[ResidualBlock(c) for _ in range(config.num_residual_blocks)])
        up = []
        for _ in range(config.n_stages):
            up.append(ConvNormReLU(c, c // 2, 3, upsample=True))
            c //= 2
        self.up = nn.Sequential(*up)
        self.out = ConvLayer(c, 3, 9)

    def forward(self, x):
        h = self.down(x / 127.5 - 1.0)
        h = self.up(self.res(h))
        return 127.5 * (torch.tanh(self.out(h)) + 1.0)

    def conv_count(self) -> int:
        return sum(isinstance(m, nn.Conv2d) for m in self.modules())


def build(config: TransformNetConfig, seed: int = 0) -> TransformNetwork:
    """Construct a network whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TransformNetwork(config)


def _pad_mode(h: int, w: int, ph: int, pw: int) -> str:
    return "reflect" if ph < h and pw < w else "replicate"


def pad_to_multiple(image: torch.Tensor, factor: int) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    h, w = image.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    pads = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
    if ph == 0 and pw == 0:
        return image, pads
    return F.pad(image, pads, mode=_pad_mode(h, w, max(pads[2:]), max(pads[:2]))), pads


def stylize(net: TransformNetwork, image: torch.Tensor) -> torch.Tensor:
    """One forward pass; output has the input's spatial size and lies in [0, 255]."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    if x.dim() != 4 or x.shape[1] != 3:
        raise ContractError(f"expected (B, 3, H, W) or (3, H, W) image, got {tuple(image.shape)}")
    x, (left, right, top, bottom) = pad_to_multiple(x.float(), net.config.downsample_factor)
    with torch.no_grad():
        y = net(x)
    y = y[..., top : y.shape[-2] - bottom, left : y.shape[-1] - right]
    return y[0] if single else y


@dataclass
class StyleModelCheckpoint:
    config: TransformNetConfig
    state: dict[str, torch.Tensor]
    style_name: str
    training_meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    trace: object = field(default=None, repr=False, compare=False)

    def network(self) -> TransformNetwork:
        net = TransformNetwork(self.config)
        net.load_state_dict(self.state)
        net.eval()
        return net


def save_checkpoint(net: TransformNetwork, meta: dict, path, style_name: str | None = None) -> Path:
    """Write ``net`` plus its training metadata. The write is atomic."""
    style_name = style_name or meta.get("style_name") or Path(path).stem
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "transform_net",
        "config": net.config.to_dict(),
        "style_name": style_name,
        "training_meta": meta,
    }
    _blob.write_container(path, header, net.state_dict())
    return Path(path)


def read_checkpoint(path) -> StyleModelCheckpoint:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, state = _blob.read_container(path, FORMAT_VERSION)
    if header.get("kind") != "transform_net":
        raise CheckpointCorruptError(f"{path}: not a transform-network checkpoint (kind={header.get('kind')!r})")
    return StyleModelCheckpoint(
        TransformNetConfig.from_dict(header["config"]), state, header["style_name"], header["training_meta"]
    )


def load_checkpoint(path) -> tuple[TransformNetwork, dict]:
    """Return the network and its metadata (``style_name`` included)."""
    ckpt = read_checkpoint(path)
    try:
        net = ckpt.network()
    except RuntimeError as exc:
        raise CheckpointCorruptError(f"{path}: weights do not fit the stored config ({exc})") from None
    return net, dict(ckpt.training_meta, style_name=ckpt.style_name)

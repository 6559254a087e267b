"""Image file IO and array/tensor conversion.

Arrays are ``(H, W, 3)`` RGB, tensors are ``(3, H, W)``; both hold 0-255 values.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from ._blob import atomic_write_bytes

IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff"})


class ImageDecodeError(ValueError):
    pass


def is_image_path(path) -> bool:
    return Path(path).suffix.lower() in IMAGE_EXTENSIONS


def load_image(path, size: int | tuple[int, int] | None = None) -> np.ndarray:
    """Decode to uint8 RGB. ``size`` (int for square, or ``(W, H)``) resizes bilinearly."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None:
                wh = (size, size) if isinstance(size, int) else tuple(size)
                im = im.resize(wh, Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from None


def encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(array)).save(buf, format="PNG")
    return buf.getvalue()


def save_image(path, array: np.ndarray) -> None:
    """Write atomically; PNG unless the suffix asks for JPEG."""
    path = Path(path)
    if path.suffix.lower() in (".jpg", ".jpeg"):
        buf = io.BytesIO()
        Image.fromarray(to_uint8(array)).save(buf, format="JPEG", quality=95)
        atomic_write_bytes(path, buf.getvalue())
    else:
        atomic_write_bytes(path, encode_png(array))


def to_uint8(array) -> np.ndarray:
    a = np.asarray(array)
    if a.dtype == np.uint8:
        return a
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def to_tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(array, dtype=np.float32).transpose(2, 0, 1)))


def to_array(tensor: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` float tensor -> ``(H, W, 3)`` uint8 array."""
    return to_uint8(tensor.detach().cpu().permute(1, 2, 0).numpy())

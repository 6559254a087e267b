"""Synthetic desk-scale data: a 3-class shape dataset and procedural style images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .images import save_image

TOY_CLASSES = ("circle", "square", "triangle")
STYLE_NAMES = ("Snow", "RainPrincess", "Scream", "Wave", "Sunflower", "LAMuse", "Udnie", "YourName")


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.18, 0.30) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= 0.85 * r) & (np.abs(xx - cx) <= 0.85 * r)
    # isosceles triangle with its apex up
    top, bottom = cy - r, cy + r
    half = (yy - top) / (bottom - top) * r
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def shape_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One noisy RGB image of a bright ``kind`` on a random dark background."""
    bg = rng.uniform(0, 100, size=3)
    fg = rng.uniform(155, 255, size=3)
    mask = _shape_mask(kind, size, rng)[..., None]
    img = np.where(mask, fg, bg) + rng.normal(0, 40, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_shapes_dataset(out_dir, per_class: int = 60, size: int = 32, seed: int = 0) -> Path:
    """Write ``out_dir/<class>/<class>_NNN.png`` for the three toy classes."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    for kind in TOY_CLASSES:
        (out_dir / kind).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            save_image(out_dir / kind / f"{kind}_{i:03d}.png", shape_image(kind, size, rng))
    return out_dir


def style_image(name: str, size: int = 64) -> np.ndarray:
    """A deterministic procedural texture standing in for a named artwork."""
    k = STYLE_NAMES.index(name) if name in STYLE_NAMES else sum(map(ord, name)) % 97
    rng = np.random.default_rng(1000 + k)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    freq = rng.uniform(2, 9, size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    palette = rng.uniform(0, 255, size=(3, 3))
    img = np.zeros((size, size, 3))
    for j in range(3):
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (freq[j, 0] * xx + freq[j, 1] * yy) + phase[j])
        img += wave[..., None] * palette[j] / 1.5
    img += rng.normal(0, 10, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_style_images(out_dir, names=STYLE_NAMES, size: int = 64) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in names:
        paths[name] = out_dir / f"{name}.png"
        save_image(paths[name], style_image(name, size))
    return paths

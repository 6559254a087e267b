"""Materialized dataset augmentation: flips, rotations and stylized copies."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.ndimage

from ._blob import atomic_write_bytes, canonical_json
from ._validation import ContractError
from .images import ImageDecodeError, is_image_path, load_image, save_image, to_array, to_tensor
from .transformnet import load_checkpoint, stylize

logger = logging.getLogger(__name__)

TRADITIONAL = ("flip_horizontal", "rotation")
DEFAULT_ANGLES = (90, 180, 270)
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("output_path", "class", "provenance", "source_path")


@dataclass(frozen=True)
class LabeledDataset:
    """Directory-per-class image dataset; ``items`` are sorted ``(relative_path, class_index)``."""

    root_dir: Path
    classes: tuple[str, ...]
    items: tuple[tuple[str, int], ...]
    provenance: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "root_dir", Path(self.root_dir))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "items", tuple((str(p), int(c)) for p, c in self.items))
        if self.provenance is None:
            object.__setattr__(self, "provenance", ("original",) * len(self.items))
        else:
            object.__setattr__(self, "provenance", tuple(self.provenance))
        if len(self.provenance) != len(self.items):
            raise ContractError("provenance must have one entry per item")
        for path, c in self.items:
            if not 0 <= c < len(self.classes):
                raise ContractError(f"class index {c} out of range for {path}")

    def __len__(self):
        return len(self.items)

    @property
    def labels(self) -> list[int]:
        return [c for _, c in self.items]

    def path(self, i: int) -> Path:
        return self.root_dir / self.items[i][0]

    def load(self, i: int, size=None) -> np.ndarray:
        return load_image(self.path(i), size)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = sorted(indices, key=lambda i: self.items[i][0])
        return LabeledDataset(
            self.root_dir, self.classes, [self.items[i] for i in idx], [self.provenance[i] for i in idx]
        )

    def class_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for _, c in self.items:
            counts[self.classes[c]] += 1
        return counts

    def digest(self) -> str:
        """Content hash over class names, item paths, labels and file bytes."""
        h = hashlib.sha256()
        h.update(canonical_json(list(self.classes)).encode())
        for (path, c), prov in zip(self.items, self.provenance):
            h.update(f"{path}\0{c}\0{prov}\0".encode())
            h.update(hashlib.sha256((self.root_dir / path).read_bytes()).digest())
        return h.hexdigest()


def _decodes(path: Path) -> bool:
    try:
        load_image(path)
    except ImageDecodeError as exc:
        warnings.warn(f"skipping undecodable image: {exc}", stacklevel=3)
        return False
    return True


def scan_dataset(root) -> LabeledDataset:
    """List ``root/<class>/<image>`` files; undecodable files are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise ContractError(f"dataset root not found: {root}")
    items: list[tuple[str, str]] = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(class_dir.rglob("*")):
            if f.is_file() and is_image_path(f) and _decodes(f):
                items.append((f.relative_to(root).as_posix(), class_dir.name))
    classes = sorted({c for _, c in items})
    if not items:
        raise ContractError(f"dataset root {root} has no class subdirectory with images")
    index = {c: i for i, c in enumerate(classes)}
    items.sort()
    return LabeledDataset(root, classes, [(p, index[c]) for p, c in items])


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    """Mirror columns of an ``(H, W)`` or ``(H, W, C)`` array."""
    return np.ascontiguousarray(np.asarray(image)[:, ::-1])


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Counter-clockwise rotation about the center, same output size.

    Right angles on square images (and 180 on any image) are exact index
    permutations; everything else is bilinear with reflected borders.
    """
    a = np.asarray(image)
    angle = float(angle_deg) % 360.0
    if angle == 0:
        return a.copy()
    quarter = angle / 90.0
    if quarter.is_integer() and (a.shape[0] == a.shape[1] or int(quarter) == 2):
        return np.ascontiguousarray(np.rot90(a, k=int(quarter)))
    out = scipy.ndimage.rotate(a.astype(np.float64), angle, reshape=False, order=1, mode="reflect")
    if a.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(a.dtype)


@dataclass(frozen=True)
class AugmentPlan:
    traditional: frozenset[str] = frozenset()
    rotation_angles: tuple[float, ...] = ()
    styles: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "traditional", frozenset(self.traditional))
        object.__setattr__(self, "rotation_angles", tuple(self.rotation_angles))
        object.__setattr__(self, "styles", tuple(str(s) for s in self.styles))
        unknown = self.traditional - set(TRADITIONAL)
        if unknown:
            raise ContractError(f"unknown traditional augmentations: {sorted(unknown)}")
        if ("rotation" in self.traditional) != bool(self.rotation_angles):
            raise ContractError("rotation_angles must be non-empty exactly when rotation is selected")

    @classmethod
    def from_labels(cls, traditional: Sequence[str] = (), angles=DEFAULT_ANGLES, styles=()) -> "AugmentPlan":
        trad = frozenset(traditional)
        return cls(trad, tuple(angles) if "rotation" in trad else (), tuple(styles))

    @property
    def expansions(self) -> int:
        return int("flip_horizontal" in self.traditional) + len(self.rotation_angles) + len(self.styles)

    def to_dict(self) -> dict:
        return {
            "traditional": sorted(self.traditional),
            "rotation_angles": list(self.rotation_angles),
            "styles": list(self.styles),
        }


def traditional_label(traditional) -> str:
    """Row label in the style of the result tables: None, Flipping, Rotation, FlippingRotation."""
    parts = []
    if "flip_horizontal" in traditional:
        parts.append("Flipping")
    if "rotation" in traditional:
        parts.append("Rotation")
    return "".join(parts) or "None"


@dataclass(frozen=True)
class ManifestRow:
    output_path: str
    class_index: int
    provenance: str
    source_path: str


@dataclass
class AugmentManifest:
    dataset_hash: str
    plan: AugmentPlan
    classes: tuple[str, ...]
    rows: list[ManifestRow] = field(default_factory=list)
    style_names: tuple[str, ...] = ()

    def to_csv_bytes(self) -> bytes:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in self.rows:
            w.writerow([r.output_path, self.classes[r.class_index], r.provenance, r.source_path])
        return buf.getvalue().encode()

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        atomic_write_bytes(out_dir / MANIFEST_NAME, self.to_csv_bytes())
        meta = {
            "dataset_hash": self.dataset_hash,
            "plan": self.plan.to_dict(),
            "classes": list(self.classes),
            "style_names": list(self.style_names),
        }
        atomic_write_bytes(out_dir / "manifest.json", (canonical_json(meta) + "\n").encode())
        return out_dir / MANIFEST_NAME

    @classmethod
    def read(cls, out_dir) -> "AugmentManifest":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "manifest.json").read_text())
        classes = tuple(meta["classes"])
        index = {c: i for i, c in enumerate(classes)}
        with open(out_dir / MANIFEST_NAME, newline="") as fh:
            rows = [
                ManifestRow(r["output_path"], index[r["class"]], r["provenance"], r["source_path"])
                for r in csv.DictReader(fh)
            ]
        p = meta["plan"]
        plan = AugmentPlan(frozenset(p["traditional"]), tuple(p["rotation_angles"]), tuple(p["styles"]))
        return cls(meta["dataset_hash"], plan, classes, rows, tuple(meta.get("style_names", ())))

    def to_dataset(self, out_dir) -> LabeledDataset:
        rows = sorted(self.rows, key=lambda r: r.output_path)
        return LabeledDataset(
            out_dir, self.classes, [(r.output_path, r.class_index) for r in rows], [r.provenance for r in rows]
        )


def _angle_token(angle) -> str:
    return f"{angle:g}".replace(".", "p").replace("-", "m")


def _load_styles(paths: Sequence[str]):
    nets = []
    for p in paths:
        try:
            net, meta = load_checkpoint(p)
        except Exception as exc:
            raise ContractError(f"cannot load style checkpoint {p}: {exc}") from exc
        nets.append((meta["style_name"], net))
    names = [n for n, _ in nets]
    if len(set(names)) != len(names):
        raise ContractError(f"style checkpoints share a style name: {names}")
    return nets


def build_augmented(dataset: LabeledDataset, plan: AugmentPlan, out_dir, jobs: int = 1, overwrite: bool = False) -> AugmentManifest:
    """Write originals plus every planned variant under ``out_dir/<class>/``.

    Pass only the training split here; validation images stay untouched. All
    style checkpoints are loaded before anything is written, and a failure
    mid-way removes whatever was already written.
    """
    out_dir = Path(out_dir)
    styles = _load_styles(plan.styles)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            raise ContractError(f"output directory {out_dir} is not empty")
        if not (out_dir / MANIFEST_NAME).exists():
            raise ContractError(f"refusing to clear {out_dir}: it is not an augmentation output")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seen: dict[str, str] = {}
    for rel, _ in dataset.items:
        key = (Path(rel).parent / Path(rel).stem).as_posix()
        if key in seen:
            raise ContractError(f"{rel} and {seen[key]} would map to the same output name")
        seen[key] = rel

    written: list[Path] = []

    def variants(image: np.ndarray):
        yield "original", "original", image
        if "flip_horizontal" in plan.traditional:
            yield "flip", "flip", flip_horizontal(image)
        for angle in plan.rotation_angles:
            yield f"rotation({angle:g})", f"rot{_angle_token(angle)}", rotate(image, angle)
        for name, net in styles:
            yield f"style({name})", f"style-{name}", to_array(stylize(net, to_tensor(image)))

    def process(i: int) -> list[ManifestRow]:
        rel, c = dataset.items[i]
        image = dataset.load(i)
        stem = Path(rel).stem
        rows = []
        for prov, token, arr in variants(image):
            out_rel = f"{dataset.classes[c]}/{stem}__{token}.png"
            target = out_dir / out_rel
            target.parent.mkdir(parents=True, exist_ok=True)
            save_image(target, arr)
            written.append(target)
            rows.append(ManifestRow(out_rel, c, prov, rel))
        return rows

    try:
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            per_item = list(pool.map(process, range(len(dataset))))
        manifest = AugmentManifest(
            dataset.digest(), plan, dataset.classes, [r for rows in per_item for r in rows], tuple(n for n, _ in styles)
        )
        manifest.write(out_dir)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        for name in (MANIFEST_NAME, "manifest.json"):
            (out_dir / name).unlink(missing_ok=True)
        raise
    expected = len(dataset) * (1 + plan.expansions)
    if len(manifest.rows) != expected:
        raise RuntimeError(f"manifest has {len(manifest.rows)} rows, expected {expected}")
    logger.info("wrote %d images to %s", len(manifest.rows), out_dir)
    return manifest

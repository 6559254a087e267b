"""Declarative experiment matrices, an append-only results ledger, and table reports."""

from __future__ import annotations

import csv
import fcntl
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from ._blob import canonical_json
from ._validation import ContractError
from .augmentor import DEFAULT_ANGLES, AugmentManifest, AugmentPlan, build_augmented, scan_dataset, traditional_label
from .classify import ClassifierConfig, split_dataset, train_classifier
from .lossnet import file_sha256

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset_ref: str
    traditional: tuple[str, ...]
    styles: tuple[str, ...]
    classifier: ClassifierConfig
    seed: int
    style_paths: tuple[str, ...] = ()
    rotation_angles: tuple[float, ...] = DEFAULT_ANGLES
    train_fraction: float = 0.7
    split_seed: int = 0

    def plan(self) -> AugmentPlan:
        return AugmentPlan.from_labels(self.traditional, self.rotation_angles, self.style_paths)

    def hash_payload(self, dataset_hash: str) -> dict:
        return {
            "name": self.name,
            "dataset_hash": dataset_hash,
            "traditional": sorted(self.traditional),
            "rotation_angles": list(self.rotation_angles) if "rotation" in self.traditional else [],
            "styles": list(self.styles),
            "style_checkpoints": [file_sha256(p) for p in self.style_paths],
            "classifier": self.classifier.to_dict(),
            "seed": self.seed,
            "split": {"train_fraction": self.train_fraction, "seed": self.split_seed},
        }

    def config_hash(self, dataset_hash: str) -> str:
        return hashlib.sha256(canonical_json(self.hash_payload(dataset_hash)).encode()).hexdigest()


@dataclass(frozen=True)
class ResultRecord:
    name: str
    traditional: str
    styles: str
    backbone: str
    seed: int
    best_val_accuracy: float
    best_epoch: int
    per_epoch_val_accuracy: tuple[float, ...]
    dataset_hash: str
    config_hash: str
    timestamp: str
    toolkit_version: str

    def to_row(self) -> list[str]:
        return [
            self.name, self.traditional, self.styles, self.backbone, str(self.seed),
            repr(self.best_val_accuracy), str(self.best_epoch),
            ";".join(repr(a) for a in self.per_epoch_val_accuracy),
            self.dataset_hash, self.config_hash, self.timestamp, self.toolkit_version,
        ]

    @classmethod
    def from_row(cls, row: dict) -> "ResultRecord":
        return cls(
            row["name"], row["traditional"], row["styles"], row["backbone"], int(row["seed"]),
            float(row["best_val_accuracy"]), int(row["best_epoch"]),
            tuple(float(a) for a in row["per_epoch_val_accuracy"].split(";") if a),
            row["dataset_hash"], row["config_hash"], row["timestamp"], row["toolkit_version"],
        )


LEDGER_COLUMNS = tuple(f.name for f in fields(ResultRecord))


def _csv_line(values: Sequence[str]) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(values)
    return buf.getvalue().encode()


def _chain_path(ledger) -> Path:
    return Path(f"{ledger}.chain")


@contextmanager
def _locked(ledger):
    lock = Path(f"{ledger}.lock")
    lock.parent.mkdir(parents=True, exist_ok=True)
    with open(lock, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _complete_lines(data: bytes) -> list[bytes]:
    """Split on newlines, dropping a trailing fragment left by an interrupted write."""
    lines = data.split(b"\n")
    return [l + b"\n" for l in lines[:-1]]


def read_ledger(path) -> list[ResultRecord]:
    path = Path(path)
    if not path.exists():
        return []
    lines = _complete_lines(path.read_bytes())
    if not lines:
        return []
    reader = csv.DictReader(io.StringIO(b"".join(lines).decode()))
    return [ResultRecord.from_row(r) for r in reader]


def _repair_tail(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        keep = data.rfind(b"\n") + 1
        with open(path, "r+b") as fh:
            fh.truncate(keep)
        logger.warning("dropped an incomplete trailing ledger row in %s", path)


def append_record(ledger, record: ResultRecord) -> None:
    """Append one row and extend the hash chain, under an exclusive file lock."""
    ledger = Path(ledger)
    with _locked(ledger):
        ledger.parent.mkdir(parents=True, exist_ok=True)
        if ledger.exists():
            _repair_tail(ledger)
        chain = _chain_path(ledger)
        fd = os.open(ledger, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            if os.fstat(fd).st_size == 0:
                header = _csv_line(LEDGER_COLUMNS)
                os.write(fd, header)
            os.write(fd, _csv_line(record.to_row()))
            os.fsync(fd)
        finally:
            os.close(fd)
        _rebuild_chain(ledger, chain)


def _chain_hashes(lines: list[bytes]) -> list[str]:
    prev, out = "0" * 64, []
    for line in lines:
        prev = hashlib.sha256(prev.encode() + line).hexdigest()
        out.append(prev)
    return out


def _rebuild_chain(ledger: Path, chain: Path) -> None:
    lines = _complete_lines(ledger.read_bytes())[1:]
    existing = chain.read_text().split() if chain.exists() else []
    hashes = _chain_hashes(lines)
    if existing != hashes[: len(existing)]:
        raise RuntimeError(f"hash chain {chain} does not match ledger {ledger}; refusing to extend it")
    with open(chain, "a") as fh:
        for h in hashes[len(existing):]:
            fh.write(h + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def verify_ledger(ledger) -> bool:
    """True when every ledger row matches its entry in the sidecar hash chain."""
    ledger = Path(ledger)
    lines = _complete_lines(ledger.read_bytes())[1:] if ledger.exists() else []
    chain = _chain_path(ledger)
    stored = chain.read_text().split() if chain.exists() else []
    return stored == _chain_hashes(lines)


def _timestamp(deterministic: bool) -> str:
    if deterministic:
        epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
        return datetime.fromtimestamp(epoch, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _toolkit_version() -> str:
    from . import __version__

    return __version__


def load_matrix(matrix_file) -> list[ExperimentConfig]:
    """Expand a matrix file into one ``ExperimentConfig`` per (experiment, seed).

    Relative paths resolve against the matrix file's directory. Style names
    that have no checkpoint entry are kept; ``run_matrix`` fails those rows.
    """
    matrix_file = Path(matrix_file)
    spec = json.loads(matrix_file.read_text())
    base = matrix_file.parent

    def resolve(p):
        return str(p if Path(p).is_absolute() else (base / p))

    dataset = resolve(spec["dataset"])
    style_ckpts = {name: resolve(p) for name, p in spec.get("styles", {}).items()}
    clf_defaults = spec.get("classifier", {})
    split = spec.get("split", {})
    default_seeds = spec.get("seeds", list(DEFAULT_SEEDS))
    angles = tuple(spec.get("rotation_angles", DEFAULT_ANGLES))
    configs, names = [], set()
    for entry in spec["experiments"]:
        name = entry["name"]
        if name in names:
            raise ContractError(f"duplicate experiment name {name!r} in {matrix_file}")
        names.add(name)
        seeds = [entry["seed"]] if "seed" in entry else entry.get("seeds", default_seeds)
        styles = tuple(entry.get("styles", ()))
        for seed in seeds:
            clf = ClassifierConfig(**{**clf_defaults, **entry.get("classifier", {}), "seed": int(seed)})
            configs.append(
                ExperimentConfig(
                    name=name,
                    dataset_ref=dataset,
                    traditional=tuple(sorted(entry.get("traditional", ()))),
                    styles=styles,
                    classifier=clf,
                    seed=int(seed),
                    style_paths=tuple(style_ckpts.get(s, f"<missing:{s}>") for s in styles),
                    rotation_angles=angles,
                    train_fraction=float(split.get("train_fraction", 0.7)),
                    split_seed=int(split.get("seed", 0)),
                )
            )
    return configs


@dataclass
class MatrixResult:
    records: list[ResultRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _check_resolvable(cfg: ExperimentConfig) -> None:
    if not Path(cfg.dataset_ref).is_dir():
        raise ContractError(f"dataset not found: {cfg.dataset_ref}")
    for style, p in zip(cfg.styles, cfg.style_paths):
        if not Path(p).is_file():
            raise ContractError(f"no checkpoint for style {style!r} ({p})")


def _augmented_train(cfg: ExperimentConfig, dataset, train, dataset_hash: str, work_dir: Path):
    plan = cfg.plan()
    key_payload = {
        "dataset_hash": dataset_hash,
        "split": [cfg.train_fraction, cfg.split_seed],
        "plan": {**plan.to_dict(), "styles": [file_sha256(p) for p in plan.styles]},
    }
    key = hashlib.sha256(canonical_json(key_payload).encode()).hexdigest()[:16]
    out = work_dir / "augmented" / key
    if (out / "manifest.json").exists():
        manifest = AugmentManifest.read(out)
    else:
        tmp = work_dir / "augmented" / f".{key}.partial"
        if tmp.exists():
            import shutil

            shutil.rmtree(tmp)
        manifest = build_augmented(train, plan, tmp)
        os.replace(tmp, out)
    return manifest.to_dataset(out)


def _train_one(payload: dict) -> dict:
    """Worker entry point (runs in a subprocess when ``jobs > 1``)."""
    from .augmentor import LabeledDataset

    train = LabeledDataset(**payload["train"])
    val = LabeledDataset(**payload["val"])
    clf = ClassifierConfig(**payload["classifier"])
    run = train_classifier(train, val, clf, run_dir=payload["run_dir"])
    return {"per_epoch": run.per_epoch_val_accuracy}


def _dataset_payload(ds) -> dict:
    return {"root_dir": str(ds.root_dir), "classes": list(ds.classes), "items": [list(i) for i in ds.items], "provenance": list(ds.provenance)}


def run_matrix(
    matrix_file,
    ledger_path,
    force: bool = False,
    jobs: int = 1,
    work_dir=None,
    deterministic: bool = False,
) -> MatrixResult:
    """Run every (experiment, seed) of ``matrix_file`` not already in the ledger.

    A row whose dataset or checkpoints cannot be resolved is reported in
    ``failures`` and the rest of the matrix still runs.
    """
    ledger_path = Path(ledger_path)
    work_dir = Path(work_dir) if work_dir is not None else ledger_path.parent / f"{ledger_path.stem}.work"
    configs = load_matrix(matrix_file)
    done = {(r.name, r.config_hash) for r in read_ledger(ledger_path)}
    result = MatrixResult()
    datasets: dict[str, tuple] = {}
    pending = []
    for cfg in configs:
        label = f"{cfg.name}[seed={cfg.seed}]"
        try:
            _check_resolvable(cfg)
            if cfg.dataset_ref not in datasets:
                ds = scan_dataset(cfg.dataset_ref)
                datasets[cfg.dataset_ref] = (ds, ds.digest())
            ds, ds_hash = datasets[cfg.dataset_ref]
            chash = cfg.config_hash(ds_hash)
            if (cfg.name, chash) in done and not force:
                result.skipped.append(label)
                continue
            train, val = split_dataset(ds, cfg.train_fraction, cfg.split_seed)
            train_aug = _augmented_train(cfg, ds, train, ds_hash, work_dir)
        except Exception as exc:
            logger.error("experiment %s failed: %s", label, exc)
            result.failures.append((label, str(exc)))
            continue
        run_dir = ledger_path.parent / "runs" / f"{cfg.name}-{chash[:12]}"
        payload = {
            "train": _dataset_payload(train_aug),
            "val": _dataset_payload(val),
            "classifier": cfg.classifier.to_dict(),
            "run_dir": str(run_dir),
        }
        pending.append((cfg, label, ds_hash, chash, payload))

    def record_for(cfg, ds_hash, chash, per_epoch) -> ResultRecord:
        best = max(per_epoch)
        return ResultRecord(
            cfg.name, traditional_label(cfg.traditional), "".join(cfg.styles) or "None", cfg.classifier.backbone,
            cfg.seed, best, per_epoch.index(best) + 1, tuple(per_epoch), ds_hash, chash,
            _timestamp(deterministic), _toolkit_version(),
        )

    def finish(item, outcome):
        cfg, label, ds_hash, chash, _ = item
        if isinstance(outcome, BaseException):
            logger.error("experiment %s failed: %s", label, outcome)
            result.failures.append((label, str(outcome)))
            return
        rec = record_for(cfg, ds_hash, chash, outcome["per_epoch"])
        append_record(ledger_path, rec)
        result.records.append(rec)
        logger.info("%s: best top-1 %.4f (epoch %d)", label, rec.best_val_accuracy, rec.best_epoch)

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(item, pool.submit(_train_one, item[4])) for item in pending]
            for item, fut in futures:
                try:
                    outcome = fut.result()
                except Exception as exc:
                    outcome = exc
                finish(item, outcome)
    else:
        for item in pending:
            try:
                outcome = _train_one(item[4])
            except Exception as exc:
                outcome = exc
            finish(item, outcome)
    return result


@dataclass
class Table:
    title: str
    columns: tuple[str, ...]
    rows: list[tuple]
    note: str = ""

    def to_text(self) -> str:
        cells = [list(self.columns)] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        rule = "+-" + "-+-".join("-" * w for w in widths) + "-+"
        lines = [self.title, rule]
        for k, row in enumerate(cells):
            lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
            if k == 0:
                lines.append(rule)
        lines.append(rule)
        if self.note:
            lines.append(self.note)
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("table",) + self.columns)
        for r in self.rows:
            w.writerow((self.title,) + tuple(_fmt(v) for v in r))
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


REPORT_COLUMNS = ("Traditional Method", "Style", "Backbone", "Result", "Std", "Seeds")
_GROUP_KEYS = {"traditional": 0, "style": 1, "backbone": 2}


def aggregate(records: Sequence[ResultRecord]) -> list[tuple]:
    """One row per (traditional, style, backbone) cell: mean, sample std and seed count."""
    cells: dict[tuple[str, str, str], list[float]] = {}
    for r in records:
        cells.setdefault((r.traditional, r.styles, r.backbone), []).append(r.best_val_accuracy)
    rows = []
    for key, accs in cells.items():
        std = statistics.stdev(accs) if len(accs) > 1 else float("nan")
        rows.append((*key, statistics.fmean(accs), std, len(accs)))
    rows.sort(key=lambda r: (-r[3], r[0], r[1], r[2]))
    return rows


def matrix_names(matrix_file) -> list[str]:
    return [e["name"] for e in json.loads(Path(matrix_file).read_text())["experiments"]]


def report(
    ledger_path,
    group_by: str | None = None,
    names: Sequence[str] | None = None,
    matrix_file=None,
) -> list[Table]:
    """Result tables from the ledger, rows sorted by descending mean accuracy.

    ``group_by`` splits the output into one table per traditional method, style
    or backbone. ``names`` and ``matrix_file`` restrict the report to those
    experiment names (or the experiments of that matrix).
    """
    records = read_ledger(ledger_path)
    title = "All results"
    if matrix_file is not None:
        names = list(names or ()) + matrix_names(matrix_file)
        title = Path(matrix_file).stem
    if names is not None:
        keep = set(names)
        records = [r for r in records if r.name in keep]
    if not records:
        return []
    note = "Result = mean best validation top-1 over seeds; multi-seed averaging is an addition to single-run tables."
    rows = aggregate(records)
    if group_by is None:
        return [Table(title, REPORT_COLUMNS, rows, note)]
    if group_by not in _GROUP_KEYS:
        raise ContractError(f"group_by must be one of {sorted(_GROUP_KEYS)}, got {group_by!r}")
    k = _GROUP_KEYS[group_by]
    tables: dict[str, list[tuple]] = {}
    for r in rows:
        tables.setdefault(r[k], []).append(r)
    return [Table(f"{group_by} = {key}", REPORT_COLUMNS, tables[key], note) for key in sorted(tables)]


def read_report_csv(text: str) -> list[tuple]:
    """Parse ``Table.to_csv`` output back into (table, row...) string tuples."""
    reader = csv.reader(io.StringIO(text))
    next(reader, None)
    return [tuple(r) for r in reader]


def write_plots(ledger_path, out_dir) -> list[Path]:
    """Mean validation accuracy per epoch, one PNG per backbone."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_ledger(ledger_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_backbone: dict[str, dict[tuple[str, str], list[tuple[float, ...]]]] = {}
    for r in records:
        by_backbone.setdefault(r.backbone, {}).setdefault((r.traditional, r.styles), []).append(r.per_epoch_val_accuracy)
    paths = []
    for backbone, cells in sorted(by_backbone.items()):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for (trad, style), curves in sorted(cells.items()):
            n = min(len(c) for c in curves)
            mean = [statistics.fmean(c[i] for c in curves) for i in range(n)]
            ax.plot(range(1, n + 1), mean, label=f"{trad} / {style}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation top-1")
        ax.set_title(backbone)
        ax.legend(fontsize="small")
        path = out_dir / f"accuracy_{backbone}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths

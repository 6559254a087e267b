"""Command-line entry point.

Option values resolve as: command-line flag, then ``STADA_*`` environment
variable (cache dir, device, weights only), then the ``--config`` JSON file,
then the built-in default. The config file may hold a ``"global"`` section
and one section per subcommand, keyed by option name with dashes or
underscores.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from ._blob import CheckpointError
from ._validation import ContractError
from .images import ImageDecodeError

logger = logging.getLogger("styleaug")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

ENV_VARS = {"cache_dir": "STADA_CACHE_DIR", "device": "STADA_DEVICE", "weights": "STADA_WEIGHTS"}

GLOBAL_DEFAULTS = {
    "device": "cpu",
    "determinism": False,
    "log_level": "info",
    "cache_dir": str(Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "styleaug"),
    "weights": None,
    "weights_manifest": None,
}

COMMAND_DEFAULTS = {
    "train-style": {
        "lambda_c": 7.5, "lambda_s": 100.0, "lambda_tv": 200.0, "steps": 2000, "batch_size": 4, "lr": 1e-3,
        "size": 256, "style_size": None, "seed": 0, "optimizer": "sgd", "checkpoint_every": 0, "style_name": None,
        "residual_blocks": 5, "base_channels": 32, "log_every": 10,
    },
    "stylize": {},
    "optimize": {
        "lambda_c": 7.5, "lambda_s": 100.0, "lambda_tv": 200.0, "iterations": 500, "step_size": 1.0,
        "init": "white_noise", "size": None, "style_size": None, "seed": 0, "log_every": 10, "trace": None,
    },
    "augment": {"flip": False, "rotate": None, "style": [], "jobs": 1, "overwrite": False},
    "split": {"train_fraction": 0.7, "seed": 0},
    "train-classifier": {
        "augmented": None, "backbone": "small_cnn", "pretrained": False, "epochs": 10, "batch_size": 32,
        "lr": 1e-3, "input_size": 32, "seed": 0, "train_fraction": 0.7,
    },
    "run-matrix": {"force": False, "jobs": 1, "work_dir": None},
    "report": {"group_by": None, "csv": None, "plots": None, "name": None, "matrix": None},
    "make-toy": {"per_class": 60, "size": 32, "seed": 0, "styles": None},
}


class UserError(Exception):
    """Bad input from the caller; reported without a traceback, exit 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def derive_seed(root: int, consumer: str) -> int:
    """Independent 31-bit seed for one consumer of a command's root seed."""
    digest = hashlib.sha256(f"{int(root)}:{consumer}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def manifest_path(cfg: dict) -> Path:
    if cfg.get("weights_manifest"):
        return Path(cfg["weights_manifest"])
    return Path(str(resources.files("styleaug") / "weights_manifest.json"))


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _opt(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="styleaug", description="Style transfer as data augmentation.")
    parser.add_argument("--version", action="store_true", help="print version and weights-manifest hash")
    _opt(parser, "--device", choices=("cpu", "cuda"), help="compute device [env STADA_DEVICE; default cpu]")
    _opt(parser, "--determinism", action="store_true", help="seeded single-threaded execution, fixed timestamps")
    _opt(parser, "--log-level", choices=("debug", "info", "warning", "error"), help="default info")
    _opt(parser, "--cache-dir", help="cache directory [env STADA_CACHE_DIR; default ~/.cache/styleaug]")
    _opt(parser, "--weights", help="loss-network weights file [env STADA_WEIGHTS; default seeded random init]")
    _opt(parser, "--weights-manifest", help="manifest listing allowed weights files (default: shipped manifest)")
    parser.add_argument("--config", help="JSON config file with a 'global' section and per-command sections")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("train-style", help="train a feed-forward network for one style")
    p.add_argument("--style", required=True, help="style image")
    p.add_argument("--corpus", required=True, help="directory of content images")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    _opt(p, "--lambda-c", type=float, help="content weight (default 7.5)")
    _opt(p, "--lambda-s", type=float, help="style weight (default 100)")
    _opt(p, "--lambda-tv", type=float, help="total-variation weight (default 200)")
    _opt(p, "--steps", type=int, help="default 2000")
    _opt(p, "--batch-size", type=int, help="default 4")
    _opt(p, "--lr", type=float, help="default 1e-3")
    _opt(p, "--size", type=int, help="training crop size (default 256)")
    _opt(p, "--style-size", type=int, help="style image size (default: --size)")
    _opt(p, "--seed", type=int, help="root seed (default 0)")
    _opt(p, "--optimizer", choices=("sgd", "adam"), help="default sgd")
    _opt(p, "--checkpoint-every", type=int, help="steps between intermediate checkpoints (0 = none)")
    _opt(p, "--style-name", help="default: style file stem")
    _opt(p, "--residual-blocks", type=int, help="default 5")
    _opt(p, "--base-channels", type=int, help="default 32")
    _opt(p, "--log-every", type=int, help="default 10")

    p = sub.add_parser("stylize", help="apply a trained style checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output file (or directory when --in is a directory)")

    p = sub.add_parser("optimize", help="iterative pixel-space style transfer")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    _opt(p, "--lambda-c", type=float)
    _opt(p, "--lambda-s", type=float)
    _opt(p, "--lambda-tv", type=float)
    _opt(p, "--iterations", type=int, help="default 500")
    _opt(p, "--step-size", type=float, help="default 1.0")
    _opt(p, "--init", choices=("white_noise", "content_copy"))
    _opt(p, "--size", type=int, help="resize content to this square size")
    _opt(p, "--style-size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--log-every", type=int)
    _opt(p, "--trace", help="write the loss trace CSV here")

    p = sub.add_parser("augment", help="materialize an augmented dataset with a manifest")
    p.add_argument("--data", required=True, help="dataset root with one directory per class")
    p.add_argument("--out", required=True)
    _opt(p, "--flip", action="store_true")
    _opt(p, "--rotate", help="comma-separated angles, e.g. 90,180,270")
    _opt(p, "--style", action="append", help="style checkpoint (repeatable)")
    _opt(p, "--jobs", type=int)
    _opt(p, "--overwrite", action="store_true")

    p = sub.add_parser("split", help="stratified train/validation split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for train.csv and val.csv")
    _opt(p, "--train-fraction", type=float, help="default 0.7")
    _opt(p, "--seed", type=int)

    p = sub.add_parser("train-classifier", help="train and validate one classifier")
    p.add_argument("--data", required=True, help="original dataset root (split with --seed)")
    p.add_argument("--run-dir", required=True)
    _opt(p, "--augmented", help="augmented training set built from the train split")
    _opt(p, "--backbone", choices=("small_cnn", "vgg16_like", "vgg19_like"))
    _opt(p, "--pretrained", action="store_true", help="frozen trunk from --weights, retrained head")
    _opt(p, "--epochs", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--input-size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--train-fraction", type=float)

    p = sub.add_parser("run-matrix", help="run an experiment matrix into a ledger")
    p.add_argument("--matrix", required=True)
    p.add_argument("--ledger", required=True)
    _opt(p, "--force", action="store_true", help="rerun rows already in the ledger")
    _opt(p, "--jobs", type=int)
    _opt(p, "--work-dir", help="augmented-set cache (default <cache-dir>/matrix)")

    p = sub.add_parser("report", help="tables from a results ledger")
    p.add_argument("--ledger", required=True)
    _opt(p, "--group-by", choices=("style", "traditional", "backbone"))
    _opt(p, "--csv", help="also write the tables as CSV")
    _opt(p, "--plots", help="directory for accuracy-vs-epoch plots")
    _opt(p, "--name", action="append", help="only these experiment names (repeatable)")
    _opt(p, "--matrix", help="only the experiments of this matrix file")

    p = sub.add_parser("make-toy", help="write the synthetic shape dataset and style images")
    p.add_argument("--out", required=True)
    _opt(p, "--per-class", type=int)
    _opt(p, "--size", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--styles", help="also write procedural style images here")
    return parser


def _section(config: dict, name: str) -> dict:
    return {k.replace("-", "_"): v for k, v in config.get(name, {}).items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, environment and flags into one dict."""
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UserError(f"cannot read config {args.config}: {exc}") from None
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    cfg.update(_section(config, "global"))
    cfg.update(_section(config, args.command or ""))
    for key, var in ENV_VARS.items():
        if os.environ.get(var):
            cfg[key] = os.environ[var]
    cfg.update(vars(args))
    return cfg


def _apply_globals(cfg: dict) -> None:
    import torch

    logging.basicConfig(level=cfg["log_level"].upper(), format="%(levelname)s %(name)s: %(message)s", force=True)
    if cfg["device"] not in ("cpu", "cuda"):
        raise UserError(f"unknown device {cfg['device']!r}")
    if cfg["device"] == "cuda":
        raise UserError("this build computes on CPU only; use --device cpu")
    if cfg["determinism"]:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        if cfg.get("jobs", 1) != 1:
            logger.warning("--determinism runs single-stream; ignoring --jobs %s", cfg["jobs"])
            cfg["jobs"] = 1


def _loss_network(cfg: dict, **kw):
    from .lossnet import LossNetwork

    weights = cfg.get("weights")
    return LossNetwork(weights_path=weights, manifest_path=manifest_path(cfg) if weights else None, **kw)


def cmd_train_style(cfg: dict) -> int:
    from .losses import LossWeights
    from .trainer import StyleTrainConfig, train_style
    from .transformnet import TransformNetConfig

    tcfg = StyleTrainConfig(
        style_image_path=cfg["style"],
        corpus_dir=cfg["corpus"],
        weights=LossWeights(cfg["lambda_c"], cfg["lambda_s"], cfg["lambda_tv"]),
        batch_size=cfg["batch_size"],
        steps=cfg["steps"],
        learning_rate=cfg["lr"],
        image_size=cfg["size"],
        seed=derive_seed(cfg["seed"], "train-style"),
        checkpoint_every=cfg["checkpoint_every"],
        optimizer=cfg["optimizer"],
        log_every=cfg["log_every"],
        style_name=cfg["style_name"],
        style_size=cfg["style_size"],
    )
    ncfg = TransformNetConfig(num_residual_blocks=cfg["residual_blocks"], base_channels=cfg["base_channels"])
    ckpt = train_style(tcfg, ncfg, out_path=cfg["out"], loss_net=_loss_network(cfg))
    print(f"wrote {cfg['out']} (style {ckpt.style_name}, final running total {ckpt.training_meta['final_running_total']:.6g})")
    return EXIT_OK


def cmd_stylize(cfg: dict) -> int:
    from .images import is_image_path, load_image, save_image, to_array, to_tensor
    from .transformnet import load_checkpoint, stylize

    if not Path(cfg["ckpt"]).is_file():
        raise UserError(f"checkpoint not found: {cfg['ckpt']}")
    net, meta = load_checkpoint(cfg["ckpt"])
    src, dst = Path(cfg["input"]), Path(cfg["out"])
    if src.is_dir():
        pairs = [(p, dst / f"{p.stem}.png") for p in sorted(src.iterdir()) if is_image_path(p)]
    elif src.is_file():
        pairs = [(src, dst)]
    else:
        raise UserError(f"input not found: {src}")
    for s, d in pairs:
        save_image(d, to_array(stylize(net, to_tensor(load_image(s)))))
    print(f"stylized {len(pairs)} image(s) with {meta['style_name']}")
    return EXIT_OK


def cmd_optimize(cfg: dict) -> int:
    from .descriptive import DescriptiveRunConfig, optimize, write_trace
    from .images import load_image, save_image, to_array, to_tensor
    from .losses import LossWeights
    from .lossnet import compute_style_target, extract_features

    net = _loss_network(cfg)
    content = to_tensor(load_image(cfg["content"], cfg["size"]))
    style = to_tensor(load_image(cfg["style"], cfg["style_size"] or cfg["size"]))
    target = compute_style_target(net, style)
    feats = extract_features(net, content, net.content_layers)
    rcfg = DescriptiveRunConfig(
        weights=LossWeights(cfg["lambda_c"], cfg["lambda_s"], cfg["lambda_tv"]),
        iterations=cfg["iterations"],
        step_size=cfg["step_size"],
        init=cfg["init"],
        seed=derive_seed(cfg["seed"], "optimize"),
        log_every=cfg["log_every"],
    )
    image, trace = optimize(content, target, feats, net, rcfg)
    save_image(cfg["out"], to_array(image))
    if cfg["trace"]:
        write_trace(trace, cfg["trace"])
    print(f"wrote {cfg['out']} (best total {min(trace.column('total')):.6g})")
    return EXIT_OK


def cmd_augment(cfg: dict) -> int:
    from .augmentor import AugmentPlan, build_augmented, scan_dataset

    traditional = set()
    if cfg["flip"]:
        traditional.add("flip_horizontal")
    angles = ()
    if cfg["rotate"]:
        try:
            angles = tuple(float(a) for a in str(cfg["rotate"]).split(",") if a.strip())
        except ValueError:
            raise UserError(f"--rotate expects comma-separated numbers, got {cfg['rotate']!r}") from None
        traditional.add("rotation")
    styles = tuple(cfg["style"] or ())
    for s in styles:
        if not Path(s).is_file():
            raise UserError(f"style checkpoint not found: {s}")
    plan = AugmentPlan(frozenset(traditional), angles, styles)
    manifest = build_augmented(scan_dataset(cfg["data"]), plan, cfg["out"], jobs=cfg["jobs"], overwrite=cfg["overwrite"])
    print(f"wrote {len(manifest.rows)} images and {Path(cfg['out']) / 'manifest.csv'}")
    return EXIT_OK


def _split(cfg: dict):
    from .augmentor import scan_dataset
    from .classify import split_dataset

    ds = scan_dataset(cfg["data"])
    return ds, *split_dataset(ds, cfg["train_fraction"], derive_seed(cfg["seed"], "split"))


def cmd_split(cfg: dict) -> int:
    import csv
    import io

    from ._blob import atomic_write_bytes

    _, train, val = _split(cfg)
    out = Path(cfg["out"])
    for name, part in (("train", train), ("val", val)):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("path", "class"))
        for rel, c in part.items:
            w.writerow((rel, part.classes[c]))
        atomic_write_bytes(out / f"{name}.csv", buf.getvalue().encode())
    print(f"train {len(train)} / val {len(val)} -> {out}")
    return EXIT_OK


def cmd_train_classifier(cfg: dict) -> int:
    from .augmentor import AugmentManifest
    from .classify import ClassifierConfig, train_classifier

    ds, train, val = _split(cfg)
    if cfg["augmented"]:
        aug_dir = Path(cfg["augmented"])
        manifest = AugmentManifest.read(aug_dir)
        val_sources = {str(val.path(i)) for i in range(len(val))} | {rel for rel, _ in val.items}
        leaked = sorted({r.source_path for r in manifest.rows} & val_sources)
        if leaked:
            raise UserError(f"augmented set was built from validation images, e.g. {leaked[0]}")
        train = manifest.to_dataset(aug_dir)
    ccfg = ClassifierConfig(
        backbone=cfg["backbone"],
        pretrained=cfg["pretrained"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        seed=derive_seed(cfg["seed"], "classifier"),
        input_size=cfg["input_size"],
        weights_path=cfg["weights"] if cfg["pretrained"] else None,
        weights_manifest=str(manifest_path(cfg)) if cfg["pretrained"] else None,
    )
    run = train_classifier(train, val, ccfg, run_dir=cfg["run_dir"])
    print(f"best top-1 {run.best_val_accuracy:.4f} at epoch {run.best_epoch}; artifacts in {cfg['run_dir']}")
    return EXIT_OK


def cmd_run_matrix(cfg: dict) -> int:
    from .experiments import run_matrix

    if not Path(cfg["matrix"]).is_file():
        raise UserError(f"matrix file not found: {cfg['matrix']}")
    work = cfg["work_dir"] or Path(cfg["cache_dir"]) / "matrix"
    result = run_matrix(cfg["matrix"], cfg["ledger"], force=cfg["force"], jobs=cfg["jobs"], work_dir=work, deterministic=cfg["determinism"])
    print(f"{len(result.records)} new row(s), {len(result.skipped)} already in ledger, {len(result.failures)} failed")
    for label, msg in result.failures:
        print(f"FAILED {label}: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_USER


def cmd_report(cfg: dict) -> int:
    from ._blob import atomic_write_bytes
    from .experiments import report, write_plots

    if not Path(cfg["ledger"]).exists():
        raise UserError(f"ledger not found: {cfg['ledger']}")
    if cfg["matrix"] and not Path(cfg["matrix"]).is_file():
        raise UserError(f"matrix file not found: {cfg['matrix']}")
    tables = report(cfg["ledger"], cfg["group_by"], cfg["name"], cfg["matrix"])
    if not tables:
        print("no results")
        return EXIT_OK
    print("\n\n".join(t.to_text() for t in tables))
    if cfg["csv"]:
        atomic_write_bytes(cfg["csv"], "".join(t.to_csv() if i == 0 else t.to_csv().split("\n", 1)[1] for i, t in enumerate(tables)).encode())
    if cfg["plots"]:
        for p in write_plots(cfg["ledger"], cfg["plots"]):
            print(f"plot: {p}")
    return EXIT_OK


def cmd_make_toy(cfg: dict) -> int:
    from .toy import make_shapes_dataset, make_style_images

    make_shapes_dataset(cfg["out"], cfg["per_class"], cfg["size"], cfg["seed"])
    if cfg["styles"]:
        make_style_images(cfg["styles"])
    print(f"wrote toy dataset to {cfg['out']}")
    return EXIT_OK


COMMANDS = {
    "train-style": cmd_train_style,
    "stylize": cmd_stylize,
    "optimize": cmd_optimize,
    "augment": cmd_augment,
    "split": cmd_split,
    "train-classifier": cmd_train_classifier,
    "run-matrix": cmd_run_matrix,
    "report": cmd_report,
    "make-toy": cmd_make_toy,
}

USER_ERRORS = (UserError, ContractError, CheckpointError, ImageDecodeError, FileNotFoundError, FileExistsError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        if args.version:
            m = manifest_path(cfg)
            print(f"styleaug {__version__}")
            print(f"weights manifest {m} sha256 {manifest_hash(m) if m.is_file() else 'missing'}")
            return EXIT_OK
        if not args.command:
            parser.print_usage(sys.stderr)
            print("styleaug: error: a command is required", file=sys.stderr)
            return EXIT_USER
        _apply_globals(cfg)
        return COMMANDS[args.command](cfg)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:
        from .lossnet import WeightsError

        if isinstance(exc, WeightsError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USER
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

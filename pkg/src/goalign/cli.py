"""Command-line entry point: gen-data, flism, train, eval, viz, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, GoalignError, ManifestError, NumericError

log = logging.getLogger("goalign")

SEED_ENV = "GOALIGN_SEED"
RUN_MANIFEST_VERSION = "goalign-run/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, 2)
        raise SystemExit(2)


def _emit_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _resolve_seed(flag: int | None, config_value: int | None = None, default: int = 0) -> int:
    for v in (flag, config_value, _env_seed()):
        if v is not None:
            return int(v)
    return default


def _versions() -> dict:
    import torch

    from .datagen import MANIFEST_VERSION
    from .encoders import CHECKPOINT_VERSION
    from .evalkit import REPORT_VERSION
    from .flism import FLISM_VERSION
    from .trainer import CONFIG_VERSION

    return {
        "goalign": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__.split("+")[0],
        "formats": {
            "manifest": MANIFEST_VERSION,
            "flism": FLISM_VERSION,
            "config": CONFIG_VERSION,
            "checkpoint": CHECKPOINT_VERSION,
            "report": REPORT_VERSION,
        },
    }


def _write_run_manifest(out_dir: Path, command: str, resolved: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run_{command.replace('-', '_')}.json"
    body = {"version": RUN_MANIFEST_VERSION, "command": command, "resolved": resolved, "versions": _versions()}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _file_crc(path: Path) -> str:
    return f"{zlib.crc32(path.read_bytes()):08x}"


def _require_dir_with(path: Path, name: str) -> Path:
    if not path.is_dir():
        raise ManifestError(f"data directory not found: {path}")
    if not (path / name).exists():
        raise ManifestError(f"{path} has no {name}")
    return path


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ManifestError(f"{what} not found: {path}")
    return path


# --- subcommands --------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datagen import SceneSpec, generate_dataset, write_manifest

    seed = _resolve_seed(args.seed)
    SceneSpec(image_size=args.image_size, n_objects=args.objects, seed=seed, verbosity=args.verbosity).validate()
    records = generate_dataset(args.n, seed=seed, n_objects=args.objects, image_size=args.image_size, verbosity=args.verbosity)
    out = Path(args.out)
    path = write_manifest(records, out)
    _write_run_manifest(
        out,
        "gen-data",
        {"n": args.n, "seed": seed, "objects": args.objects, "image_size": args.image_size, "verbosity": args.verbosity},
    )
    print(json.dumps({"manifest": str(path), "records": len(records)}))
    return 0


def cmd_flism(args) -> int:
    from .datagen import MANIFEST_NAME
    from .flism import ModelEmbedder, PaletteEmbedder, canonical_strategy, flism_dataset, read_detections

    data = _require_dir_with(Path(args.data), MANIFEST_NAME)
    strategy = canonical_strategy(args.strategy)
    detections = read_detections(_require_file(Path(args.boxes), "boxes file")) if args.boxes else None
    if args.ckpt:
        from .encoders import load_checkpoint

        ck = load_checkpoint(_require_file(Path(args.ckpt), "checkpoint"))
        embedder = ModelEmbedder(ck.model.eval(), ck.tokenizer)
        input_size = ck.model.configs["vision"].image_size
    else:
        embedder, input_size = PaletteEmbedder(), None
    out = flism_dataset(
        data,
        embedder,
        strategy=strategy,
        use_partitions=args.partitions == "on",
        detections=detections,
        input_size=input_size,
        out_path=args.out,
    )
    _write_run_manifest(
        out.parent,
        "flism",
        {
            "data": str(data),
            "strategy": strategy,
            "partitions": args.partitions,
            "boxes": args.boxes,
            "embedder": "model" if args.ckpt else "palette",
            "ckpt": args.ckpt,
            "out": str(out),
        },
    )
    print(json.dumps({"flism": str(out)}))
    return 0


def _train_config(args):
    from .alignment import LossWeights
    from .trainer import TrainConfig, load_config

    cfg, config_seed = TrainConfig(), None
    if args.config:
        path = _require_file(Path(args.config), "config")
        cfg = load_config(path)
        config_seed = cfg.seed if "seed" in json.loads(path.read_text(encoding="utf-8")) else None
    # flags > config file > defaults
    for flag, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"), ("strategy", "strategy")):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, attr, v)
    w = cfg.weights
    cfg.weights = LossWeights(
        global_=w.global_ if args.lambda_global is None else args.lambda_global,
        local=w.local if args.lambda_local is None else args.lambda_local,
        tsl=w.tsl if args.lambda_tsl is None else args.lambda_tsl,
        temperature=w.temperature if args.temperature is None else args.temperature,
    )
    cfg.seed = _resolve_seed(args.seed, config_seed)
    return cfg.validate()


def cmd_train(args) -> int:
    from .flism import FLISM_NAME, read_flism
    from .plotting import plot_losses
    from .trainer import LOSS_LOG_NAME, fit

    data = _require_dir_with(Path(args.data), FLISM_NAME)
    if args.resume:
        _require_file(Path(args.resume), "resume checkpoint")
    cfg = _train_config(args)
    records = read_flism(data)
    out = Path(args.out)
    _write_run_manifest(
        out,
        "train",
        {"data": str(data), "dataset_id": _file_crc(data / FLISM_NAME), "resume": args.resume, "config": cfg.to_dict()},
    )
    t0 = time.perf_counter()
    state = fit(records, cfg, out_dir=out, resume=args.resume)
    plot_losses(state.history, out / "losses.png")
    last = state.history[-1]
    print(
        json.dumps(
            {
                "checkpoint": str(out / "model.npz"),
                "loss_log": str(out / LOSS_LOG_NAME),
                "steps": state.step,
                "final": {k: last[k] for k in ("total", "global", "local", "tsl")},
                "seconds": round(time.perf_counter() - t0, 2),
            }
        )
    )
    return 0


def _parse_ks(text: str) -> list[int]:
    try:
        ks = sorted({int(k) for k in text.split(",") if k.strip()})
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {text!r}") from None
    if not ks or ks[0] < 1:
        raise UsageError("--ks values must be >= 1")
    return ks


def cmd_eval(args) -> int:
    from .datagen import MANIFEST_NAME, read_manifest
    from .encoders import load_checkpoint
    from .evalkit import RetrievalReport, evaluate, parameter_checksum
    from .plotting import plot_recall

    ks = _parse_ks(args.ks)
    ckpt = _require_file(Path(args.ckpt), "checkpoint")
    data = _require_dir_with(Path(args.data), MANIFEST_NAME)
    baseline = None
    if args.baseline:
        baseline = RetrievalReport.from_json(json.loads(_require_file(Path(args.baseline), "baseline report").read_text()))
    ck = load_checkpoint(ckpt)
    records = read_manifest(data)
    model_id = f"{parameter_checksum(ck.model):08x}"
    report = evaluate(ck.model, ck.tokenizer, records, ks, model_id=model_id, dataset_id=_file_crc(data / MANIFEST_NAME))
    out = Path(args.out)
    report.write(out / "report.json")
    (out / "recall.tsv").write_text(report.to_tsv(), encoding="utf-8")
    plot_recall(report, out / "recall.png", baseline=baseline)
    _write_run_manifest(out, "eval", {"ckpt": str(ckpt), "data": str(data), "ks": ks, "baseline": args.baseline})
    sys.stdout.write(report.to_tsv())
    return 0


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def cmd_viz(args) -> int:
    from .encoders import load_checkpoint
    from .evalkit import export_attention
    from .plotting import plot_heatmap

    ckpt = _require_file(Path(args.ckpt), "checkpoint")
    image_path = _require_file(Path(args.image), "image")
    ck = load_checkpoint(ckpt)
    image = _load_image(image_path)
    size = ck.model.configs["vision"].image_size
    if image.shape[:2] != (size, size):
        raise DataError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    out = Path(args.out)
    art = export_attention(image, ck.model, out, alpha=args.alpha)
    panel = plot_heatmap(image, art, Path(f"{out.with_suffix('')}_panel.png"))
    _write_run_manifest(out.parent, "viz", {"ckpt": str(ckpt), "image": str(image_path), "out": str(out), "alpha": args.alpha})
    print(
        json.dumps(
            {
                **art.paths,
                "panel": str(panel),
                "degenerate": art.degenerate,
                "energies": [round(float(e), 6) for e in art.energies],
            }
        )
    )
    return 0


def cmd_gradcheck(args) -> int:
    from .trainer import grad_check, tiny_gradcheck_setup

    seed = _resolve_seed(args.seed)
    t0 = time.perf_counter()
    model, batch, cfg = tiny_gradcheck_setup(seed=seed, batch_size=args.batch, strategy=args.strategy)
    rep = grad_check(model, batch, cfg, tolerance=args.tolerance, max_entries=args.max_entries, seed=seed)
    result = {
        "max_rel_err": rep.max_error,
        "worst": rep.worst,
        "tolerance": rep.tolerance,
        "tensors": len(rep.errors),
        "entries": rep.checked_entries,
        "passed": rep.passed,
        "seconds": round(time.perf_counter() - t0, 2),
    }
    if args.out:
        _write_run_manifest(
            Path(args.out),
            "gradcheck",
            {"seed": seed, "batch": args.batch, "strategy": args.strategy, "tolerance": args.tolerance, "max_entries": args.max_entries},
        )
    print(json.dumps(result))
    if not rep.passed:
        raise NumericError(f"gradient check failed for {', '.join(rep.failing)}")
    return 0


# --- parser --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="goalign", description="Global-local image-text alignment on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"goalign {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, then 0")
    g.add_argument("--objects", type=int, default=4)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--verbosity", type=int, default=0, choices=[0, 1, 2])
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("flism", help="match sentences to image regions")
    f.add_argument("--data", required=True)
    f.add_argument("--strategy", default="top1", choices=["top1", "top3u", "top3w", "top3_uniform", "top3_weighted"])
    f.add_argument("--partitions", default="on", choices=["on", "off"])
    f.add_argument("--boxes", help="JSONL of detector boxes per record id (default: ground-truth boxes)")
    f.add_argument("--ckpt", help="embed with a trained checkpoint instead of the palette embedder")
    f.add_argument("--out", help="output path (default: DATA/flism.jsonl)")
    f.set_defaults(func=cmd_flism)

    t = sub.add_parser("train", help="train the dual encoder")
    t.add_argument("--data", required=True, help="directory holding flism.jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON TrainConfig")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--strategy", choices=["top1", "top3u", "top3w", "top3_uniform", "top3_weighted"])
    t.add_argument("--lambda-global", type=float)
    t.add_argument("--lambda-local", type=float)
    t.add_argument("--lambda-tsl", type=float)
    t.add_argument("--temperature", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@K in both directions")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", default="1,5,10,15,25,50")
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", help="report.json drawn as dashed curves in recall.png")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="PCA heat map of final-layer patch tokens")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--alpha", type=float, default=0.5)
    v.set_defaults(func=cmd_viz)

    c = sub.add_parser("gradcheck", help="finite-difference check of the total-loss gradient")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--batch", type=int, default=3)
    c.add_argument("--strategy", default="top1", choices=["top1", "top3u", "top3w"])
    c.add_argument("--max-entries", type=int, default=None, help="spot-check at most this many entries per tensor")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", help="directory for the run manifest")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        _emit_error("UsageError", str(exc), 2)
        return 2
    except ValueError as exc:
        # Config and argument validation surface as ValueError.
        _emit_error(type(exc).__name__, str(exc), 2)
        return 2
    except GoalignError as exc:
        _emit_error(type(exc).__name__, str(exc), exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _emit_error("IOError", str(exc), 3)
        return 3


if __name__ == "__main__":
    sys.exit(main())

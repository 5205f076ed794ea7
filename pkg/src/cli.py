"""Command-line surface: synth, train, adapt, eval, predict, info, ablate.

Exit codes: 0 success, 1 numerical failure (NaN/Inf loss), 2 bad input
(config, dataset, checkpoint or other I/O problems).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import re
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from tqdm import tqdm

from src.adapter import adapt, compute_surrogates
from src.autodiff.ops import ResampleMode
from src.autodiff import ops
from src.autodiff.rng import Rng
from src.autodiff.tensor import Tensor
from src.config import RunConfig
from src.datasets import generate_synthetic, load_manifest, load_split, resolve_shift
from src.errors import ConfigError, DatasetError, NcaError, NumericalError
from src.metrics import EvalMode, evaluate, export_overlay, predict_probabilities, results_row, write_results_csv
from src.nca.checkpoint import checkpoint_crc, load_checkpoint, save_checkpoint
from src.nca.model import MedNcaModel, count_parameters
from src.trainer import initialize_parameters, train
from utils.helpers import ensure_dir, read_json, write_json
from utils.image_processing import read_pgm, std_to_uint8, to_uint8, write_pgm

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INPUT = 2

# How many held-out images get before/after overlays from ``adapt``.
OVERLAY_SAMPLES = 4

OVERRIDE_FLAGS = ("epochs", "seed", "lr", "batch_size", "vwsl_gamma", "n_runs", "patch_size", "size")

# predict maps logits in [-LOGIT_RANGE, LOGIT_RANGE] linearly onto 0..255; 0 lands on 128.
LOGIT_RANGE = 8.0

# Stream used for weight initialization; the trainer itself keys off (0, ...) and (1, ...).
INIT_STREAM = (2,)


# --- plumbing ---

def _load_config(args: argparse.Namespace) -> RunConfig:
    flags = {name: getattr(args, name, None) for name in OVERRIDE_FLAGS}
    return RunConfig.from_file(getattr(args, "config", None)).with_overrides(args.command, **flags).validate()


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _echo_config(out_dir: Path, cfg: RunConfig | None, args: argparse.Namespace) -> None:
    """Every output directory gets the effective configuration next to its results."""
    payload = {"command": args.command,
               "args": {k: _plain(v) for k, v in vars(args).items() if k not in ("handler", "command")}}
    if cfg is not None:
        payload.update(cfg.to_dict())
    write_json(out_dir / "config.json", payload)


def _sidecar_path(checkpoint: str | Path) -> Path:
    return Path(checkpoint).with_suffix(".json")


def _read_sidecar(checkpoint: str | Path) -> dict:
    path = _sidecar_path(checkpoint)
    if not path.is_file():
        return {}
    try:
        return read_json(path)
    except ValueError:
        logger.warning("ignoring unreadable sidecar %s", path)
        return {}


def _write_model(model: MedNcaModel, out_dir: Path, **meta) -> Path:
    path = out_dir / "model.ckpt"
    crc = save_checkpoint(model, path)
    write_json(_sidecar_path(path), {"parameters": count_parameters(model), "crc32": f"{crc:08x}",
                                     "config": model.config.to_dict(), **meta})
    return path


@contextlib.contextmanager
def _progress(desc: str, total: int, quiet: bool) -> Iterator:
    """tqdm bar plus the callback the trainer/adapter report through."""
    every = max(1, total // 10)
    with tqdm(total=total, desc=desc, unit="epoch", disable=quiet or total == 0, leave=False) as bar:
        def report(done: int, total: int, loss: float) -> None:
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}")
            if done % every == 0 or done == total:
                logger.info("%s epoch %d/%d loss %.5f", desc, done, total, loss)
        yield report


def _domain_of(records) -> str:
    domains = sorted({r.domain_tag for r in records})
    return "+".join(domains) if domains else "unknown"


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text) or "domain"


def _logits(probs: np.ndarray) -> np.ndarray:
    """Inverse sigmoid. In ensemble mode this is the logit of the mean probability."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


# --- commands ---

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    data = replace(cfg.data, **{k: getattr(args, k) for k in ("train", "val", "test")
                                if getattr(args, k) is not None}).validate()
    cfg = replace(cfg, data=data)
    shift = resolve_shift(args.shift) if args.shift else None
    out_dir = ensure_dir(args.out)
    manifest = generate_synthetic(out_dir, data.split_sizes(), size=data.size, seed=data.seed,
                                  shift=shift, domain=args.domain)
    _echo_config(out_dir, cfg, args)
    print(f"wrote {len(manifest.entries)} samples ({', '.join(manifest.domains)}) to {out_dir / 'manifest.json'}")
    if shift is not None:
        print(f"shifted copy ({shift.name}) in {out_dir / shift.name / 'manifest.json'}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.data)
    train_records = load_split(manifest, "train")
    val_records = load_split(manifest, "val")
    out_dir = ensure_dir(args.out)
    _echo_config(out_dir, cfg, args)

    model = initialize_parameters(cfg.model, Rng(cfg.train.seed, INIT_STREAM))
    logger.info("training %d parameters on %d samples (%d val)", count_parameters(model),
                len(train_records), len(val_records))
    with _progress("train", cfg.train.epochs, args.quiet) as progress:
        model, report = train(model, train_records, cfg.train, val_records or None, cfg.loss,
                              out_dir=out_dir, progress=progress)
    path = _write_model(model, out_dir, train_domain=_domain_of(train_records), model_id="pretrained")
    write_json(out_dir / "train_report.json", report.to_dict())
    print(f"checkpoint: {path} (crc32 {checkpoint_crc(path):08x})")
    if report.best_val_dice is not None:
        print(f"best val dice: {report.best_val_dice:.4f} at epoch {report.best_epoch}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.model)
    meta = _read_sidecar(args.model)
    manifest = load_manifest(args.data)
    records = load_split(manifest, args.split)
    if not records:
        raise DatasetError(f"{args.data}: split {args.split!r} is empty")
    out_dir = ensure_dir(args.out)
    _echo_config(out_dir, cfg, args)

    stats: list = []
    with _progress("adapt", cfg.adapt.epochs, args.quiet) as progress:
        adapted, report = adapt(model, records, cfg.adapt, cfg.loss, progress=progress, stats_out=stats)
    if not stats:
        stats, _ = compute_surrogates(model, records, cfg.adapt)

    maps_dir = ensure_dir(out_dir / "maps")
    for record, stat in zip(records, stats):
        write_pgm(maps_dir / f"{record.id}_mean.pgm", to_uint8(stat.mean[0, 0]))
        write_pgm(maps_dir / f"{record.id}_std.pgm", std_to_uint8(stat.std[0, 0]))

    labeled = [(i, r) for i, r in enumerate(records) if r.mask is not None][:OVERLAY_SAMPLES]
    if labeled:
        overlay_dir = ensure_dir(out_dir / "overlays")
        for index, record in labeled:
            for tag, which in (("before", model), ("after", adapted)):
                probs = predict_probabilities(which, record.image, cfg.adapt.seed, index)
                export_overlay(record.image, probs, record.mask, overlay_dir / f"{record.id}_{tag}.pgm")

    path = _write_model(adapted, out_dir, train_domain=meta.get("train_domain", "unknown"),
                        adapted_on=_domain_of(records), model_id="adapted")
    write_json(out_dir / "adapt_report.json", report.to_dict())
    print(f"checkpoint: {path} (crc32 {checkpoint_crc(path):08x})")
    if report.dice_before is not None:
        print(f"dice before: {report.dice_before:.4f}  after: {report.dice_after:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    meta = _read_sidecar(args.model)
    model_id = meta.get("model_id", Path(args.model).stem)
    out_dir = ensure_dir(args.out)
    _echo_config(out_dir, None, args)

    rows = []
    for data in tqdm(args.data, desc="eval", unit="manifest", disable=args.quiet or len(args.data) < 2):
        records = load_split(load_manifest(data), args.split)
        report = evaluate(model, records, args.seed, EvalMode(args.mode), args.n_runs, model_id)
        if not report.dice:
            logger.warning("%s: no labeled samples in split %r", data, args.split)
            continue
        write_json(out_dir / f"eval_{_safe_name(report.domain_tag)}.json", report.to_dict())
        rows.append(results_row(report, meta.get("train_domain", "unknown")))
        print(f"{report.domain_tag}: dice {report.mean:.4f} +/- {report.std:.4f} (n={len(report.dice)})")
    if rows:
        write_results_csv(out_dir / "results.csv", rows, append=True)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    pixels = read_pgm(args.image)
    image = (pixels.astype(np.float32) / 255.0).reshape(1, 1, *pixels.shape)
    if args.size is not None:
        image = ops.resample(Tensor(image), args.size, args.size, ResampleMode.BILINEAR).data
    out_dir = ensure_dir(args.out)
    _echo_config(out_dir, None, args)

    probs = predict_probabilities(model, image, args.seed, 0, EvalMode(args.mode), args.n_runs)
    stem = Path(args.image).stem
    write_pgm(out_dir / f"{stem}_prob.pgm", to_uint8(probs[0, 0]))
    write_pgm(out_dir / f"{stem}_logits.pgm", to_uint8(_logits(probs[0, 0]), -LOGIT_RANGE, LOGIT_RANGE))
    export_overlay(image, probs, None, out_dir / f"{stem}_overlay.pgm")
    print(f"foreground fraction: {float((probs > 0.5).mean()):.4f}")
    return EXIT_OK


def cmd_info(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    size = Path(args.model).stat().st_size
    print(f"parameters: {count_parameters(model)}")
    print(f"file size: {size} bytes ({size / 1000:.1f} kB)")
    print(f"crc32: {checkpoint_crc(args.model):08x}")
    for key, value in model.config.to_dict().items():
        print(f"{key}: {value}")
    meta = _read_sidecar(args.model)
    if "train_domain" in meta:
        print(f"train_domain: {meta['train_domain']}")
    return EXIT_OK


def _parse_gammas(text: str) -> list[float]:
    try:
        gammas = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--gammas must be comma-separated numbers, got {text!r}") from None
    if not gammas or any(g < 0 for g in gammas):
        raise ConfigError(f"--gammas needs at least one value, all >= 0, got {text!r}")
    return gammas


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    gammas = _parse_gammas(args.gammas)
    model = load_checkpoint(args.model)
    records = load_split(load_manifest(args.data), args.split)
    if not records:
        raise DatasetError(f"{args.data}: split {args.split!r} is empty")
    out_dir = ensure_dir(args.out)
    _echo_config(out_dir, cfg, args)

    baseline = evaluate(model, records, cfg.adapt.seed, model_id="pretrained")
    logger.info("zero-shot dice %.4f", baseline.mean)
    rows = []
    for gamma in gammas:
        with _progress(f"gamma={gamma:g}", cfg.adapt.epochs, args.quiet) as progress:
            adapted, _ = adapt(model, records, replace(cfg.adapt, vwsl_gamma=gamma), cfg.loss, progress)
        report = evaluate(adapted, records, cfg.adapt.seed, model_id=f"gamma={gamma:g}")
        rows.append({"gamma": f"{gamma:g}", "dice_mean": f"{report.mean:.6f}",
                     "dice_std": f"{report.std:.6f}", "n": len(report.dice)})
        print(f"gamma {gamma:g}: dice {report.mean:.4f} +/- {report.std:.4f}")

    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=("gamma", "dice_mean", "dice_std", "n"))
        writer.writeheader()
        writer.writerows(rows)
    if rows and rows[0]["n"]:
        best = max(rows, key=lambda row: float(row["dice_mean"]))
        logger.info("peak at gamma=%s (dice %s, zero-shot %.4f)", best["gamma"], best["dice_mean"], baseline.mean)
    return EXIT_OK


# --- parser ---

def _add_overrides(parser: argparse.ArgumentParser, *names: str) -> None:
    types = {"epochs": int, "seed": int, "lr": float, "batch_size": int, "vwsl_gamma": float,
             "n_runs": int, "patch_size": int, "size": int}
    for name in names:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=types[name], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mednca", description="Med-NCA segmentation with variance-weighted adaptation")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic chest-radiograph-like dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    for split in ("train", "val", "test"):
        p.add_argument(f"--{split}", type=int, default=None)
    p.add_argument("--shift", help="preset name (phone_capture, scanner_b) or a shift spec JSON")
    p.add_argument("--domain", default="source")
    _add_overrides(p, "size", "seed")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="supervised pretraining")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_overrides(p, "epochs", "seed", "lr", "batch_size", "patch_size")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("adapt", help="unsupervised adaptation on a shifted domain")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")
    _add_overrides(p, "epochs", "seed", "lr", "batch_size", "vwsl_gamma", "n_runs")
    p.set_defaults(handler=cmd_adapt)

    p = sub.add_parser("eval", help="Dice on one or more manifests")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, nargs="+")
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default=EvalMode.SINGLE_PASS.value)
    p.add_argument("--n-runs", dest="n_runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="segment one PGM image")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default=EvalMode.SINGLE_PASS.value)
    p.add_argument("--n-runs", dest="n_runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None, help="resize the image to SIZE x SIZE first")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("info", help="parameter count, file size and config of a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(handler=cmd_info)

    p = sub.add_parser("ablate", help="adapt once per VWSL gamma and compare")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--gammas", default="0,1e2,1e3,1e4")
    _add_overrides(p, "epochs", "seed", "lr", "batch_size", "n_runs")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)

    try:
        return args.handler(args)
    except NumericalError as e:
        logger.debug(traceback.format_exc())
        print(f"error: {e.diagnostic()}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (NcaError, OSError) as e:
        logger.debug(traceback.format_exc())
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT

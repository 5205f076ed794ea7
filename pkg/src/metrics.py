"""Dice, the evaluation harness, overlays and the results table."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from src.autodiff import ops
from src.autodiff.ops import Mode
from src.autodiff.rng import Rng
from src.autodiff.tensor import Tensor
from src.datasets import SampleRecord
from src.errors import ShapeError
from src.nca.model import MedNcaModel, forward
from utils.helpers import default_workers
from utils.image_processing import render_overlay, write_pgm

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("model", "train_domain", "eval_domain", "mode", "dice_mean", "dice_std", "n")


class EvalMode(str, Enum):
    SINGLE_PASS = "single-pass"
    ENSEMBLE_MEAN = "ensemble-mean"


def dice_metric(pred: np.ndarray, mask: np.ndarray) -> float:
    """2|P and T| / (|P| + |T|) on binary maps. Both empty counts as a perfect 1.0."""
    p = np.asarray(pred) > 0.5
    t = np.asarray(mask) > 0.5
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and mask {t.shape} differ",
                         dimension="shape", expected=t.shape, actual=p.shape)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


@dataclass
class EvalReport:
    dice: list[float] = field(default_factory=list)
    sample_ids: list[str] = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    domain_tag: str = ""
    model_id: str = ""
    mode: str = EvalMode.SINGLE_PASS.value

    @classmethod
    def from_scores(cls, dice: Sequence[float], sample_ids: Sequence[str], domain_tag: str,
                    model_id: str, mode: EvalMode) -> "EvalReport":
        values = np.asarray(dice, dtype=np.float64)
        return cls(list(map(float, values)), list(sample_ids),
                   float(values.mean()) if values.size else 0.0,
                   float(values.std()) if values.size else 0.0,
                   domain_tag, model_id, EvalMode(mode).value)

    def to_dict(self) -> dict:
        return {
            "model": self.model_id,
            "domain": self.domain_tag,
            "mode": self.mode,
            "n": len(self.dice),
            "dice_mean": self.mean,
            "dice_std": self.std,
            "per_sample": [{"id": i, "dice": d} for i, d in zip(self.sample_ids, self.dice)],
        }


def predict_probabilities(model: MedNcaModel, image: np.ndarray, seed: int, index: int,
                          mode: EvalMode = EvalMode.SINGLE_PASS, n_runs: int = 10) -> np.ndarray:
    """Foreground probability for one (1, 1, h, w) image."""
    if EvalMode(mode) is EvalMode.ENSEMBLE_MEAN:
        from src.adapter import ensemble_predict  # adapter reports Dice through this module
        return ensemble_predict(model, image, n_runs, seed, stream=(index,)).mean
    logits = forward(model, Tensor(image), Rng(seed, (index,)), Mode.EVAL).logits_l2
    return ops.sigmoid(logits).data


def evaluate(model: MedNcaModel, records: Sequence[SampleRecord], seed: int = 0,
             mode: EvalMode = EvalMode.SINGLE_PASS, n_runs: int = 10, model_id: str = "",
             workers: int | None = None) -> EvalReport:
    """Dice per sample (prediction = probability > 0.5). Deterministic per seed.

    Samples are scored in parallel; results come back in input order.
    """
    mode = EvalMode(mode)
    labeled = [r for r in records if r.mask is not None]

    def score(item: tuple[int, SampleRecord]) -> float:
        index, record = item
        probs = predict_probabilities(model, record.image, seed, index, mode, n_runs)
        return dice_metric(probs > 0.5, record.mask)

    workers = workers or default_workers()
    items = list(enumerate(labeled))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, items))
    else:
        scores = [score(item) for item in items]
    domain = labeled[0].domain_tag if labeled else ""
    return EvalReport.from_scores(scores, [r.id for r in labeled], domain, model_id, mode)


def export_overlay(image: np.ndarray, pred: np.ndarray, mask: np.ndarray | None = None,
                   path: str | Path | None = None) -> np.ndarray:
    """Image with the prediction contour (255) and optional ground-truth contour (128).

    Returns the uint8 overlay; also writes it when ``path`` is given.
    """
    overlay = render_overlay(np.asarray(image).reshape(np.shape(image)[-2:]),
                             np.asarray(pred).reshape(np.shape(pred)[-2:]) > 0.5,
                             None if mask is None else np.asarray(mask).reshape(np.shape(mask)[-2:]) > 0.5)
    if path is not None:
        write_pgm(path, overlay)
    return overlay


def write_results_csv(path: str | Path, rows: Sequence[dict], append: bool = True) -> Path:
    """Cross-domain table, one row per (model, eval domain, mode)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists() or not append
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULT_COLUMNS})
    return path


def results_row(report: EvalReport, train_domain: str) -> dict:
    return {
        "model": report.model_id,
        "train_domain": train_domain,
        "eval_domain": report.domain_tag,
        "mode": report.mode,
        "dice_mean": f"{report.mean:.6f}",
        "dice_std": f"{report.std:.6f}",
        "n": len(report.dice),
    }

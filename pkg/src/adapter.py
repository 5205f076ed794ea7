"""Unsupervised adaptation with the variance-weighted segmentation loss.

Phase 1 runs the frozen pretrained model ``n_runs`` times per unlabeled
image. It keeps the per-pixel mean (which becomes the binarized surrogate
target) and the standard deviation (which becomes the weight map
w = 1 - 2*std).

Phase 2 fine-tunes for ``epochs`` epochs. Each batch gets two independent
stochastic forwards o1, o2, scored with ``vwsl`` against the Phase-1
surrogates. BN running stats stay frozen by default; gamma/beta still train.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from src.autodiff import ops
from src.autodiff.ops import Mode
from src.autodiff.optim import Adam
from src.autodiff.rng import Rng
from src.autodiff.tensor import Tape, Tensor
from src.datasets import SampleRecord
from src.errors import ConfigError, DatasetError, NumericalError
from src.losses import LossConfig, consistency_total, variance_weights, vwsl
from src.metrics import evaluate
from src.nca.model import MedNcaModel, forward
from src.trainer import TrainConfig, parameter_norms
from utils.helpers import default_workers

logger = logging.getLogger(__name__)

ProgressFn = Callable[[int, int, float], None]


@dataclass
class EnsembleStats:
    mean: np.ndarray  # (n, 1, h, w), in [0, 1]
    std: np.ndarray  # (n, 1, h, w), in [0, 0.5], population convention
    n_runs: int = 10


@dataclass
class Surrogate:
    target: np.ndarray
    weights: np.ndarray


@dataclass
class AdaptConfig:
    n_runs: int = 10
    epochs: int = 100
    vwsl_gamma: float = 1e3
    lr: float = TrainConfig.lr / 10
    batch_size: int = 8
    seed: int = 0
    freeze_bn_stats: bool = True
    # 0 = never refresh; k > 0 = recompute the surrogates every k epochs.
    stats_refresh_every: int = 0

    def validate(self) -> "AdaptConfig":
        if self.n_runs < 2:
            raise ConfigError(f"n_runs must be >= 2, got {self.n_runs}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.vwsl_gamma < 0:
            raise ConfigError(f"vwsl_gamma must be >= 0, got {self.vwsl_gamma}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stats_refresh_every < 0:
            raise ConfigError("stats_refresh_every must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptReport:
    loss: list[float] = field(default_factory=list)
    consistency: list[float] = field(default_factory=list)
    dice_before: float | None = None
    dice_after: float | None = None
    surrogate_foreground: float = 0.0
    adapted_foreground: float | None = None
    wall_time_s: float = 0.0
    vwsl_gamma: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# --- Phase 1 ---

def ensemble_predict(model: MedNcaModel, image: np.ndarray | Tensor, n_runs: int = 10, seed: int = 0,
                     stream: tuple[int, ...] = ()) -> EnsembleStats:
    """Mean and population std of ``n_runs`` sigmoid(level-2) predictions, Eval mode."""
    if n_runs < 2:
        raise ConfigError(f"ensemble needs n_runs >= 2, got {n_runs}")
    image = image if isinstance(image, Tensor) else Tensor(image)
    base = Rng(seed, stream)
    runs = np.stack([
        ops.sigmoid(forward(model, image, base.child(run), Mode.EVAL).logits_l2).data.astype(np.float64)
        for run in range(n_runs)
    ])
    mean = runs.mean(axis=0)
    std = runs.std(axis=0)
    return EnsembleStats(mean.astype(np.float32), std.astype(np.float32), n_runs)


def build_surrogate(stats: EnsembleStats, clamp: bool = True) -> Surrogate:
    """Target = mean >= 0.5 (ties go to foreground); weights = clamp(1 - 2*std, 0, 1)."""
    target = (stats.mean >= 0.5).astype(np.float32)
    return Surrogate(target, variance_weights(stats.std, clamp).astype(np.float32))


def compute_surrogates(model: MedNcaModel, records: Sequence[SampleRecord], cfg: AdaptConfig,
                       round_index: int = 0, workers: int | None = None
                       ) -> tuple[list[EnsembleStats], list[Surrogate]]:
    """Phase 1 for every image. Images are independent, so they run in parallel."""
    def one(item: tuple[int, SampleRecord]) -> EnsembleStats:
        index, record = item
        return ensemble_predict(model, record.image, cfg.n_runs, cfg.seed, stream=(0, round_index, index))

    items = list(enumerate(records))
    workers = workers or default_workers()
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(one, items))
    else:
        stats = [one(item) for item in items]
    return stats, [build_surrogate(s) for s in stats]


# --- Phase 2 ---

def _foreground_fraction(model: MedNcaModel, records: Sequence[SampleRecord], seed: int) -> float:
    total = 0.0
    for index, record in enumerate(records):
        logits = forward(model, Tensor(record.image), Rng(seed, (3, index)), Mode.EVAL).logits_l2
        total += float((ops.sigmoid(logits).data > 0.5).mean())
    return total / len(records)


def _reference_dice(model: MedNcaModel, records: Sequence[SampleRecord], seed: int) -> float | None:
    if not any(r.mask is not None for r in records):
        return None
    return evaluate(model, records, seed).mean


def adapt(model: MedNcaModel, dataset: Sequence[SampleRecord], cfg: AdaptConfig,
          loss_cfg: LossConfig | None = None, progress: ProgressFn | None = None,
          stats_out: list | None = None) -> tuple[MedNcaModel, AdaptReport]:
    """Fine-tune a copy of ``model`` on unlabeled ``dataset``.

    Masks in ``dataset`` are never used for training; when present they only
    feed the before/after Dice in the report. ``stats_out``, if given,
    receives the Phase-1 ``EnsembleStats`` per image (for map export).
    """
    cfg.validate()
    loss_cfg = LossConfig(**{**(loss_cfg or LossConfig()).to_dict(), "vwsl_gamma": cfg.vwsl_gamma}).validate()
    report = AdaptReport(vwsl_gamma=cfg.vwsl_gamma)
    if not dataset:
        raise DatasetError("adaptation dataset is empty")
    if cfg.epochs == 0:
        return model, report

    started = time.perf_counter()
    report.dice_before = _reference_dice(model, dataset, cfg.seed)
    model = model.copy()
    params = model.parameters()
    optimizer = Adam(cfg.lr)
    root = Rng(cfg.seed)
    bn_mode = Mode.EVAL if cfg.freeze_bn_stats else Mode.TRAIN

    stats, surrogates = compute_surrogates(model, dataset, cfg)
    if stats_out is not None:
        stats_out.extend(stats)
    report.surrogate_foreground = float(np.mean([s.target.mean() for s in surrogates]))
    logger.info("phase 1: %d images x %d runs, surrogate foreground %.3f",
                len(dataset), cfg.n_runs, report.surrogate_foreground)

    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        if cfg.stats_refresh_every and epoch and epoch % cfg.stats_refresh_every == 0:
            _, surrogates = compute_surrogates(model, dataset, cfg, round_index=epoch)
        order = root.child(1, epoch).permutation(len(dataset))
        epoch_loss = 0.0
        epoch_consistency = 0.0
        for batch in range(n_batches):
            picked = order[batch * cfg.batch_size:(batch + 1) * cfg.batch_size]
            images = Tensor(np.concatenate([dataset[i].image for i in picked]))
            target = Tensor(np.concatenate([surrogates[i].target for i in picked]))
            weights = Tensor(np.concatenate([surrogates[i].weights for i in picked]))
            with Tape() as tape:
                first = forward(model, images, root.child(2, epoch, batch, 0), bn_mode)
                second = forward(model, images, root.child(2, epoch, batch, 1), bn_mode)
                outputs = {"level1": (first.logits_l1, second.logits_l1),
                           "level2": (first.logits_l2, second.logits_l2)}
                loss = vwsl(outputs, target, weights, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"adaptation loss became {value}", epoch=epoch, batch=batch,
                                     parameter_norms=parameter_norms(model))
            epoch_consistency += consistency_total(outputs).item()
            grads = tape.backward(loss, params)
            optimizer.step(params, grads)
            epoch_loss += value
        report.loss.append(epoch_loss / n_batches)
        report.consistency.append(epoch_consistency / n_batches)
        if progress is not None:
            progress(epoch + 1, cfg.epochs, report.loss[-1])

    report.adapted_foreground = _foreground_fraction(model, dataset, cfg.seed)
    report.dice_after = _reference_dice(model, dataset, cfg.seed)
    report.wall_time_s = time.perf_counter() - started
    logger.info("adaptation done: loss %.5f -> %.5f, dice %s -> %s",
                report.loss[0], report.loss[-1], report.dice_before, report.dice_after)
    return model, report


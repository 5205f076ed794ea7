"""Supervised pretraining of the Med-NCA on a labeled split.

Each epoch shuffles the split, trains on random patches with Adam and an
exponentially decaying learning rate, and reports through a progress
callback. Validation Dice picks the best checkpoint. A NaN or Inf loss
aborts with the largest parameter norms attached.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from src.autodiff.ops import Mode
from src.autodiff.optim import Adam
from src.autodiff.rng import Rng
from src.autodiff.tensor import Tape, Tensor
from src.datasets import SampleRecord, stack_batch
from src.errors import ConfigError, DatasetError, NumericalError
from src.losses import LossConfig, supervised_loss
from src.metrics import evaluate
from src.nca.checkpoint import save_checkpoint
from src.nca.model import (PARAMETER_FIELDS, MedNcaConfig, MedNcaModel, NcaCellParams,
                           count_parameters, field_shapes, forward_training_patch)

logger = logging.getLogger(__name__)

# Validation always uses this seed so epochs are compared on the same masks.
VALIDATION_SEED = 1234

ProgressFn = Callable[[int, int, float], None]


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 8
    lr: float = 1.6e-3
    beta1: float = 0.9
    beta2: float = 0.99
    lr_final_fraction: float = 0.01
    seed: int = 0
    patch_size: int = 64
    checkpoint_every: int = 0
    val_every: int = 10

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.lr_final_fraction <= 1:
            raise ConfigError(f"lr_final_fraction must be in (0, 1], got {self.lr_final_fraction}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.checkpoint_every < 0 or self.val_every < 0:
            raise ConfigError("checkpoint_every and val_every must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_dice: float | None = None
    best_checkpoint: str | None = None
    parameter_count: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_dice": [[epoch, dice] for epoch, dice in self.val_dice],
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "best_checkpoint": self.best_checkpoint,
            "parameter_count": self.parameter_count,
            "wall_time_s": self.wall_time_s,
        }


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Exponential decay from ``lr`` to ``lr * lr_final_fraction`` at the last epoch."""
    if cfg.epochs <= 1:
        return cfg.lr
    return cfg.lr * cfg.lr_final_fraction ** (epoch / (cfg.epochs - 1))


def initialize_parameters(config: MedNcaConfig, rng: Rng, dtype=np.float32) -> MedNcaModel:
    """Uniform(-k, k), k = 1/sqrt(fan_in), for convs and fc0; fc1 starts at zero.

    Zero fc1 makes an untrained cell step the identity, so early rollouts
    can't blow the state up.
    """
    config.validate()
    shapes = field_shapes(config.channels, config.hidden)
    fan_in = {
        "perceive1_w": config.channels * 9, "perceive1_b": config.channels * 9,
        "perceive2_w": config.channels * 9, "perceive2_b": config.channels * 9,
        "fc0_w": 3 * config.channels, "fc0_b": 3 * config.channels,
    }
    cells = []
    for level in (1, 2):
        level_rng = rng.child(level)
        tensors = {}
        for index, (name, shape) in enumerate(shapes.items()):
            if name in fan_in:
                bound = 1.0 / math.sqrt(fan_in[name])
                data = level_rng.child(index).uniform(-bound, bound, shape)
            elif name in ("bn_gamma", "bn_running_var"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=name in PARAMETER_FIELDS,
                                   name=name)
        cells.append(NcaCellParams(**tensors))
    return MedNcaModel(config, cells[0], cells[1])


def parameter_norms(model: MedNcaModel) -> dict[str, float]:
    return {name: float(np.linalg.norm(t.data)) for name, t in model.parameters().items()}


def _check_records(records: Sequence[SampleRecord], what: str) -> None:
    if not records:
        raise DatasetError(f"{what} dataset is empty")
    missing = [r.id for r in records if r.mask is None]
    if missing:
        raise DatasetError(f"{what} samples without masks: {missing[:5]}")


def train(model: MedNcaModel, dataset: Sequence[SampleRecord], cfg: TrainConfig,
          val_dataset: Sequence[SampleRecord] | None = None, loss_cfg: LossConfig | None = None,
          out_dir: str | Path | None = None,
          progress: ProgressFn | None = None) -> tuple[MedNcaModel, TrainReport]:
    """Pretrain ``model`` (a copy; the input is left untouched).

    Returns the best model by validation Dice when a validation split is
    given, otherwise the final one.
    """
    cfg.validate()
    loss_cfg = (loss_cfg or LossConfig()).validate()
    report = TrainReport(parameter_count=count_parameters(model))
    if cfg.epochs == 0:
        return model, report
    _check_records(dataset, "training")
    if val_dataset:
        _check_records(val_dataset, "validation")

    started = time.perf_counter()
    model = model.copy()
    params = model.parameters()
    optimizer = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    root = Rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    best_model = None

    size = dataset[0].image.shape[-1]
    patch_size = min(cfg.patch_size, size, dataset[0].image.shape[-2])
    n_batches = math.ceil(len(dataset) / cfg.batch_size)

    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = root.child(0, epoch).permutation(len(dataset))
        epoch_loss = 0.0
        for batch in range(n_batches):
            picked = [dataset[i] for i in order[batch * cfg.batch_size:(batch + 1) * cfg.batch_size]]
            images, masks = stack_batch(picked)
            with Tape() as tape:
                out = forward_training_patch(model, images, masks, root.child(1, epoch, batch),
                                             patch_size, Mode.TRAIN)
                loss = supervised_loss({"level1": out.logits_l1, "level2": out.logits_l2},
                                       {"level1": out.target_l1, "level2": out.target_l2}, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"loss became {value}", epoch=epoch, batch=batch,
                                     parameter_norms=parameter_norms(model))
            grads = tape.backward(loss, params)
            optimizer.step(params, grads, lr=lr)
            epoch_loss += value
        report.train_loss.append(epoch_loss / n_batches)
        logger.debug("epoch %d loss %.5f lr %.3g", epoch, report.train_loss[-1], lr)

        last = epoch == cfg.epochs - 1
        if val_dataset and cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or last):
            dice = evaluate(model, val_dataset, VALIDATION_SEED).mean
            report.val_dice.append((epoch, dice))
            if report.best_val_dice is None or dice > report.best_val_dice:
                report.best_val_dice = dice
                report.best_epoch = epoch
                best_model = model.copy()
                if out_dir is not None:
                    save_checkpoint(best_model, out_dir / "best.ckpt")
                    report.best_checkpoint = str(out_dir / "best.ckpt")
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch_{epoch + 1:05d}.ckpt")
        if progress is not None:
            progress(epoch + 1, cfg.epochs, report.train_loss[-1])

    report.wall_time_s = time.perf_counter() - started
    final = best_model if best_model is not None else model
    logger.info("training done: %d epochs, final loss %.5f, best val dice %s",
                cfg.epochs, report.train_loss[-1], report.best_val_dice)
    return final, report

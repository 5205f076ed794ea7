"""Two-level Med-NCA: the cell rule, rollouts and the low-res -> high-res handoff.

State layout per pixel (C channels)::

    [0, input_channels)                                  image, never updated
    [input_channels, input_channels + output_channels)   raw segmentation logits
    [..., C)                                             hidden

Per level, one cell update is::

    x     = concat(state, perceive1(state), perceive2(state))    # 3C
    delta = fc1(relu(bn(fc0(x))))                                # C
    state = state + delta * fire_mask                            # image re-pinned

With C=16 and 128 hidden units that's 13 216 parameters per level and
26 432 for the model.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np

from src.autodiff import ops
from src.autodiff.ops import Mode, ResampleMode
from src.autodiff.rng import Rng
from src.autodiff.tensor import Tensor
from src.errors import ConfigError, ShapeError
from src.losses import downsample_target

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class MedNcaConfig:
    channels: int = 16
    hidden: int = 128
    scale_factor: int = 4
    steps_level1: int = 32
    steps_level2: int = 16
    fire_rate: float = 0.5
    input_channels: int = 1
    output_channels: int = 1

    def validate(self) -> "MedNcaConfig":
        if self.channels < 1 or self.hidden < 1:
            raise ConfigError(f"channels and hidden must be >= 1, got {self.channels}, {self.hidden}")
        if self.scale_factor < 1:
            raise ConfigError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if self.steps_level1 < 0 or self.steps_level2 < 0:
            raise ConfigError("step counts can't be negative")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ConfigError(f"fire_rate must be in (0, 1], got {self.fire_rate}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("need at least one input and one output channel")
        if self.input_channels + self.output_channels > self.channels:
            raise ConfigError(
                f"input_channels + output_channels ({self.input_channels} + {self.output_channels}) "
                f"exceeds channels ({self.channels})")
        return self

    @property
    def logit_slice(self) -> tuple[int, int]:
        return self.input_channels, self.input_channels + self.output_channels

    def to_dict(self) -> dict:
        return asdict(self)


# Declared order matters: it's the checkpoint's tensor order too.
PARAMETER_FIELDS = ("perceive1_w", "perceive1_b", "perceive2_w", "perceive2_b",
                    "fc0_w", "fc0_b", "bn_gamma", "bn_beta", "fc1_w")
BUFFER_FIELDS = ("bn_running_mean", "bn_running_var")
FIELD_ORDER = ("perceive1_w", "perceive1_b", "perceive2_w", "perceive2_b",
               "fc0_w", "fc0_b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "fc1_w")


def field_shapes(channels: int, hidden: int) -> dict[str, tuple[int, ...]]:
    c, h = channels, hidden
    return {
        "perceive1_w": (c, c, 3, 3), "perceive1_b": (c,),
        "perceive2_w": (c, c, 3, 3), "perceive2_b": (c,),
        "fc0_w": (h, 3 * c), "fc0_b": (h,),
        "bn_gamma": (h,), "bn_beta": (h,),
        "bn_running_mean": (h,), "bn_running_var": (h,),
        "fc1_w": (c, h),
    }


def expected_parameter_count(channels: int, hidden: int) -> int:
    """Closed form: 2(9C^2 + C) + (3C*H + H) + 2H + H*C per level, two levels."""
    c, h = channels, hidden
    per_cell = 2 * (c * c * 9 + c) + (3 * c * h + h) + 2 * h + h * c
    return 2 * per_cell


@dataclass
class NcaCellParams:
    perceive1_w: Tensor
    perceive1_b: Tensor
    perceive2_w: Tensor
    perceive2_b: Tensor
    fc0_w: Tensor
    fc0_b: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_running_mean: Tensor
    bn_running_var: Tensor
    fc1_w: Tensor

    @classmethod
    def zeros(cls, channels: int, hidden: int, dtype=np.float32) -> "NcaCellParams":
        """All-zero weights with an identity batch norm (gamma 1, running var 1)."""
        tensors = {}
        for name, shape in field_shapes(channels, hidden).items():
            data = np.zeros(shape, dtype=dtype)
            if name in ("bn_gamma", "bn_running_var"):
                data[...] = 1
            tensors[name] = Tensor(data, requires_grad=name in PARAMETER_FIELDS, name=name)
        return cls(**tensors)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + name: getattr(self, name) for name in PARAMETER_FIELDS}

    def buffers(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + name: getattr(self, name) for name in BUFFER_FIELDS}

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in FIELD_ORDER}

    @property
    def channels(self) -> int:
        return self.perceive1_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.fc0_w.shape[0]


@dataclass
class MedNcaModel:
    config: MedNcaConfig
    level1: NcaCellParams
    level2: NcaCellParams

    @classmethod
    def zeros(cls, config: MedNcaConfig, dtype=np.float32) -> "MedNcaModel":
        config.validate()
        return cls(config,
                   NcaCellParams.zeros(config.channels, config.hidden, dtype),
                   NcaCellParams.zeros(config.channels, config.hidden, dtype))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.level1.parameters("level1."), **self.level2.parameters("level2.")}

    def buffers(self) -> dict[str, Tensor]:
        return {**self.level1.buffers("level1."), **self.level2.buffers("level2.")}

    def count_parameters(self) -> int:
        return count_parameters(self)

    def copy(self) -> "MedNcaModel":
        return copy.deepcopy(self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every tensor, buffers included."""
        out = {}
        for level, cell in (("level1", self.level1), ("level2", self.level2)):
            for name, t in cell.tensors().items():
                out[f"{level}.{name}"] = t.data
        return out


def count_parameters(model: MedNcaModel) -> int:
    """Trainable parameters only; BN running stats aren't counted."""
    return int(np.sum([t.size for t in model.parameters().values()]))


# --- the cell rule ---

def _check_fire_rate(fire_rate: float) -> None:
    if not 0.0 < fire_rate <= 1.0:
        raise ConfigError(f"fire_rate must be in (0, 1], got {fire_rate}")


def cell_step(state: Tensor, params: NcaCellParams, fire_rate: float, rng: Rng, mode: Mode,
              input_channels: int = 1) -> Tensor:
    """One stochastic update of every cell."""
    _check_fire_rate(fire_rate)
    if state.ndim != 4 or state.shape[1] != params.channels:
        raise ShapeError(f"state must have {params.channels} channels, got shape {state.shape}",
                         dimension="channels", expected=params.channels, actual=state.shape)

    perceived = ops.concat([
        state,
        ops.conv2d_3x3(state, params.perceive1_w, params.perceive1_b),
        ops.conv2d_3x3(state, params.perceive2_w, params.perceive2_b),
    ])
    hidden = ops.dense_1x1(perceived, params.fc0_w, params.fc0_b)
    hidden = ops.batch_norm(hidden, params.bn_gamma, params.bn_beta,
                            params.bn_running_mean, params.bn_running_var,
                            mode, momentum=BN_MOMENTUM, eps=BN_EPS)
    delta = ops.dense_1x1(ops.relu(hidden), params.fc1_w)

    n, _, h, w = state.shape
    # One coin per cell, shared by all of its channels.
    fire = rng.bernoulli((n, 1, h, w), fire_rate, dtype=state.dtype)
    updated = state + ops.mask_pixels(delta, fire)
    # Image channels go back to exactly what they were.
    return ops.replace_channels(updated, ops.slice_channels(state, 0, input_channels), 0)


def rollout(state: Tensor, params: NcaCellParams, steps: int, fire_rate: float, rng: Rng,
            mode: Mode, input_channels: int = 1) -> Tensor:
    """``steps`` cell updates; step i draws from ``rng.child(i)``."""
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    for step in range(steps):
        state = cell_step(state, params, fire_rate, rng.child(step), mode, input_channels)
    return state


# --- the two-level model ---

@dataclass
class NcaOutputs:
    logits_l1: Tensor
    logits_l2: Tensor


@dataclass
class PatchOutputs:
    logits_l1: Tensor
    target_l1: Tensor
    logits_l2: Tensor
    target_l2: Tensor
    offset: tuple[int, int]


def _check_image(model: MedNcaModel, image: Tensor) -> None:
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != cfg.input_channels:
        raise ShapeError(f"image must be (n, {cfg.input_channels}, h, w), got {image.shape}",
                         dimension="channels", expected=cfg.input_channels, actual=image.shape)
    _, _, h, w = image.shape
    s = cfg.scale_factor
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} is not divisible by scale_factor {s}",
                         dimension="spatial", expected=f"multiple of {s}", actual=(h, w))


def seed_state(image: Tensor, channels: int) -> Tensor:
    """Image in the first channels, zeros everywhere else."""
    n, c, h, w = image.shape
    return ops.concat([image, Tensor(np.zeros((n, channels - c, h, w), dtype=image.dtype))])


def _level1(model: MedNcaModel, image: Tensor, rng: Rng, mode: Mode) -> Tensor:
    cfg = model.config
    _, _, h, w = image.shape
    small = ops.resample(image, h // cfg.scale_factor, w // cfg.scale_factor, ResampleMode.BILINEAR)
    state = seed_state(small, cfg.channels)
    return rollout(state, model.level1, cfg.steps_level1, cfg.fire_rate, rng.child(1), mode,
                   cfg.input_channels)


def _handoff(model: MedNcaModel, state1: Tensor, image: Tensor) -> Tensor:
    """Upsample everything but the image, then put the full-res image back in."""
    cfg = model.config
    _, _, h, w = image.shape
    carried = ops.resample(ops.slice_channels(state1, cfg.input_channels, cfg.channels), h, w,
                           ResampleMode.BILINEAR)
    return ops.concat([image, carried])


def forward(model: MedNcaModel, image: Tensor, rng: Rng, mode: Mode = Mode.EVAL) -> NcaOutputs:
    """Full two-level inference. Returns raw logits per level."""
    _check_image(model, image)
    cfg = model.config
    lo, hi = cfg.logit_slice
    state1 = _level1(model, image, rng, mode)
    state2 = rollout(_handoff(model, state1, image), model.level2, cfg.steps_level2, cfg.fire_rate,
                     rng.child(2), mode, cfg.input_channels)
    return NcaOutputs(ops.slice_channels(state1, lo, hi), ops.slice_channels(state2, lo, hi))


def sample_patch_offset(rng: Rng, h: int, w: int, patch_size: int) -> tuple[int, int]:
    """Uniform top-left corner for a ``patch_size`` square inside h x w."""
    if patch_size > h or patch_size > w or patch_size < 1:
        raise ShapeError(f"patch_size {patch_size} doesn't fit in {h}x{w}",
                         dimension="patch", expected=f"<= {min(h, w)}", actual=patch_size)
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    return top, left


def forward_training_patch(model: MedNcaModel, image: Tensor, mask_full: Tensor, rng: Rng,
                           patch_size: int, mode: Mode = Mode.TRAIN) -> PatchOutputs:
    """Level 1 on the whole (downscaled) image, level 2 on a random patch only.

    Level 2 is where the memory goes, so it only ever sees ``patch_size``
    pixels square. The offset comes from ``rng.child(0)``; levels use the
    same sub-streams as ``forward``, so ``patch_size == h`` reproduces it.
    """
    _check_image(model, image)
    if mask_full.shape != (image.shape[0], 1) + image.shape[2:]:
        raise ShapeError(f"mask must be {(image.shape[0], 1) + image.shape[2:]}, got {mask_full.shape}",
                         dimension="mask", expected=image.shape, actual=mask_full.shape)
    cfg = model.config
    lo, hi = cfg.logit_slice
    _, _, h, w = image.shape
    top, left = sample_patch_offset(rng.child(0), h, w, patch_size)

    state1 = _level1(model, image, rng, mode)
    handoff = _handoff(model, state1, image)
    patch = ops.crop(handoff, top, left, patch_size, patch_size)
    state2 = rollout(patch, model.level2, cfg.steps_level2, cfg.fire_rate, rng.child(2), mode,
                     cfg.input_channels)

    logits_l1 = ops.slice_channels(state1, lo, hi)
    target_l1 = downsample_target(mask_full, logits_l1.shape[2], logits_l1.shape[3])
    target_l2 = ops.crop(mask_full, top, left, patch_size, patch_size)
    return PatchOutputs(logits_l1, target_l1, ops.slice_channels(state2, lo, hi), target_l2, (top, left))


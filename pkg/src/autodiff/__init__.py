from src.autodiff.tensor import Tensor, Tape, active_tape, backward, merge_gradients
from src.autodiff.ops import Mode, ResampleMode
from src.autodiff.optim import Adam, AdamState, adam_step
from src.autodiff.rng import Rng

__all__ = [
    "Tensor", "Tape", "active_tape", "backward", "merge_gradients",
    "Mode", "ResampleMode",
    "Adam", "AdamState", "adam_step",
    "Rng",
]

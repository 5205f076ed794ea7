import numpy as np
import pytest

from src.autodiff.tensor import Tensor
from src.datasets import SampleRecord, generate_synthetic
from src.nca.model import MedNcaConfig, MedNcaModel, NcaCellParams, field_shapes, PARAMETER_FIELDS


def numerical_gradient(func, array: np.ndarray, index=None, delta: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``func()`` w.r.t. ``array`` (changed in place, then restored).

    ``index`` limits the check to a list of multi-indices; other entries stay 0.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    indices = index if index is not None else list(np.ndindex(array.shape))
    for idx in indices:
        original = array[idx]
        array[idx] = original + delta
        plus = float(func())
        array[idx] = original - delta
        minus = float(func())
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * delta)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def random_model(config: MedNcaConfig, seed: int = 0, dtype=np.float64, scale: float = 0.3) -> MedNcaModel:
    """Every weight random (fc1 included), BN stats plausible. For gradient checks."""
    gen = np.random.default_rng(seed)
    cells = []
    for _ in range(2):
        tensors = {}
        for name, shape in field_shapes(config.channels, config.hidden).items():
            if name == "bn_running_var":
                data = gen.uniform(0.5, 1.5, shape)
            elif name == "bn_gamma":
                data = gen.uniform(0.8, 1.2, shape)
            else:
                data = gen.normal(0.0, scale, shape)
            tensors[name] = Tensor(data.astype(dtype), requires_grad=name in PARAMETER_FIELDS, name=name)
        cells.append(NcaCellParams(**tensors))
    return MedNcaModel(config, cells[0], cells[1])


@pytest.fixture
def tiny_config() -> MedNcaConfig:
    return MedNcaConfig(channels=4, hidden=8, scale_factor=2, steps_level1=2, steps_level2=2, fire_rate=0.5)


@pytest.fixture
def blob_record() -> SampleRecord:
    """16x16 image with a bright square whose mask is the square itself."""
    image = np.full((1, 1, 16, 16), 0.2, dtype=np.float32)
    mask = np.zeros((1, 1, 16, 16), dtype=np.float32)
    image[..., 4:12, 5:11] = 0.8
    mask[..., 4:12, 5:11] = 1.0
    return SampleRecord("blob", image, mask, "source")


@pytest.fixture
def synth_dir(tmp_path):
    """Small synthetic dataset on disk, 16x16, 4/2/3 samples, with a scanner_b copy."""
    from src.datasets import SHIFT_PRESETS

    out = tmp_path / "data"
    generate_synthetic(out, {"train": 4, "val": 2, "test": 3}, size=16, seed=3, shift=SHIFT_PRESETS["scanner_b"])
    return out

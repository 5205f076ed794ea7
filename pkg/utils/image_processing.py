from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.errors import DatasetError

# All the Pillow bits live here, so the rest of the code only ever sees numpy arrays.

# Gray levels burned into overlays. Ground truth goes down first, the
# prediction on top of it.
GROUND_TRUTH_LEVEL = 128
PREDICTION_LEVEL = 255


def read_pgm(path: str | Path) -> np.ndarray:
    """Reads an 8-bit binary PGM (P5) into a (h, w) uint8 array."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
        # Pillow would happily read P2/P6 too, but only P5 is part of the format contract.
        if magic != b"P5":
            raise DatasetError(f"{path}: not a binary PGM (P5), header starts with {magic!r}")
        with Image.open(path) as img:
            img.load()
            if img.mode != "L":
                raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
            return np.asarray(img, dtype=np.uint8).copy()
    except FileNotFoundError:
        raise DatasetError(f"file not found: {path}") from None
    except (UnidentifiedImageError, ValueError, SyntaxError, OSError) as e:
        if isinstance(e, DatasetError):
            raise
        # Pillow raises a zoo of things for a broken header; they all mean the same to us.
        raise DatasetError(f"{path}: malformed PGM ({e})") from e


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Writes a (h, w) uint8 array as P5. Same array in, same bytes out."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError(f"write_pgm wants a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PPM")


def to_uint8(values: np.ndarray, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Linearly maps [low, high] onto [0, 255], rounding and clipping."""
    scaled = (np.asarray(values, dtype=np.float64) - low) / (high - low) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def std_to_uint8(std: np.ndarray) -> np.ndarray:
    """Ensemble std lives in [0, 0.5]; that range becomes the full gray scale."""
    return to_uint8(std, 0.0, 0.5)


def boundary_mask(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` with at least one 4-neighbour outside it.

    Anything beyond the image border counts as outside.
    """
    inside = np.asarray(region, dtype=bool)
    padded = np.pad(inside, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return inside & ~interior


def render_overlay(image: np.ndarray, pred: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Grayscale base with contours burned in. Returns (h, w) uint8."""
    base = to_uint8(image)
    if mask is not None:
        base[boundary_mask(mask)] = GROUND_TRUTH_LEVEL
    base[boundary_mask(pred)] = PREDICTION_LEVEL
    return base

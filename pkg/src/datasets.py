"""Samples, manifests, and the synthetic two-lung benchmark with its domain shifts.

Manifest JSON::

    {"version": 1, "working_size": 64,
     "entries": [{"id": "train_0000", "image": "images/train_0000.pgm",
                  "mask": "masks/train_0000.pgm", "split": "train", "domain": "source"}]}

Paths are relative to the manifest's folder. Images are 8-bit P5 PGMs;
masks are PGMs where anything above 127 is foreground.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from src.autodiff import ops
from src.autodiff.ops import ResampleMode
from src.autodiff.rng import Rng
from src.autodiff.tensor import Tensor
from src.errors import ConfigError, DatasetError
from utils.helpers import read_json, write_json
from utils.image_processing import read_pgm, to_uint8, write_pgm

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_WORKING_SIZE = 256
MASK_THRESHOLD = 127


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray  # (1, 1, h, w) float32 in [0, 1]
    mask: np.ndarray | None = None  # (1, 1, h, w) float32 in {0, 1}
    domain_tag: str = "source"

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise DatasetError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class ManifestEntry:
    id: str
    image: str
    split: str
    domain: str = "source"
    mask: str | None = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "image": self.image}
        if self.mask is not None:
            out["mask"] = self.mask
        out["split"] = self.split
        out["domain"] = self.domain
        return out


@dataclass
class Manifest:
    root: Path
    working_size: int = DEFAULT_WORKING_SIZE
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def domains(self) -> list[str]:
        return sorted({e.domain for e in self.entries})


# --- manifests and loading ---

def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        raw = read_json(path)
    except ValueError as e:
        raise DatasetError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise DatasetError(f"{path}: manifest must be a JSON object, got {type(raw).__name__}")
    if raw.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {raw.get('version')!r}")
    items = raw.get("entries", [])
    if not isinstance(items, list):
        raise DatasetError(f"{path}: 'entries' must be a list")
    try:
        working_size = int(raw.get("working_size", DEFAULT_WORKING_SIZE))
    except (TypeError, ValueError):
        raise DatasetError(f"{path}: bad working_size {raw.get('working_size')!r}") from None
    if working_size <= 0:
        raise DatasetError(f"{path}: working_size must be > 0, got {working_size}")

    manifest = Manifest(path.parent, working_size)
    seen: set[str] = set()
    for item in items:
        if not isinstance(item, dict):
            raise DatasetError(f"{path}: every entry must be an object, got {item!r}")
        try:
            entry = ManifestEntry(id=str(item["id"]), image=item["image"], split=item["split"],
                                  domain=item.get("domain", "source"), mask=item.get("mask"))
        except KeyError as e:
            raise DatasetError(f"{path}: entry missing field {e}") from None
        if not isinstance(entry.image, str) or not (entry.mask is None or isinstance(entry.mask, str)):
            raise DatasetError(f"{path}: {entry.id} image/mask paths must be strings")
        if entry.split not in SPLITS:
            raise DatasetError(f"{path}: entry {entry.id} has unknown split {entry.split!r}")
        # Unique ids also make the splits disjoint.
        if entry.id in seen:
            raise DatasetError(f"{path}: duplicate sample id {entry.id!r}")
        seen.add(entry.id)
        if check_files:
            for rel in (entry.image, entry.mask):
                if rel is not None and not (manifest.root / rel).is_file():
                    raise DatasetError(f"{path}: {entry.id} references missing file {rel}")
        manifest.entries.append(entry)
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    payload = {
        "version": MANIFEST_VERSION,
        "working_size": manifest.working_size,
        "entries": [e.to_dict() for e in manifest.entries],
    }
    return write_json(path, payload)


def _resize(array: np.ndarray, size: int, mode: ResampleMode) -> np.ndarray:
    if array.shape[-2:] == (size, size):
        return array
    return ops.resample(Tensor(array), size, size, mode).data


def load_sample(manifest: Manifest, entry: ManifestEntry) -> SampleRecord:
    pixels = read_pgm(manifest.root / entry.image)
    image = (pixels.astype(np.float32) / 255.0).reshape(1, 1, *pixels.shape)
    mask = None
    if entry.mask is not None:
        mask_pixels = read_pgm(manifest.root / entry.mask)
        if mask_pixels.shape != pixels.shape:
            raise DatasetError(f"{entry.id}: image is {pixels.shape}, mask is {mask_pixels.shape}")
        mask = (mask_pixels > MASK_THRESHOLD).astype(np.float32).reshape(image.shape)
        mask = _resize(mask, manifest.working_size, ResampleMode.NEAREST)
    image = _resize(image, manifest.working_size, ResampleMode.BILINEAR)
    return SampleRecord(entry.id, image.astype(np.float32), mask, entry.domain)


def load_split(manifest: Manifest, split: str) -> list[SampleRecord]:
    return [load_sample(manifest, e) for e in manifest.split(split)]


def save_sample(sample: SampleRecord, image_path: str | Path, mask_path: str | Path | None = None) -> None:
    write_pgm(image_path, to_uint8(sample.image[0, 0]))
    if mask_path is not None and sample.mask is not None:
        write_pgm(mask_path, (sample.mask[0, 0] > 0.5).astype(np.uint8) * 255)


def stack_batch(records: Sequence[SampleRecord]) -> tuple[Tensor, Tensor | None]:
    images = np.concatenate([r.image for r in records], axis=0)
    if any(r.mask is None for r in records):
        return Tensor(images), None
    return Tensor(images), Tensor(np.concatenate([r.mask for r in records], axis=0))


# --- synthetic anatomy ---

@dataclass(frozen=True)
class LungRanges:
    """Where the two ellipses may land, as fractions of the image side."""
    center_x_left: tuple[float, float] = (0.28, 0.36)
    center_x_right: tuple[float, float] = (0.64, 0.72)
    center_y: tuple[float, float] = (0.45, 0.55)
    semi_x: tuple[float, float] = (0.10, 0.14)
    semi_y: tuple[float, float] = (0.22, 0.30)
    rotation: tuple[float, float] = (-0.25, 0.25)
    lung_intensity: tuple[float, float] = (0.55, 0.75)
    background: tuple[float, float] = (0.08, 0.18)
    mediastinum: tuple[float, float] = (0.30, 0.40)


def _ellipse(size: int, cx: float, cy: float, ax: float, ay: float, angle: float) -> np.ndarray:
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _box_blur(image: np.ndarray) -> np.ndarray:
    padded = np.pad(image, 1, mode="edge")
    h, w = image.shape
    return sum(padded[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def synth_anatomy(size: int, rng: Rng, ranges: LungRanges = LungRanges()) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair as (size, size) float arrays."""
    mask = np.zeros((size, size), dtype=bool)
    for cx_range in (ranges.center_x_left, ranges.center_x_right):
        cx = rng.uniform(*cx_range) * size
        cy = rng.uniform(*ranges.center_y) * size
        ax = rng.uniform(*ranges.semi_x) * size
        ay = rng.uniform(*ranges.semi_y) * size
        mask |= _ellipse(size, cx, cy, ax, ay, rng.uniform(*ranges.rotation))

    coords = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    texture = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5)
        texture += 0.015 * np.sin(2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))

    image = np.full((size, size), rng.uniform(*ranges.background))
    column = np.abs(xx - 0.5) < 0.04
    image[column] = rng.uniform(*ranges.mediastinum)
    lung_level = rng.uniform(*ranges.lung_intensity)
    # Lungs get a touch brighter towards the bottom, like a real film.
    image[mask] = lung_level + 0.08 * (yy[mask] - 0.5)
    image = _box_blur(image) + texture + rng.normal(0.015, (size, size))
    return np.clip(image, 0.0, 1.0), mask.astype(np.float64)


def generate_synthetic(out_dir: str | Path, split_sizes: Mapping[str, int], size: int = 64,
                       seed: int = 0, shift: "ShiftSpec | None" = None,
                       domain: str = "source") -> Manifest:
    """Writes PGMs + ``manifest.json`` under ``out_dir``.

    With ``shift``, a second dataset over the *same* anatomy goes to
    ``out_dir/<shift.name>/`` with its own manifest. Masks are identical files.
    """
    out_dir = Path(out_dir)
    for split in split_sizes:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
    if size < 8:
        raise ConfigError(f"synthetic images need size >= 8, got {size}")

    root = Rng(seed)
    manifest = Manifest(out_dir, working_size=size)
    shifted = Manifest(out_dir / shift.name, working_size=size) if shift is not None else None
    for split_index, split in enumerate(SPLITS):
        for i in range(split_sizes.get(split, 0)):
            sample_id = f"{split}_{i:04d}"
            image, mask = synth_anatomy(size, root.child(split_index, i))
            record = SampleRecord(sample_id, image.reshape(1, 1, size, size).astype(np.float32),
                                  mask.reshape(1, 1, size, size).astype(np.float32), domain)
            entry = ManifestEntry(sample_id, f"images/{sample_id}.pgm", split, domain, f"masks/{sample_id}.pgm")
            save_sample(record, out_dir / entry.image, out_dir / entry.mask)
            manifest.entries.append(entry)
            if shifted is not None:
                moved = apply_shift(record, shift)
                shifted_entry = replace(entry, domain=moved.domain_tag)
                save_sample(moved, shifted.root / entry.image, shifted.root / entry.mask)
                shifted.entries.append(shifted_entry)

    save_manifest(manifest, out_dir / "manifest.json")
    if shifted is not None:
        save_manifest(shifted, shifted.root / "manifest.json")
    logger.info("wrote %d synthetic samples to %s", len(manifest.entries), out_dir)
    return manifest


# --- domain shift ---

@dataclass(frozen=True)
class MoireSpec:
    period_px: float
    angle_rad: float
    amplitude: float


@dataclass(frozen=True)
class ShiftSpec:
    gamma_correction: float = 1.0
    contrast_scale: float = 1.0
    gaussian_noise_sigma: float = 0.0
    bias_field_strength: float = 0.0
    moire: MoireSpec | None = None
    seed: int = 0
    name: str = "shift"

    def validate(self) -> "ShiftSpec":
        numbers = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("moire", "name")}
        if self.moire is not None:
            numbers.update({f"moire.{k}": v for k, v in asdict(self.moire).items()})
        for key, value in numbers.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"shift {key} must be a number, got {value!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"shift seed must be an integer, got {self.seed!r}")
        if not isinstance(self.name, str) or not self.name:
            raise ConfigError(f"shift name must be a non-empty string, got {self.name!r}")
        if self.gamma_correction <= 0:
            raise ConfigError(f"gamma_correction must be > 0, got {self.gamma_correction}")
        if self.gaussian_noise_sigma < 0 or self.bias_field_strength < 0:
            raise ConfigError("noise sigma and bias field strength must be >= 0")
        if self.moire is not None and self.moire.period_px <= 0:
            raise ConfigError(f"moire period must be > 0, got {self.moire.period_px}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ShiftSpec":
        if not isinstance(values, Mapping):
            raise ConfigError(f"shift spec must be a JSON object, got {type(values).__name__}")
        values = dict(values)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown shift keys: {sorted(unknown)}")
        moire = values.get("moire")
        try:
            if moire is not None:
                if not isinstance(moire, Mapping):
                    raise ConfigError(f"moire must be an object with {[f.name for f in fields(MoireSpec)]}")
                values["moire"] = MoireSpec(**moire)
            return cls(**values).validate()
        except TypeError as e:
            raise ConfigError(f"bad shift spec: {e}") from e


SHIFT_PRESETS: dict[str, ShiftSpec] = {
    # Photo of a lightbox/monitor: washed-out gamma, too much contrast, moire.
    "phone_capture": ShiftSpec(gamma_correction=0.6, contrast_scale=1.6, gaussian_noise_sigma=0.02,
                               bias_field_strength=0.05, moire=MoireSpec(6.0, 0.3, 0.12),
                               seed=7, name="phone_capture"),
    # Another hospital's scanner: milder, smoother changes.
    "scanner_b": ShiftSpec(gamma_correction=1.3, contrast_scale=0.8, gaussian_noise_sigma=0.03,
                           bias_field_strength=0.1, seed=11, name="scanner_b"),
}


def resolve_shift(name_or_path: str) -> ShiftSpec:
    """Preset name, or a path to a JSON shift spec."""
    if name_or_path in SHIFT_PRESETS:
        return SHIFT_PRESETS[name_or_path]
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"unknown shift preset or missing spec file: {name_or_path} "
                          f"(presets: {', '.join(SHIFT_PRESETS)})")
    try:
        values = read_json(path)
    except ValueError as e:
        raise ConfigError(f"{path}: shift spec is not valid JSON ({e})") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: shift spec must be a JSON object, got {type(values).__name__}")
    values.setdefault("name", path.stem)
    return ShiftSpec.from_dict(values)


def apply_shift(sample: SampleRecord, spec: ShiftSpec) -> SampleRecord:
    """image' = clamp(contrast * (image**gamma - 0.5) + 0.5 + bias + moire + noise, 0, 1).

    The mask comes through untouched. Randomness is keyed on (spec.seed, sample id).
    """
    spec.validate()
    image = sample.image.astype(np.float64)
    h, w = image.shape[-2:]
    rng = Rng(spec.seed, (zlib.crc32(sample.id.encode("utf-8")),))

    out = spec.contrast_scale * (image ** spec.gamma_correction - 0.5) + 0.5
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if spec.bias_field_strength:
        phi = rng.child(0).uniform(0.0, 2 * math.pi)
        u = 2 * xx / max(w - 1, 1) - 1
        v = 2 * yy / max(h - 1, 1) - 1
        out = out + spec.bias_field_strength * (u * math.cos(phi) + v * math.sin(phi))
    if spec.moire is not None:
        m = spec.moire
        phase = (xx * math.cos(m.angle_rad) + yy * math.sin(m.angle_rad)) / m.period_px
        out = out + m.amplitude * np.sin(2 * math.pi * phase)
    if spec.gaussian_noise_sigma:
        out = out + rng.child(1).normal(spec.gaussian_noise_sigma, image.shape)

    shifted = np.clip(out, 0.0, 1.0).astype(np.float32)
    mask = None if sample.mask is None else sample.mask.copy()
    return SampleRecord(sample.id, shifted, mask, f"{sample.domain_tag}+{spec.name}")

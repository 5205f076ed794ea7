"""One JSON file, five sections, each owned by the module it configures."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from src.adapter import AdaptConfig
from src.errors import ConfigError
from src.losses import LossConfig
from src.nca.model import MedNcaConfig
from src.trainer import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class DataConfig:
    size: int = 64
    train: int = 50
    val: int = 50
    test: int = 50
    seed: int = 0

    def validate(self) -> "DataConfig":
        if self.size < 8:
            raise ConfigError(f"data.size must be >= 8, got {self.size}")
        if min(self.train, self.val, self.test) < 0:
            raise ConfigError("split sizes can't be negative")
        return self

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}


SECTIONS: dict[str, type] = {
    "model": MedNcaConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "adapt": AdaptConfig,
    "data": DataConfig,
}

# flag name -> sections it lands in. "epochs" depends on the command.
FLAG_TARGETS: dict[str, tuple[str, ...]] = {
    "seed": ("train", "adapt", "data"),
    "lr": ("train", "adapt"),
    "batch_size": ("train", "adapt"),
    "vwsl_gamma": ("adapt", "loss"),
    "n_runs": ("adapt",),
    "patch_size": ("train",),
    "size": ("data",),
}
EPOCH_TARGETS = {"train": "train", "adapt": "adapt", "ablate": "adapt"}


def _section(cls: type, values: Any, name: str):
    if not isinstance(values, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad config section {name!r}: {e}") from e


@dataclass
class RunConfig:
    model: MedNcaConfig = field(default_factory=MedNcaConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        unknown = set(values) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{name: _section(SECTIONS[name], values.get(name, {}), name) for name in SECTIONS})

    @classmethod
    def from_file(cls, path: str | Path | None) -> "RunConfig":
        """Defaults when ``path`` is None; a missing or unparsable file is a ConfigError."""
        if path is None:
            return cls()
        path = Path(path)
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(values, Mapping):
            raise ConfigError(f"{path}: top level must be an object")
        logger.debug("loaded config from %s", path)
        return cls.from_dict(values)

    def with_overrides(self, command: str | None = None, **flags: Any) -> "RunConfig":
        """Copy with CLI flags applied. ``None`` means "flag not given"."""
        updates: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
        for flag, value in flags.items():
            if value is None:
                continue
            if flag == "epochs":
                target = EPOCH_TARGETS.get(command or "")
                if target is None:
                    raise ConfigError(f"--epochs has no meaning for command {command!r}")
                updates[target]["epochs"] = value
                continue
            if flag not in FLAG_TARGETS:
                raise ConfigError(f"unknown override {flag!r}")
            for section in FLAG_TARGETS[flag]:
                updates[section][flag] = value
        return RunConfig(**{name: replace(getattr(self, name), **updates[name]) for name in SECTIONS})

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except TypeError as e:
                raise ConfigError(f"config section {name!r} has a value of the wrong type ({e})") from e
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

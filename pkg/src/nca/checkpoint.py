"""Bit-exact binary checkpoints for ``MedNcaModel``.

Layout, all little-endian::

    b"NCAS"                       magic
    u16                           format version (1)
    u32 x 5                       channels, hidden, scale_factor, steps_level1, steps_level2
    f64                           fire_rate
    u32 x 2                       input_channels, output_channels
    f32[...]                      level1 tensors, then level2 tensors, in FIELD_ORDER
                                  (BN running stats included)
    u32                           CRC-32 of everything above

At the default config that's 42 + 26 432*4 + 2*2*128*4 + 4 = 107 822 bytes.
"""
from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import CheckpointError
from src.nca.model import (FIELD_ORDER, PARAMETER_FIELDS, MedNcaConfig, MedNcaModel, NcaCellParams,
                           field_shapes)

logger = logging.getLogger(__name__)

MAGIC = b"NCAS"
VERSION = 1
_HEADER = struct.Struct("<4sH5Id2I")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size


def checkpoint_size(config: MedNcaConfig) -> int:
    floats = 2 * sum(int(np.prod(s)) for s in field_shapes(config.channels, config.hidden).values())
    return HEADER_SIZE + 4 * floats + _CRC.size


def to_bytes(model: MedNcaModel) -> bytes:
    cfg = model.config
    parts = [_HEADER.pack(MAGIC, VERSION, cfg.channels, cfg.hidden, cfg.scale_factor,
                          cfg.steps_level1, cfg.steps_level2, float(cfg.fire_rate),
                          cfg.input_channels, cfg.output_channels)]
    for array in model.state_arrays().values():
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(blob: bytes) -> MedNcaModel:
    if len(blob) < HEADER_SIZE + _CRC.size:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes")
    body, (stored_crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    (magic, version, channels, hidden, scale_factor, steps1, steps2, fire_rate,
     input_channels, output_channels) = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise CheckpointError(f"CRC mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}")

    config = MedNcaConfig(channels, hidden, scale_factor, steps1, steps2, fire_rate,
                          input_channels, output_channels)
    if len(blob) != checkpoint_size(config):
        raise CheckpointError(f"checkpoint is {len(blob)} bytes, config implies {checkpoint_size(config)}")
    config.validate()

    shapes = field_shapes(channels, hidden)
    offset = HEADER_SIZE
    cells = []
    for _ in range(2):
        tensors = {}
        for name in FIELD_ORDER:
            count = int(np.prod(shapes[name]))
            data = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            tensors[name] = Tensor(data.astype(np.float32).reshape(shapes[name]),
                                   requires_grad=name in PARAMETER_FIELDS, name=name)
        cells.append(NcaCellParams(**tensors))
    return MedNcaModel(config, cells[0], cells[1])


def save_checkpoint(model: MedNcaModel, path: str | Path) -> int:
    """Write ``model`` to ``path``. Returns the CRC for logging/determinism checks."""
    blob = to_bytes(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    crc = _CRC.unpack(blob[-_CRC.size:])[0]
    logger.info("saved checkpoint %s (%d bytes, crc %08x)", path, len(blob), crc)
    return crc


def load_checkpoint(path: str | Path) -> MedNcaModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(blob)


def checkpoint_crc(path: str | Path) -> int:
    blob = Path(path).read_bytes()
    return _CRC.unpack(blob[-_CRC.size:])[0]

import numpy as np
import pytest

from conftest import random_model
from src.errors import CheckpointError
from src.nca.checkpoint import (HEADER_SIZE, checkpoint_crc, checkpoint_size, from_bytes, load_checkpoint,
                                save_checkpoint, to_bytes)
from src.nca.model import MedNcaConfig, MedNcaModel


@pytest.fixture
def model():
    return random_model(MedNcaConfig(), seed=2, dtype=np.float32)


def test_header_is_42_bytes():
    assert HEADER_SIZE == 42


def test_default_file_size(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    assert path.stat().st_size == 107822 == checkpoint_size(MedNcaConfig())
    assert 100_000 <= path.stat().st_size <= 120_000


def test_round_trip_restores_everything(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for name, array in model.state_arrays().items():
        assert np.array_equal(loaded.state_arrays()[name], array), name
    assert set(loaded.parameters()) == set(model.parameters())
    assert all(t.requires_grad for t in loaded.parameters().values())
    assert not any(t.requires_grad for t in loaded.buffers().values())


def test_same_model_same_bytes(model):
    assert to_bytes(model) == to_bytes(model.copy())


def test_crc_is_returned_and_stored(tmp_path, model):
    path = tmp_path / "model.ckpt"
    assert save_checkpoint(model, path) == checkpoint_crc(path)


def test_flipped_byte_fails_crc(model):
    blob = bytearray(to_bytes(model))
    blob[HEADER_SIZE + 100] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        from_bytes(bytes(blob))


def test_bad_magic(model):
    blob = b"XXXX" + to_bytes(model)[4:]
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(blob)


def test_unsupported_version(model):
    blob = bytearray(to_bytes(model))
    blob[4:6] = (2).to_bytes(2, "little")
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bytes(blob))


def test_truncated(model):
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(model)[:30])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_small_config_layout():
    config = MedNcaConfig(channels=4, hidden=8, scale_factor=2, steps_level1=3, steps_level2=5, fire_rate=0.25)
    model = MedNcaModel.zeros(config)
    blob = to_bytes(model)
    assert len(blob) == checkpoint_size(config)
    assert from_bytes(blob).config == config

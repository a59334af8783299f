import struct
import zlib

import numpy as np
import pytest

from src.services.checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    config_hash,
    fnv1a_64,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from src.services.trainer import evaluate


def test_fnv1a_reference_values():
    """Test the 64-bit FNV-1a hash on published vectors."""
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


def test_roundtrip_reproduces_evaluation(perturbed_state, small_dataset, tmp_path):
    """Test save then load gives bitwise equal tunables and identical metrics."""
    path = save_checkpoint(perturbed_state, tmp_path / "task.mvck")
    loaded = load_checkpoint(path)
    assert loaded.config == perturbed_state.config
    for name, tensor in perturbed_state.tunable.items():
        assert loaded.tunable[name].data.tobytes() == tensor.data.tobytes()
    samples = small_dataset.samples[:8]
    assert evaluate(loaded, samples) == evaluate(perturbed_state, samples)


def test_checkpoint_holds_no_backbone(toy_state):
    """Test the file is a small fraction of a full-state dump."""
    data = checkpoint_bytes(toy_state)
    full_dump = 8 * sum(t.data.size for t in toy_state.params.values())
    assert len(data) <= 0.1 * full_dump
    assert len(data) >= 8 * sum(t.data.size for t in toy_state.tunable.values())


def test_tampered_hash_rejected(toy_state, tmp_path):
    """Test a wrong config hash is rejected even with a recomputed checksum."""
    data = bytearray(checkpoint_bytes(toy_state)[:-4])
    data[6] ^= 0x01
    path = tmp_path / "task.mvck"
    path.write_bytes(bytes(data) + struct.pack("<I", zlib.crc32(bytes(data))))
    with pytest.raises(CheckpointError, match="hash"):
        read_checkpoint(path)


def test_corrupt_payload_rejected(toy_state, tmp_path):
    """Test a flipped payload byte fails the checksum."""
    data = bytearray(checkpoint_bytes(toy_state))
    data[len(data) // 2] ^= 0xFF
    path = tmp_path / "task.mvck"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(path)


def test_expected_config_mismatch(toy_state, toy_config, tmp_path):
    """Test loading against a different config is rejected."""
    path = save_checkpoint(toy_state, tmp_path / "task.mvck")
    assert load_checkpoint(path, expected_config=toy_config) is not None
    other = toy_config.updated(**{"encoder.seed": "5"})
    assert config_hash(other) != config_hash(toy_config)
    with pytest.raises(CheckpointError, match="config hash mismatch"):
        load_checkpoint(path, expected_config=other)


def test_shared_backbone_on_load(toy_state, tmp_path):
    """Test loading over a supplied backbone reuses it."""
    path = save_checkpoint(toy_state, tmp_path / "task.mvck")
    loaded = load_checkpoint(path, backbone=toy_state.backbone)
    assert loaded.backbone is toy_state.backbone
    assert np.array_equal(loaded.tau.data, toy_state.tau.data)

"""
Tests for checkpoint persistence.
"""
import numpy as np
import pytest

from rtdesk.core import numerics as F
from rtdesk.core.checkpoint import load_checkpoint, read_header, save_checkpoint
from rtdesk.core.errors import CheckpointFormatError
from rtdesk.core.numerics import Adam
from rtdesk.models.policy_transformer import PolicyModel, forward

from conftest import TINY_IMAGE, tiny_policy


def _frames():
    rng = np.random.default_rng(0)
    return [rng.random((3, TINY_IMAGE, TINY_IMAGE)).astype(np.float32) for _ in range(2)]


def test_roundtrip_gives_identical_logits(tmp_path, policy_config):
    """Test that a reloaded model produces bitwise identical logits."""
    model = PolicyModel(policy_config, seed=7)
    path = str(tmp_path / "model.rtdk")
    model.save(path, metadata={"step": 12})
    loaded = PolicyModel.load(path)
    frames = _frames()
    assert np.array_equal(forward(model, frames, "pick apple").data, forward(loaded, frames, "pick apple").data)
    assert loaded.config == policy_config


def test_metadata_and_optimizer_survive(tmp_path, policy_config):
    """Test that run metadata and Adam state are stored alongside the weights."""
    model = PolicyModel(policy_config, seed=3)
    opt = Adam(dict(model.named_parameters()), lr=1e-3)
    weight = model.head.weight
    F.backward((weight * weight).sum())
    opt.step()
    path = str(tmp_path / "model.rtdk")
    save_checkpoint(path, model, optimizer=opt, metadata={"step": 1, "mixing_weights": [1.0, 0.5]})
    ckpt = load_checkpoint(path)
    assert ckpt.metadata["seed"] == 3
    assert ckpt.metadata["mixing_weights"] == [1.0, 0.5]
    assert ckpt.optimizer["lr"] == pytest.approx(1e-3)
    assert ckpt.optimizer_state["step_count"] == 1


def test_read_header_lists_tensors(tmp_path, policy_config):
    """Test that the header reports every parameter tensor with its shape."""
    model = PolicyModel(policy_config, seed=0)
    path = str(tmp_path / "model.rtdk")
    model.save(path)
    header = read_header(path)
    assert header["tensors"]["head.weight"] == list(model.head.weight.shape)
    assert header["policy_config"]["width"] == policy_config.width


def test_flipped_byte_detected(tmp_path, policy_config):
    """Test that a single corrupted byte makes loading fail."""
    path = tmp_path / "model.rtdk"
    PolicyModel(policy_config, seed=0).save(str(path))
    payload = bytearray(path.read_bytes())
    payload[len(payload) // 2] ^= 0xFF
    path.write_bytes(bytes(payload))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_truncated_file(tmp_path, policy_config):
    """Test that a truncated checkpoint is rejected."""
    path = tmp_path / "model.rtdk"
    PolicyModel(policy_config, seed=0).save(str(path))
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_bad_magic(tmp_path):
    """Test that a file of another format is rejected."""
    path = tmp_path / "model.rtdk"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_missing_file(tmp_path):
    """Test that a missing checkpoint raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "absent.rtdk"))


def test_variant_heads_roundtrip(tmp_path):
    """Test that ablation variants rebuild with their own heads."""
    model = PolicyModel(tiny_policy(continuous_head=True, use_history=False), seed=0)
    path = str(tmp_path / "model.rtdk")
    model.save(path)
    loaded = PolicyModel.load(path)
    assert loaded.config.continuous_head
    assert np.array_equal(loaded.mean_head.weight.data, model.mean_head.weight.data)

"""
Tests for the FiLM-conditioned image tokenizer.
"""
import numpy as np
import pytest

from rtdesk.core import numerics as F
from rtdesk.core.errors import ContractError, DimensionError
from rtdesk.core.numerics import Tensor
from rtdesk.core.utils import SeedStream
from rtdesk.models.film_backbone import (
    NUM_FRAME_TOKENS,
    FiLMBackbone,
    embed_instruction,
    encode_frame,
    init_backbone,
    pooled_targets,
    pretrain_backbone,
)

from conftest import TINY_IMAGE, tiny_backbone


def _frames(n, seed=0):
    return np.random.default_rng(seed).random((n, 3, TINY_IMAGE, TINY_IMAGE)).astype(np.float32)


def test_embedding_is_normalised_and_stable():
    """Test that instruction embeddings are unit-norm and case-insensitive."""
    a = embed_instruction("Pick Coke can", 16)
    b = embed_instruction("pick coke can", 16)
    assert np.array_equal(a, b)
    assert np.isclose(np.linalg.norm(a), 1.0)
    assert not np.array_equal(a, embed_instruction("pick apple", 16))


def test_empty_instruction_rejected():
    """Test that an instruction without words is rejected."""
    with pytest.raises(ContractError):
        embed_instruction("  ", 16)


def test_output_shape(backbone_config):
    """Test that a frame becomes 81 tokens of width d_token."""
    backbone = init_backbone(backbone_config, seed=0)
    tokens = backbone(Tensor(_frames(2)), Tensor(np.stack([embed_instruction("pick apple", 16)] * 2)))
    assert tokens.shape == (2, NUM_FRAME_TOKENS, backbone_config.d_token)


def test_default_resolution_shape():
    """Test that the default 96-pixel configuration also ends on 81 tokens."""
    backbone = init_backbone(tiny_backbone(image_size=96, block_channels=(4, 4), block_strides=(2, 2)), seed=0)
    frame = Tensor(np.zeros((3, 96, 96)))
    assert encode_frame(frame, embed_instruction("pick apple", 16), backbone).shape == (NUM_FRAME_TOKENS, 8)


def test_wrong_resolution(backbone_config):
    """Test that a frame of the wrong size is rejected."""
    backbone = init_backbone(backbone_config, seed=0)
    with pytest.raises(DimensionError):
        backbone(Tensor(np.zeros((1, 3, 20, 20))))


def test_identity_at_init(backbone_config):
    """Test that the conditioned backbone equals the unconditioned one bitwise at init."""
    backbone = init_backbone(backbone_config, seed=3)
    rng = np.random.default_rng(0)
    words = ["pick", "coke", "can", "apple", "open", "drawer", "move", "near"]
    for k in range(20):
        frame = _frames(1, seed=k)
        text = " ".join(rng.choice(words, size=3))
        conditioned = backbone(Tensor(frame), Tensor(embed_instruction(text, 16)[None, :]))
        plain = backbone(Tensor(frame))
        assert np.array_equal(conditioned.data, plain.data)


def test_naive_film_conditions(backbone_config):
    """Test that random FiLM weights make the output depend on the instruction."""
    backbone = init_backbone(tiny_backbone(film_init="naive"), seed=0)
    frame = Tensor(_frames(1))
    a = backbone(frame, Tensor(embed_instruction("pick apple", 16)[None, :]))
    b = backbone(frame, Tensor(embed_instruction("open top drawer", 16)[None, :]))
    assert not np.allclose(a.data, b.data)


def test_same_seed_same_weights(backbone_config):
    """Test that initialisation is deterministic in the seed."""
    a = init_backbone(backbone_config, seed=5).state_dict()
    b = init_backbone(backbone_config, seed=5).state_dict()
    c = init_backbone(backbone_config, seed=6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_backbone_gradcheck(backbone_config):
    """Test that the conditioned backbone passes a float64 finite-difference check."""
    with F.precision("float64"):
        backbone = FiLMBackbone(tiny_backbone(film_init="naive"), SeedStream(0).rng("b"))
        images = Tensor(_frames(1).astype(np.float64))
        context = Tensor(embed_instruction("pick apple", 16)[None, :])
        params = [p for name, p in backbone.named_parameters() if name.endswith(("kernel", "gamma.weight"))][:4]
        err = F.gradcheck(lambda: (backbone(images, context) ** 2).mean(), params, eps=1e-6, max_checks=5)
    assert err < 1e-4


def test_pooled_targets_average():
    """Test that pooled targets are the mean of each area bin."""
    frames = np.ones((1, 3, 18, 18))
    frames[:, :, :2, :2] = 3.0
    pooled = pooled_targets(frames, 9)
    assert pooled.shape == (1, 3, 9, 9)
    assert pooled[0, 0, 0, 0] == pytest.approx(3.0)
    assert pooled[0, 0, 4, 4] == pytest.approx(1.0)


def test_pretrain_warm_start(tmp_path, backbone_config):
    """Test that warm-start weights load into a fresh backbone and leave FiLM untouched."""
    path = str(tmp_path / "trunk.npz")
    losses = pretrain_backbone(_frames(6), backbone_config, steps=5, seed=0, path=path, batch=3, progress=False)
    assert len(losses) == 5
    warm = init_backbone(backbone_config, seed=1, warm_start=path)
    with np.load(path) as archive:
        assert all(".film." not in name for name in archive.files)
        name = archive.files[0]
        assert np.array_equal(warm.state_dict()[name], archive[name])
    assert all(np.all(v == 0) for k, v in warm.state_dict().items() if ".film." in k)


def test_missing_warm_start(backbone_config):
    """Test that a missing warm-start file raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        init_backbone(backbone_config, seed=0, warm_start="/nonexistent/trunk.npz")

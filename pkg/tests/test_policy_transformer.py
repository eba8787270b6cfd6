"""
Tests for the Transformer policy and its ablation heads.
"""
import numpy as np
import pytest

from rtdesk.core import numerics as F
from rtdesk.core.action_codec import MODE_INDEX, tokenize_array
from rtdesk.core.errors import ConfigError, ContractError, DimensionError
from rtdesk.core.numerics import Tensor
from rtdesk.models.policy_transformer import (
    NUM_MODES,
    PolicyModel,
    bc_loss,
    forward,
    forward_autoregressive,
    forward_continuous,
    frame_causal_mask,
    pad_history,
    select_action,
    trunk,
)

from conftest import TINY_IMAGE, tiny_policy


def _frames(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((3, TINY_IMAGE, TINY_IMAGE)).astype(np.float32) for _ in range(n)]


def test_frame_causal_mask_blocks_future_frames():
    """Test that tokens see their own frame and older frames only."""
    mask = frame_causal_mask(3, 2)
    assert mask.shape == (6, 6)
    assert not mask[0, 1]
    assert mask[1, 2]
    assert not mask[5, 0]


def test_forward_shape(policy_config):
    """Test that forward returns logits for every frame of the window."""
    model = PolicyModel(policy_config, seed=0)
    logits = forward(model, _frames(2), "pick apple")
    assert logits.shape == (2, 11, 256)


def test_later_frame_does_not_change_earlier_logits():
    """Test that perturbing a later frame leaves the logits of earlier frames bit-identical."""
    model = PolicyModel(tiny_policy(history_length=4), seed=0)
    frames = _frames(4)
    before = forward(model, frames, "pick apple").data
    rng = np.random.default_rng(11)
    changed = 0
    for _ in range(50):
        t = int(rng.integers(1, 4))
        perturbed = list(frames)
        perturbed[t] = rng.random((3, TINY_IMAGE, TINY_IMAGE)).astype(np.float32)
        after = forward(model, perturbed, "pick apple").data
        assert np.array_equal(before[:t], after[:t])
        changed += not np.array_equal(before[t:], after[t:])
    assert changed > 0


def test_wrong_window_length(policy_config):
    """Test that a window of the wrong length is rejected."""
    model = PolicyModel(policy_config, seed=0)
    with pytest.raises(DimensionError):
        forward(model, _frames(3), "pick apple")


def test_no_history_uses_newest_frame():
    """Test that the no-history variant only reads the newest frame."""
    model = PolicyModel(tiny_policy(use_history=False), seed=0)
    frames = _frames(2)
    logits = forward(model, frames, "pick apple")
    assert logits.shape == (1, 11, 256)
    frames[0] = frames[0] * 0.0
    assert np.allclose(forward(model, frames, "pick apple").data, logits.data)


def test_no_transformer_variant():
    """Test that the variant without self-attention has no layers but still predicts."""
    model = PolicyModel(tiny_policy(use_transformer=False), seed=0)
    assert model.layers == []
    assert forward(model, _frames(2), "pick apple").shape == (2, 11, 256)


def test_continuous_head_within_bounds():
    """Test that continuous means stay inside the action bounds."""
    model = PolicyModel(tiny_policy(continuous_head=True), seed=0)
    mean, logvar, modes = forward_continuous(model, _frames(2), "pick apple")
    assert mean.shape == (2, 10)
    assert logvar.shape == (2, 10)
    assert modes.shape == (2, NUM_MODES)
    assert np.all(mean.data <= model.spec.upper) and np.all(mean.data >= model.spec.lower)
    with pytest.raises(ConfigError):
        forward(model, _frames(2), "pick apple")


def test_autoregressive_prefix_limits():
    """Test that the autoregressive head predicts one dimension per prefix."""
    model = PolicyModel(tiny_policy(autoregressive_actions=True), seed=0)
    frames = _frames(2)
    assert forward_autoregressive(model, frames, "pick apple", []).shape == (256,)
    assert forward_autoregressive(model, frames, "pick apple", [3, 7]).shape == (256,)
    with pytest.raises(ContractError):
        forward_autoregressive(model, frames, "pick apple", [0] * 11)
    with pytest.raises(ConfigError):
        forward_autoregressive(PolicyModel(tiny_policy(), seed=0), frames, "pick apple", [])


def test_teacher_forcing_matches_stepwise():
    """Test that teacher-forced logits equal the step-by-step prefix logits."""
    model = PolicyModel(tiny_policy(autoregressive_actions=True), seed=0)
    pooled = trunk(model, _frames(2), "pick apple")[-1:]
    targets = np.array([[5, 9, 200, 0, 1, 2, 255, 128, 128, 128, 1]])
    forced = model.teacher_forced_logits(pooled, targets).data
    for d in (0, 3, 10):
        step = model.autoregressive_logits(pooled, targets[:, :d]).data
        assert np.allclose(forced[:, d], step, atol=1e-5)


@pytest.mark.parametrize(
    "overrides", [{}, {"continuous_head": True}, {"autoregressive_actions": True}]
)
def test_decode_every_head(overrides):
    """Test that every head decodes to a legal action."""
    model = PolicyModel(tiny_policy(**overrides), seed=0)
    pooled = trunk(model, _frames(2), "pick apple")[-1]
    tokens, action = model.decode(pooled)
    assert tokens.tokens.shape == (11,)
    assert tokens.tokens[MODE_INDEX] < NUM_MODES
    assert action.validate(model.spec)[0]


def test_select_action_greedy_and_mode_restriction():
    """Test that greedy decoding takes argmaxes and the mode ignores illegal tokens."""
    logits = np.zeros((11, 256))
    logits[0, 17] = 5.0
    logits[MODE_INDEX, 200] = 9.0
    logits[MODE_INDEX, 2] = 1.0
    tokens = select_action(logits)
    assert tokens.tokens[0] == 17
    assert tokens.tokens[1] == 0
    assert tokens.tokens[MODE_INDEX] == 2


def test_select_action_sampling_is_seeded():
    """Test that sampling with the same seed returns the same tokens."""
    logits = np.random.default_rng(0).normal(size=(2, 11, 256))
    a = select_action(logits, "sample", seed=4)
    b = select_action(logits, "sample", seed=4)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.all(a.tokens[MODE_INDEX] < NUM_MODES)


def test_pad_history():
    """Test that short histories repeat the oldest frame and long ones keep the newest."""
    assert pad_history([1, 2], 4) == [1, 1, 1, 2]
    assert pad_history([1, 2, 3, 4, 5], 3) == [3, 4, 5]
    with pytest.raises(ContractError):
        pad_history([], 3)


def test_bc_loss_ignores_masked_frames(spec):
    """Test that a zero-weight frame does not affect the loss."""
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 11, 256)))
    values = np.zeros((2, 11))
    tokens = tokenize_array(values, spec)
    masked = bc_loss(logits, tokens, mask=np.array([0.0, 1.0]))
    alone = bc_loss(Tensor(logits.data[1:]), tokens[1:])
    assert np.isclose(masked.item(), alone.item())
    with pytest.raises(DimensionError):
        bc_loss(logits, tokens[:, :10])


def test_loss_gradcheck():
    """Test that the policy loss passes a float64 finite-difference check."""
    with F.precision("float64"):
        model = PolicyModel(tiny_policy(), seed=0)
        frames = [f.astype(np.float64) for f in _frames(2)]
        tokens = np.random.default_rng(1).integers(0, 256, size=(2, 11))
        tokens[:, MODE_INDEX] = 0
        params = [model.head.weight, model.input_proj.weight, model.layers[0].qkv.weight]
        err = F.gradcheck(
            lambda: bc_loss(forward(model, frames, "pick apple"), tokens), params, eps=1e-6, max_checks=6
        )
    assert err < 1e-4

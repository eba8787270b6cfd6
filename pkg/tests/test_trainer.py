"""
Tests for behavioral-cloning training and the ablation runner.
"""
import os

import numpy as np
import pandas as pd
import pytest

from rtdesk.core.ablation import (
    BASELINE,
    AblationJob,
    ablation_matrix,
    dry_run,
    run_ablation,
)
from rtdesk.core.config import LoopConfig, PolicyConfig, TrainConfig
from rtdesk.core.data import DemoDataset, mix
from rtdesk.core.errors import ConfigError, NonFiniteLossError
from rtdesk.core.trainer import WindowSampler, batch_loss, cosine_lr, token_accuracy, train
from rtdesk.models.policy_transformer import PolicyModel

from conftest import make_episode, tiny_policy


def _config(**overrides):
    values = dict(steps=3, batch=2, lr=1e-3, log_every=1, checkpoint_every=0)
    values.update(overrides)
    return TrainConfig(**values)


def test_cosine_schedule_endpoints():
    """Test that the schedule starts at the peak and ends at the floor."""
    assert cosine_lr(0, 10, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(9, 10, 1e-3, min_fraction=0.1) == pytest.approx(1e-4)
    assert cosine_lr(0, 1, 5e-4) == 5e-4


def test_window_sampler_encodes_shared_frames_once(policy_config):
    """Test that overlapping windows of one episode share their frames."""
    model = PolicyModel(policy_config, seed=0)
    stream = mix([(DemoDataset([make_episode("pick apple", 4, seed=0)]), 1.0)], seed=0)
    batch = WindowSampler(stream, model).next_batch(4)
    assert len(batch) == 4
    assert batch.images.shape[0] == 4
    assert batch.mask[0].tolist() == [0.0, 1.0]
    assert batch.gather[3].tolist() == [2, 3]


def test_batch_loss_is_finite(policy_config, tiny_dataset):
    """Test that the batch loss of an untrained model is near log(256)."""
    model = PolicyModel(policy_config, seed=0)
    batch = WindowSampler(mix([(tiny_dataset, 1.0)]), model).next_batch(3)
    loss = batch_loss(model, batch).item()
    assert np.isfinite(loss)
    assert 2.0 < loss < 10.0


def test_zero_steps_leaves_initialisation(policy_config, tiny_dataset):
    """Test that training for zero steps returns the initial parameters."""
    model = PolicyModel(policy_config, seed=0)
    before = model.state_dict()
    result = train(mix([(tiny_dataset, 1.0)]), model, _config(steps=0), progress=False)
    assert result.checkpoint.metadata["step"] == 0
    assert len(result.loss_curve) == 0
    assert all(np.array_equal(before[k], v) for k, v in result.checkpoint.parameters.items())


def test_training_is_deterministic(policy_config, tiny_dataset):
    """Test that identical seeds give identical loss curves and weights."""
    runs = []
    for _ in range(2):
        model = PolicyModel(policy_config, seed=1)
        runs.append(train(mix([(tiny_dataset, 1.0)], seed=2), model, _config(), progress=False))
    pd.testing.assert_frame_equal(runs[0].loss_curve, runs[1].loss_curve)
    for name, value in runs[0].checkpoint.parameters.items():
        assert np.array_equal(value, runs[1].checkpoint.parameters[name])


def test_training_lowers_loss(tiny_dataset):
    """Test that repeated steps on a single episode reduce the loss."""
    model = PolicyModel(tiny_policy(), seed=0)
    single = DemoDataset([tiny_dataset[0]])
    result = train(mix([(single, 1.0)]), model, _config(steps=30, batch=4, lr=3e-3), progress=False)
    losses = result.loss_curve["loss"].tolist()
    assert losses[-1] < losses[0]


def test_outputs_written(tmp_path, policy_config, tiny_dataset):
    """Test that periodic checkpoints, the final checkpoint and the loss curve are written."""
    model = PolicyModel(policy_config, seed=0)
    result = train(
        mix([(tiny_dataset, 1.0)]), model, _config(steps=4, checkpoint_every=2, log_every=2),
        out_dir=str(tmp_path), progress=False,
    )
    assert os.path.exists(tmp_path / "checkpoint_step000002.rtdk")
    assert not os.path.exists(tmp_path / "checkpoint_step000004.rtdk")
    assert result.checkpoint_path == str(tmp_path / "checkpoint.rtdk")
    curve = pd.read_csv(tmp_path / "loss_curve.csv")
    assert curve["step"].tolist() == [2, 4]
    assert result.checkpoint.metadata["mixing_weights"] == [1.0]


def test_nonfinite_loss_dumps_batch(tmp_path, policy_config, tiny_dataset):
    """Test that a NaN loss stops training and writes the batch to disk."""
    model = PolicyModel(policy_config, seed=0)
    model.head.weight.data[...] = np.nan
    with pytest.raises(NonFiniteLossError) as excinfo:
        train(mix([(tiny_dataset, 1.0)]), model, _config(), out_dir=str(tmp_path), progress=False)
    assert excinfo.value.step == 1
    assert os.path.exists(tmp_path / "nonfinite_batch_step000001.npz")


@pytest.mark.parametrize(
    "overrides", [{}, {"continuous_head": True}, {"autoregressive_actions": True}, {"use_history": False}]
)
def test_token_accuracy_in_range(overrides, tiny_dataset):
    """Test that token accuracy is a fraction for every head."""
    model = PolicyModel(tiny_policy(**overrides), seed=0)
    accuracy = token_accuracy(model, tiny_dataset, max_episodes=2)
    assert 0.0 <= accuracy <= 1.0


def test_ablation_matrix_layout():
    """Test that every matrix starts with the baseline and unknown ones are rejected."""
    assert ablation_matrix("data")[0] is BASELINE
    assert len(ablation_matrix("all")) == 1 + 4 + 7
    with pytest.raises(ConfigError):
        ablation_matrix("optimizer")


def test_shrink_halves_width_and_depth():
    """Test that the small-model job halves width and layers of the base config."""
    config = AblationJob("w/o big model", shrink=True).policy_config(PolicyConfig())
    assert config.width == 32
    assert config.num_layers == 4
    tiny = AblationJob("w/o big model", shrink=True).policy_config(tiny_policy())
    assert tiny.width % tiny.num_heads == 0
    assert tiny.num_layers == 1


def test_model_jobs_apply_overrides():
    """Test that model ablations change only their own fields."""
    jobs = {job.name: job for job in ablation_matrix("model")}
    assert jobs["w/ naive FiLM"].policy_config().backbone.film_init.value == "naive"
    assert not jobs["w/o history"].policy_config().use_history
    assert jobs["w/ continuous actions"].policy_config().continuous_head
    assert not jobs["w/o pre-training"].pretrain


def test_data_jobs_slice_dataset():
    """Test that data ablations cap and narrow the dataset."""
    episodes = [make_episode("pick apple", 2, seed=i) for i in range(4)]
    episodes += [make_episode("pick sponge", 2, seed=10)]
    dataset = DemoDataset(episodes)
    assert AblationJob("cap 2", kind="data", cap=2).build_dataset(dataset).counts() == {
        "pick apple": 2, "pick sponge": 1,
    }
    assert AblationJob("narrow", kind="data", keep_fraction_tasks=0.5).build_dataset(dataset).tasks == ["pick apple"]


def test_dry_run_table():
    """Test that the dry run lists every job without training."""
    table = dry_run(ablation_matrix("model"))
    assert table["job"].tolist()[0] == "default"
    assert "shrink" in table.columns


def test_run_ablation_row(tmp_path, tiny_dataset):
    """Test that one ablation job trains, evaluates and reports a row."""
    row = run_ablation(
        AblationJob("w/o history", policy_overrides={"use_history": False}),
        tiny_dataset,
        _config(steps=2),
        suites=("seen",),
        base_config=tiny_policy(),
        out_dir=str(tmp_path),
        pretrain_steps=0,
        trials=1,
        loop=LoopConfig(step_limit=3),
    )
    assert row["job"] == "w/o history"
    assert row["episodes"] == len(tiny_dataset)
    assert 0.0 <= row["seen"] <= 1.0
    assert os.path.exists(tmp_path / "w-o-history" / "checkpoint.rtdk")

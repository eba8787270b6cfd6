"""
Shared fixtures: micro configurations that keep every test CPU-fast.
"""
import numpy as np
import pytest

from rtdesk.core.action_codec import ActionSpaceSpec, ActionVector
from rtdesk.core.config import ActionMode, BackboneConfig, PolicyConfig, Skill
from rtdesk.core.data import DemoDataset, Episode

TINY_IMAGE = 18


def tiny_backbone(**overrides) -> BackboneConfig:
    values = dict(
        image_size=TINY_IMAGE,
        d_token=8,
        instruction_dim=16,
        stem_channels=4,
        block_channels=(4,),
        block_strides=(1,),
        expand_ratio=2,
    )
    values.update(overrides)
    return BackboneConfig(**values)


def tiny_policy(**overrides) -> PolicyConfig:
    backbone = tiny_backbone(**overrides.pop("backbone", {}))
    values = dict(
        history_length=2,
        tokens_per_frame=4,
        num_layers=1,
        width=8,
        num_heads=2,
        ffn_mult=2,
        ar_decoder_layers=1,
    )
    values.update(overrides)
    return PolicyConfig(backbone=backbone, **values)


def make_episode(instruction: str, steps: int, seed: int, skill: Skill = Skill.PICK) -> Episode:
    """A random episode with in-bounds arm actions ending in terminate."""
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(steps, 3, TINY_IMAGE, TINY_IMAGE), dtype=np.uint8)
    actions = np.zeros((steps, 11), dtype=np.float32)
    actions[:, :10] = rng.uniform(-0.9, 0.9, size=(steps, 10))
    actions[:, 10] = int(ActionMode.ARM)
    actions[-1] = ActionVector.terminate().values
    return Episode(instruction, frames, actions, skill)


@pytest.fixture
def spec():
    return ActionSpaceSpec()


@pytest.fixture
def backbone_config():
    return tiny_backbone()


@pytest.fixture
def policy_config():
    return tiny_policy()


@pytest.fixture
def tiny_dataset():
    episodes = [
        make_episode("pick coke can", 4, seed=0),
        make_episode("pick coke can", 3, seed=1),
        make_episode("pick apple", 5, seed=2),
        make_episode("open top drawer", 3, seed=3, skill=Skill.OPEN_DRAWER),
    ]
    return DemoDataset(episodes)

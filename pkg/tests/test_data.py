"""
Tests for episodes, dataset storage, slicing and mixing.
"""
import json
import os

import numpy as np
import pytest

from rtdesk.core.action_codec import GRIPPER_INDEX, MODE_INDEX, ActionSpaceSpec
from rtdesk.core.config import ActionMode, SourceTag
from rtdesk.core.data import (
    DemoDataset,
    Episode,
    EpisodeValidator,
    ForeignEpisode,
    cap_per_task,
    history_windows,
    ingest_foreign,
    load_dataset,
    mix,
    narrow_tasks,
    save_dataset,
)
from rtdesk.core.errors import ContractError, DatasetFormatError

from conftest import TINY_IMAGE, make_episode


def _dataset(counts):
    episodes = []
    seed = 0
    for task, n in counts.items():
        for _ in range(n):
            episodes.append(make_episode(task, 2, seed=seed))
            seed += 1
    return DemoDataset(episodes)


def test_failed_episodes_dropped():
    """Test that unsuccessful episodes are not admitted."""
    good = make_episode("pick apple", 3, seed=0)
    bad = make_episode("pick apple", 3, seed=1)
    bad.success = False
    assert len(DemoDataset([good, bad])) == 1


def test_invalid_episode_rejected(spec):
    """Test that out-of-range actions make a dataset invalid."""
    source = make_episode("pick apple", 3, seed=0)
    actions = source.actions.copy()
    actions[0, 0] = 4.0
    episode = Episode(source.instruction, source.frames, actions)
    ok, error = EpisodeValidator.validate(episode, spec)
    assert not ok and "arm_x" in error
    with pytest.raises(DatasetFormatError):
        DemoDataset([episode])


def test_manifest_validation():
    """Test that manifests missing required keys are rejected."""
    assert EpisodeValidator.validate_manifest([]) == (False, "Manifest must be a JSON object")
    ok, error = EpisodeValidator.validate_manifest({"format_version": 1, "episodes": []})
    assert not ok and "action_space" in error


def test_save_and_load(tmp_path, tiny_dataset):
    """Test that a saved dataset loads back with identical frames and actions."""
    save_dataset(tiny_dataset, str(tmp_path))
    loaded = load_dataset(str(tmp_path))
    assert loaded.counts() == tiny_dataset.counts()
    for a, b in zip(loaded, tiny_dataset):
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.actions, b.actions)
        assert a.skill == b.skill


def test_truncated_chunk(tmp_path, tiny_dataset):
    """Test that a truncated episode chunk raises DatasetFormatError."""
    save_dataset(tiny_dataset, str(tmp_path))
    chunk = tmp_path / "episode_00000.bin"
    chunk.write_bytes(chunk.read_bytes()[:-7])
    with pytest.raises(DatasetFormatError):
        load_dataset(str(tmp_path))


def test_missing_manifest(tmp_path):
    """Test that a directory without a manifest raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path))


def test_bad_manifest_json(tmp_path):
    """Test that a malformed manifest raises DatasetFormatError."""
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetFormatError):
        load_dataset(str(tmp_path))


def test_cap_per_task():
    """Test that capping keeps every task and at most cap episodes each."""
    capped = cap_per_task(_dataset({"pick apple": 10, "pick coke can": 2}), 5, seed=0)
    assert capped.counts() == {"pick apple": 5, "pick coke can": 2}
    again = cap_per_task(_dataset({"pick apple": 10, "pick coke can": 2}), 5, seed=0)
    assert [e.frames.tobytes() for e in capped] == [e.frames.tobytes() for e in again]
    with pytest.raises(ContractError):
        cap_per_task(capped, 0)


def test_narrow_tasks_keeps_largest():
    """Test that narrowing to two thirds keeps the two biggest tasks."""
    dataset = _dataset({"pick apple": 100, "pick coke can": 10, "pick sponge": 1})
    narrowed = narrow_tasks(dataset, 2 / 3)
    assert narrowed.counts() == {"pick apple": 100, "pick coke can": 10}
    with pytest.raises(ContractError):
        narrow_tasks(dataset, 0.0)


def test_mix_fractions_follow_weights(tiny_dataset):
    """Test that a 1:2 mixture draws about a third from the first source."""
    other = DemoDataset([make_episode("pick sponge", 2, seed=9)])
    stream = mix([(tiny_dataset, 1.0), (other, 2.0)], seed=0)
    fractions = stream.sample_fractions(30000)
    assert fractions[0] == pytest.approx(1 / 3, abs=0.01)
    assert fractions[1] == pytest.approx(2 / 3, abs=0.01)
    assert stream.probabilities.tolist() == pytest.approx([1 / 3, 2 / 3])


def test_mix_rejects_bad_sources(tiny_dataset):
    """Test that empty sources and non-positive weights are rejected."""
    with pytest.raises(ContractError):
        mix([(tiny_dataset, 0.0)])
    with pytest.raises(ContractError):
        mix([])


def test_mix_rejects_differing_action_spaces(tiny_dataset):
    """Test that sources tokenized under different action bounds cannot be mixed."""
    wide = ActionSpaceSpec(lower=[-2.0] * 10, upper=[2.0] * 10)
    other = DemoDataset([make_episode("pick sponge", 2, seed=9)], spec=wide)
    with pytest.raises(ContractError, match="action space"):
        mix([(tiny_dataset, 1.0), (other, 1.0)])
    assert len(mix([(other, 1.0), (DemoDataset(other.episodes, spec=wide), 2.0)]).sources) == 2


def test_mix_is_seeded(tiny_dataset):
    """Test that two streams with the same seed draw the same episodes."""
    a = mix([(tiny_dataset, 1.0)], seed=3)
    b = mix([(tiny_dataset, 1.0)], seed=3)
    assert [next(a).instruction for _ in range(10)] == [next(b).instruction for _ in range(10)]


def test_history_windows_pad_and_mask():
    """Test that early windows repeat frame 0 and mask the padded slots."""
    windows = history_windows(4, 3)
    assert len(windows) == 4
    indices, mask = windows[0]
    assert indices.tolist() == [0, 0, 0]
    assert mask.tolist() == [0.0, 0.0, 1.0]
    indices, mask = windows[-1]
    assert indices.tolist() == [1, 2, 3]
    assert mask.tolist() == [1.0, 1.0, 1.0]


def test_history_windows_stride_ends_on_last_step():
    """Test that strided windows always include the final step."""
    ends = [int(indices[-1]) for indices, _ in history_windows(5, 2, stride=2)]
    assert ends == [0, 2, 4]


def test_ingest_foreign(spec):
    """Test that foreign trajectories become relabelled, terminated primary-format episodes."""
    frames = np.zeros((3, 3, TINY_IMAGE, TINY_IMAGE), dtype=np.uint8)
    raw = ForeignEpisode("grasp the red block", frames, [(0.1, 0, 0, 0, False), (0, 0, 0, 0.2, True), (0, 0, 0, 0, True)])
    dataset = ingest_foreign([raw], spec)
    episode = dataset[0]
    assert episode.instruction == "pick anything"
    assert episode.source == SourceTag.FOREIGN
    assert episode.actions[-1, MODE_INDEX] == int(ActionMode.TERMINATE)
    assert episode.actions[1, GRIPPER_INDEX] == spec.upper[GRIPPER_INDEX]
    assert dataset.source_counts() == {"foreign": 1}


def test_summary_frame(tiny_dataset):
    """Test that the summary frame lists one row per task."""
    frame = tiny_dataset.summary_frame()
    assert list(frame["task"]) == tiny_dataset.tasks
    assert frame["episodes"].sum() == len(tiny_dataset)


def test_manifest_on_disk(tmp_path, tiny_dataset):
    """Test that the written manifest records every episode file."""
    path = save_dataset(tiny_dataset, str(tmp_path))
    with open(path) as fh:
        manifest = json.load(fh)
    assert len(manifest["episodes"]) == 4
    assert manifest["image_size"] == TINY_IMAGE
    assert all(os.path.exists(tmp_path / rec["file"]) for rec in manifest["episodes"])

"""
Demonstration data for rtdesk.

This module provides the episode and dataset types, validation, the
on-disk dataset directory format, the per-task slicers used by the data
ablations, weighted multi-source mixing and ingestion of foreign
embodiment trajectories.
"""
import json
import logging
import math
import os
import struct
from collections import OrderedDict
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .action_codec import (
    MODE_INDEX,
    NUM_DIMENSIONS,
    PICK_ANYTHING,
    ActionSpaceSpec,
    ActionVector,
    relabel_instruction,
    remap_foreign,
    tokenize_array,
)
from .config import ActionMode, Skill, SourceTag
from .errors import ContractError, DatasetFormatError
from .utils import SeedStream, atomic_write_bytes, atomic_write_json, normalize_text

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
EPISODE_MAGIC = b"RTEP"
_EPISODE_HEADER = struct.Struct("<4sIIII")


class Episode:
    """
    One demonstration: an instruction with its frame/action trajectory.

    Frames are stored as 8-bit RGB ``[T+1, 3, H, W]``; actions as 32-bit
    floats ``[T+1, 11]``. Both buffers are read-only and shared between
    episodes derived with ``with_instruction``.
    """

    def __init__(
        self,
        instruction: str,
        frames: np.ndarray,
        actions: np.ndarray,
        skill: Skill = Skill.PICK,
        source: SourceTag = SourceTag.PRIMARY,
        success: bool = True,
    ):
        frames = np.asarray(frames)
        if frames.dtype != np.uint8:
            frames = np.clip(np.round(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        actions = np.asarray(actions, dtype=np.float32)
        frames.setflags(write=False)
        actions.setflags(write=False)
        self.instruction = normalize_text(instruction)
        self.frames = frames
        self.actions = actions
        self.skill = Skill(skill)
        self.source = SourceTag(source)
        self.success = bool(success)

    @property
    def num_steps(self) -> int:
        """Number of recorded steps (T + 1)."""
        return int(self.actions.shape[0])

    @property
    def task(self) -> str:
        return self.instruction

    def frame(self, index: int) -> np.ndarray:
        return self.frames[index].astype(np.float32) / 255.0

    def float_frames(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0

    def tokens(self, spec: ActionSpaceSpec) -> np.ndarray:
        return tokenize_array(self.actions.astype(np.float64), spec)

    def with_instruction(self, instruction: str) -> "Episode":
        return Episode(instruction, self.frames, self.actions, self.skill, self.source, self.success)

    def with_source(self, source: SourceTag) -> "Episode":
        return Episode(self.instruction, self.frames, self.actions, self.skill, source, self.success)

    def __repr__(self) -> str:
        return (
            f"Episode(instruction='{self.instruction}', steps={self.num_steps}, "
            f"source={self.source.value}, success={self.success})"
        )


class EpisodeValidator:
    """
    Validates episodes against an action space.

    Methods return ``(is_valid, error_message)`` tuples.
    """

    @staticmethod
    def validate(episode: Episode, spec: ActionSpaceSpec) -> Tuple[bool, Optional[str]]:
        """
        Validate one episode.

        Args:
            episode: Episode to check
            spec: Action space the actions must respect

        Returns:
            Tuple of (is_valid, error_message)
        """
        if not episode.instruction:
            return False, "Episode instruction is empty"
        if episode.frames.ndim != 4 or episode.frames.shape[1] != 3:
            return False, f"Frames must be [T+1, 3, H, W], got {episode.frames.shape}"
        if episode.actions.ndim != 2 or episode.actions.shape[1] != NUM_DIMENSIONS:
            return False, f"Actions must be [T+1, 11], got {episode.actions.shape}"
        if episode.frames.shape[0] != episode.actions.shape[0]:
            return False, (
                f"Episode has {episode.frames.shape[0]} frames but {episode.actions.shape[0]} actions"
            )
        if episode.num_steps < 1:
            return False, "Episode has no steps"
        if not np.all(np.isfinite(episode.actions)):
            return False, "Episode actions contain non-finite values"
        for row in episode.actions:
            is_valid, error = ActionVector(row.astype(np.float64)).validate(spec)
            if not is_valid:
                return False, error
        return True, None

    @staticmethod
    def validate_manifest(manifest: Any) -> Tuple[bool, Optional[str]]:
        if not isinstance(manifest, dict):
            return False, "Manifest must be a JSON object"
        for key in ("format_version", "action_space", "episodes"):
            if key not in manifest:
                return False, f"Manifest is missing '{key}'"
        if manifest["format_version"] != DATASET_FORMAT_VERSION:
            return False, f"Unsupported dataset format version {manifest['format_version']}"
        if not isinstance(manifest["episodes"], list):
            return False, "'episodes' must be a list"
        return True, None


class DemoDataset:
    """
    A collection of successful episodes sharing one action space.

    Failed episodes are dropped with a warning; invalid ones raise
    ``DatasetFormatError``.
    """

    def __init__(self, episodes: Sequence[Episode], spec: Optional[ActionSpaceSpec] = None):
        self.spec = spec or ActionSpaceSpec()
        kept: List[Episode] = []
        for episode in episodes:
            if not episode.success:
                logger.warning("Rejecting failed episode '%s'", episode.instruction)
                continue
            is_valid, error = EpisodeValidator.validate(episode, self.spec)
            if not is_valid:
                raise DatasetFormatError(f"Invalid episode '{episode.instruction}': {error}")
            kept.append(episode)
        self.episodes = kept
        self.task_index: "OrderedDict[str, List[int]]" = OrderedDict()
        for index, episode in enumerate(kept):
            self.task_index.setdefault(episode.task, []).append(index)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    def __getitem__(self, index: int) -> Episode:
        return self.episodes[index]

    @property
    def tasks(self) -> List[str]:
        return list(self.task_index)

    def counts(self) -> Dict[str, int]:
        return {task: len(idx) for task, idx in self.task_index.items()}

    def source_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for episode in self.episodes:
            counts[episode.source.value] = counts.get(episode.source.value, 0) + 1
        return counts

    def subset(self, indices: Sequence[int]) -> "DemoDataset":
        return DemoDataset([self.episodes[i] for i in sorted(indices)], self.spec)

    def manifest(self) -> Dict[str, Any]:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "action_space": self.spec.to_dict(),
            "counts": self.counts(),
            "sources": self.source_counts(),
            "image_size": int(self.episodes[0].frames.shape[-1]) if self.episodes else None,
        }

    def summary_frame(self) -> pd.DataFrame:
        """Per-task episode counts, skills and sources as a DataFrame."""
        rows = []
        for task, idx in self.task_index.items():
            first = self.episodes[idx[0]]
            rows.append({
                "task": task,
                "skill": first.skill.value,
                "source": first.source.value,
                "episodes": len(idx),
                "steps": sum(self.episodes[i].num_steps for i in idx),
            })
        return pd.DataFrame(rows, columns=["task", "skill", "source", "episodes", "steps"])

    def __repr__(self) -> str:
        return f"DemoDataset(episodes={len(self)}, tasks={len(self.task_index)})"


# ---------------------------------------------------------------------------
# Dataset directory format
# ---------------------------------------------------------------------------

def encode_episode(episode: Episode) -> bytes:
    steps, _, height, width = episode.frames.shape
    header = _EPISODE_HEADER.pack(EPISODE_MAGIC, DATASET_FORMAT_VERSION, steps, height, width)
    return header + episode.frames.tobytes() + episode.actions.astype("<f4").tobytes()


def decode_episode(payload: bytes, record: Dict[str, Any], name: str = "<memory>") -> Episode:
    if len(payload) < _EPISODE_HEADER.size:
        raise DatasetFormatError(f"Episode chunk {name} is truncated")
    magic, version, steps, height, width = _EPISODE_HEADER.unpack_from(payload)
    if magic != EPISODE_MAGIC or version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"Episode chunk {name} has a bad header")
    frame_bytes = steps * 3 * height * width
    action_bytes = steps * NUM_DIMENSIONS * 4
    expected = _EPISODE_HEADER.size + frame_bytes + action_bytes
    if len(payload) != expected:
        raise DatasetFormatError(f"Episode chunk {name} has {len(payload)} bytes, expected {expected}")
    offset = _EPISODE_HEADER.size
    frames = np.frombuffer(payload, dtype=np.uint8, count=frame_bytes, offset=offset)
    actions = np.frombuffer(payload, dtype="<f4", count=steps * NUM_DIMENSIONS, offset=offset + frame_bytes)
    return Episode(
        record["instruction"],
        frames.reshape(steps, 3, height, width),
        actions.reshape(steps, NUM_DIMENSIONS),
        skill=Skill(record.get("skill", Skill.PICK.value)),
        source=SourceTag(record.get("source", SourceTag.PRIMARY.value)),
        success=bool(record.get("success", True)),
    )


def save_dataset(dataset: DemoDataset, directory: str) -> str:
    """
    Write a dataset directory: ``manifest.json`` plus one binary chunk per episode.

    Returns:
        Path of the manifest
    """
    os.makedirs(directory, exist_ok=True)
    records = []
    for index, episode in enumerate(dataset.episodes):
        name = f"episode_{index:05d}.bin"
        atomic_write_bytes(os.path.join(directory, name), encode_episode(episode))
        records.append({
            "file": name,
            "instruction": episode.instruction,
            "skill": episode.skill.value,
            "source": episode.source.value,
            "steps": episode.num_steps,
            "success": episode.success,
        })
    manifest = dataset.manifest()
    manifest["episodes"] = records
    path = os.path.join(directory, "manifest.json")
    atomic_write_json(path, manifest)
    logger.info("Wrote %d episodes to %s", len(records), directory)
    return path


def load_dataset(directory: str) -> DemoDataset:
    """
    Read and validate a dataset directory.

    Raises:
        FileNotFoundError: the manifest is missing
        DatasetFormatError: the manifest or a chunk is malformed
    """
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"Manifest {path} is not valid JSON: {exc}")
    is_valid, error = EpisodeValidator.validate_manifest(manifest)
    if not is_valid:
        raise DatasetFormatError(error)
    spec = ActionSpaceSpec.from_dict(manifest["action_space"])
    episodes = []
    for record in manifest["episodes"]:
        chunk = os.path.join(directory, record["file"])
        if not os.path.exists(chunk):
            raise DatasetFormatError(f"Episode chunk missing: {chunk}")
        with open(chunk, "rb") as fh:
            episodes.append(decode_episode(fh.read(), record, chunk))
    dataset = DemoDataset(episodes, spec)
    logger.info("Loaded %r from %s", dataset, directory)
    return dataset


# ---------------------------------------------------------------------------
# Slicers
# ---------------------------------------------------------------------------

def cap_per_task(dataset: DemoDataset, cap: int, seed: int = 0) -> DemoDataset:
    """
    Keep at most ``cap`` episodes per task.

    Each over-full task is subsampled uniformly without replacement with a
    generator derived from ``seed`` and the task string. The task set is
    unchanged.
    """
    if cap < 1:
        raise ContractError(f"cap must be at least 1, got {cap}")
    stream = SeedStream(seed).child("cap")
    keep: List[int] = []
    for task, indices in dataset.task_index.items():
        if len(indices) <= cap:
            keep.extend(indices)
        else:
            chosen = stream.rng(task).choice(len(indices), size=cap, replace=False)
            keep.extend(indices[i] for i in chosen)
    return dataset.subset(keep)


def narrow_tasks(dataset: DemoDataset, keep_fraction_tasks: float) -> DemoDataset:
    """
    Keep the tasks with the most data.

    Tasks are ordered by episode count (descending, ties by task string)
    and the top ``ceil(fraction * |tasks|)`` are kept.
    """
    if not 0.0 < keep_fraction_tasks <= 1.0:
        raise ContractError(f"keep_fraction_tasks must lie in (0, 1], got {keep_fraction_tasks}")
    ordered = sorted(dataset.task_index.items(), key=lambda item: (-len(item[1]), item[0]))
    count = math.ceil(keep_fraction_tasks * len(ordered) - 1e-9)
    if count < 1:
        raise ContractError("keep_fraction_tasks leaves no task")
    keep = [i for _, indices in ordered[:count] for i in indices]
    return dataset.subset(keep)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

class MixStream:
    """
    Infinite seeded stream of episodes drawn from weighted sources.

    Source ``s`` is chosen with probability ``weight_s / sum(weights)``;
    within a source episodes are drawn uniformly.
    """

    def __init__(self, sources: Sequence[Tuple[DemoDataset, float]], seed: int = 0):
        if not sources:
            raise ContractError("mix needs at least one source")
        weights = np.asarray([w for _, w in sources], dtype=np.float64)
        if np.any(weights <= 0):
            raise ContractError(f"Mixing weights must be positive, got {weights.tolist()}")
        for index, (dataset, _) in enumerate(sources):
            if len(dataset) == 0:
                raise ContractError(f"Source {index} is empty")
            if dataset.spec != sources[0][0].spec:
                raise ContractError(f"Source {index} uses a different action space than source 0")
        self.sources = [d for d, _ in sources]
        self.weights = weights
        self.probabilities = weights / weights.sum()
        self.rng = SeedStream(seed).rng("mix")

    def draw(self) -> Tuple[int, Episode]:
        source = int(self.rng.choice(len(self.sources), p=self.probabilities))
        dataset = self.sources[source]
        return source, dataset[int(self.rng.integers(len(dataset)))]

    def __iter__(self) -> Iterator[Episode]:
        return self

    def __next__(self) -> Episode:
        return self.draw()[1]

    def spec(self) -> ActionSpaceSpec:
        return self.sources[0].spec

    def sample_fractions(self, draws: int) -> List[float]:
        """Empirical per-source fractions over ``draws`` fresh draws (advances the stream)."""
        counts = np.zeros(len(self.sources))
        for _ in range(draws):
            counts[self.draw()[0]] += 1
        return (counts / max(1, draws)).tolist()


def mix(sources: Sequence[Tuple[DemoDataset, float]], seed: int = 0) -> MixStream:
    """Build a weighted sampling stream over ``(dataset, weight)`` pairs."""
    return MixStream(sources, seed)


# ---------------------------------------------------------------------------
# Foreign embodiment ingestion
# ---------------------------------------------------------------------------

class ForeignEpisode:
    """
    A raw trajectory from a 4-dof embodiment with a binary gripper.

    ``actions`` rows are ``(x, y, z, yaw, gripper_closed)``.
    """

    def __init__(self, instruction: str, frames: np.ndarray, actions: Sequence[Sequence[Any]]):
        self.instruction = instruction
        self.frames = np.asarray(frames)
        self.actions = [tuple(a) for a in actions]


def ingest_foreign(
    raw_episodes: Sequence[ForeignEpisode],
    spec: ActionSpaceSpec,
    label: str = PICK_ANYTHING,
) -> DemoDataset:
    """
    Convert foreign trajectories into primary-format episodes.

    Every action is remapped (roll and pitch zeroed, binary gripper mapped
    to the gripper bounds), the final step is marked terminate, the
    instruction is relabelled and the source tagged ``foreign``.
    """
    episodes = []
    for raw in raw_episodes:
        rows = np.stack([remap_foreign(a, spec).values for a in raw.actions])
        rows[-1, MODE_INDEX] = int(ActionMode.TERMINATE)
        episode = Episode(raw.instruction, raw.frames, rows, Skill.PICK, SourceTag.FOREIGN, True)
        episodes.append(relabel_instruction(episode, label))
    dataset = DemoDataset(episodes, spec)
    logger.info("Ingested %d foreign episodes as '%s'", len(dataset), label)
    return dataset


# ---------------------------------------------------------------------------
# Training windows
# ---------------------------------------------------------------------------

def history_windows(num_steps: int, length: int, stride: int = 1) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Frame-index windows ending at every ``stride``-th step, in order.

    Windows near the start are left-padded by repeating frame 0; the mask
    is 0 on padded slots.

    Returns:
        List of (indices [length], mask [length]) pairs
    """
    windows = []
    ends = list(range(num_steps - 1, -1, -stride))[::-1]
    for end in ends:
        raw = np.arange(end - length + 1, end + 1)
        mask = (raw >= 0).astype(np.float64)
        windows.append((np.maximum(raw, 0), mask))
    return windows

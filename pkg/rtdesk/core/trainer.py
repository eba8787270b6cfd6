"""
Behavioral-cloning training loop.

Episodes are drawn from a (possibly mixed) stream one at a time and all of
their history windows are queued in order; each optimizer step consumes
``batch`` windows. Frames shared by overlapping windows are encoded once
per step.
"""
import logging
import math
import os
import tempfile
from collections import deque
from typing import Any, Deque, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import numerics as F
from .action_codec import NUM_CONTINUOUS, tokenize_array
from .checkpoint import PolicyCheckpoint, save_checkpoint, write_checkpoint
from .config import TrainConfig
from .data import DemoDataset, Episode, MixStream, history_windows
from .errors import NonFiniteLossError
from .numerics import Adam, Tensor
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total: int, peak: float, min_fraction: float = 0.0) -> float:
    """Learning rate at ``step`` (0-based) of a cosine decay from ``peak`` to ``peak * min_fraction``."""
    if total <= 1:
        return peak
    floor = peak * min_fraction
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * step / (total - 1)))


class Batch:
    """
    A training batch of history windows.

    Attributes:
        images: [U, 3, H, W] unique frames
        embeddings: [U, instruction_dim] instruction embedding of each frame
        gather: [B, F] index into the unique frames per window slot
        tokens: [B, F, 11] target tokens
        values: [B, F, 11] target actions
        mask: [B, F] 1 for real frames, 0 for padding
        instructions: Instruction of each window
    """

    def __init__(self, images, embeddings, gather, tokens, values, mask, instructions):
        self.images = images
        self.embeddings = embeddings
        self.gather = gather
        self.tokens = tokens
        self.values = values
        self.mask = mask
        self.instructions = instructions

    def __len__(self) -> int:
        return int(self.gather.shape[0])


class WindowSampler:
    """
    Turns an episode stream into batches of history windows.

    Args:
        stream: Iterator of episodes (``MixStream`` or any iterator)
        model: Policy whose window length and action space are used
        stride: Step between consecutive windows of an episode
    """

    def __init__(self, stream, model, stride: int = 1):
        self.stream = stream
        self.model = model
        self.length = model.config.frames_in_window
        self.stride = stride
        self.queue: Deque[Tuple[int, Episode, np.ndarray, np.ndarray]] = deque()
        self._serial = 0
        self._tokens: Dict[int, np.ndarray] = {}

    def _refill(self) -> None:
        episode = next(self.stream)
        serial = self._serial
        self._serial += 1
        self._tokens[serial] = episode.tokens(self.model.spec)
        for indices, mask in history_windows(episode.num_steps, self.length, self.stride):
            self.queue.append((serial, episode, indices, mask))

    def next_batch(self, batch: int) -> Batch:
        windows = []
        while len(windows) < batch:
            if not self.queue:
                self._refill()
            windows.append(self.queue.popleft())
        live = {w[0] for w in windows} | {w[0] for w in self.queue}
        self._tokens = {k: v for k, v in self._tokens.items() if k in live}

        slots: Dict[Tuple[int, int], int] = {}
        images, embeddings = [], []
        gather = np.zeros((batch, self.length), dtype=np.int64)
        tokens = np.zeros((batch, self.length, NUM_CONTINUOUS + 1), dtype=np.int64)
        values = np.zeros((batch, self.length, NUM_CONTINUOUS + 1), dtype=np.float64)
        masks = np.zeros((batch, self.length), dtype=np.float64)
        instructions = []
        for b, (serial, episode, indices, mask) in enumerate(windows):
            embedding = self.model.embed(episode.instruction)
            for f, index in enumerate(indices):
                key = (serial, int(index))
                if key not in slots:
                    slots[key] = len(images)
                    images.append(episode.frame(int(index)))
                    embeddings.append(embedding)
                gather[b, f] = slots[key]
            tokens[b] = self._tokens[serial][indices]
            values[b] = episode.actions[indices]
            masks[b] = mask
            instructions.append(episode.instruction)
        return Batch(np.stack(images), np.stack(embeddings), gather, tokens, values, masks, instructions)


def batch_loss(model, batch: Batch) -> Tensor:
    """Loss of ``model`` on a batch, encoding every unique frame once."""
    blocks = model.encode_frames(batch.images, batch.embeddings)
    _, per_frame, d_token = blocks.shape
    windows = F.take(blocks, batch.gather.reshape(-1), axis=0)
    windows = windows.reshape(len(batch), batch.gather.shape[1], per_frame, d_token)
    pooled = model.forward_from_tokens(windows)
    return model.loss(pooled, batch.tokens, batch.values, batch.mask)


def dump_batch(batch: Batch, directory: Optional[str], step: int) -> str:
    """Save an offending batch as ``.npz`` for post-mortem inspection."""
    directory = directory or tempfile.mkdtemp(prefix="rtdesk-nan-")
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"nonfinite_batch_step{step:06d}.npz")
    np.savez(
        path,
        images=batch.images,
        gather=batch.gather,
        tokens=batch.tokens,
        values=batch.values,
        mask=batch.mask,
        instructions=np.asarray(batch.instructions),
    )
    return path


class TrainResult:
    """
    Outcome of ``train``.

    Attributes:
        checkpoint: Final checkpoint (model, optimizer and run metadata)
        loss_curve: DataFrame with columns step, loss
        checkpoint_path: Where the final checkpoint was written, if anywhere
    """

    def __init__(self, checkpoint: PolicyCheckpoint, loss_curve: pd.DataFrame, checkpoint_path: Optional[str] = None):
        self.checkpoint = checkpoint
        self.loss_curve = loss_curve
        self.checkpoint_path = checkpoint_path

    def __repr__(self) -> str:
        final = self.loss_curve["loss"].iloc[-1] if len(self.loss_curve) else float("nan")
        return f"TrainResult(steps={self.checkpoint.metadata.get('step')}, final_loss={final:.4f})"


def train(
    stream,
    model,
    config: Optional[TrainConfig] = None,
    out_dir: Optional[str] = None,
    progress: bool = True,
    metadata: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Fit ``model`` to demonstrations by behavioral cloning.

    Args:
        stream: Episode iterator, typically ``mix(...)`` over datasets
        model: Policy to train in place
        config: Schedule (steps, batch, lr, ...)
        out_dir: Directory for periodic checkpoints, the final
            ``checkpoint.rtdk`` and ``loss_curve.csv``; nothing is written if None
        progress: Show a progress bar
        metadata: Extra run metadata stored in the checkpoint

    Returns:
        Final checkpoint and loss curve

    Raises:
        NonFiniteLossError: the loss became NaN or infinite; the batch is dumped
    """
    config = config or TrainConfig()
    params = {k: v for k, v in model.named_parameters() if v.requires_grad}
    optimizer = Adam(params, lr=config.lr, betas=config.betas, eps=config.eps)
    sampler = WindowSampler(stream, model, config.window_stride)
    meta: Dict[str, Any] = {"train_config": config.to_dict()}
    if isinstance(stream, MixStream):
        meta["mixing_weights"] = stream.weights.tolist()
    meta.update(metadata or {})
    curve: List[Dict[str, float]] = []
    for step in tqdm(range(1, config.steps + 1), desc="train", disable=not progress):
        lr = cosine_lr(step - 1, config.steps, config.lr, config.min_lr_fraction)
        batch = sampler.next_batch(config.batch)
        optimizer.zero_grad()
        loss = batch_loss(model, batch)
        value = loss.item()
        if not np.isfinite(value):
            path = dump_batch(batch, out_dir, step)
            logger.error("Non-finite loss at step %d; batch dumped to %s", step, path)
            raise NonFiniteLossError(step, path)
        F.backward(loss)
        optimizer.step(lr)
        if step % config.log_every == 0 or step == config.steps:
            curve.append({"step": step, "loss": value})
            logger.info("step %d loss %.5f lr %.2e", step, value, lr)
        if out_dir and config.checkpoint_every and step % config.checkpoint_every == 0 and step != config.steps:
            save_checkpoint(
                os.path.join(out_dir, f"checkpoint_step{step:06d}.rtdk"), model, optimizer, dict(meta, step=step)
            )
    meta["step"] = config.steps
    checkpoint = PolicyCheckpoint.from_model(model, optimizer, meta)
    loss_curve = pd.DataFrame(curve, columns=["step", "loss"])
    path = None
    if out_dir:
        path = os.path.join(out_dir, "checkpoint.rtdk")
        write_checkpoint(path, checkpoint)
        atomic_write_bytes(os.path.join(out_dir, "loss_curve.csv"), loss_curve.to_csv(index=False).encode("utf-8"))
    return TrainResult(checkpoint, loss_curve, path)


def token_accuracy(model, dataset: DemoDataset, max_episodes: Optional[int] = None) -> float:
    """
    Fraction of action tokens whose argmax prediction matches the demonstration.

    Each step is scored once, as the newest frame of the window ending at it.
    """
    cfg = model.config
    hits = total = 0
    episodes = list(dataset)[:max_episodes] if max_episodes else list(dataset)
    with F.no_grad():
        for episode in episodes:
            frames = episode.float_frames()
            embeddings = np.repeat(model.embed(episode.instruction)[None, :], len(frames), axis=0)
            blocks = model.encode_frames(frames, embeddings)
            targets = episode.tokens(model.spec)
            for indices, mask in history_windows(episode.num_steps, cfg.frames_in_window):
                window = F.take(blocks, indices, axis=0)
                pooled = model.forward_from_tokens(window.reshape(1, *window.shape))[0]
                if cfg.continuous_head:
                    mean, _, mode_logits = model.continuous_outputs(pooled)
                    values = np.concatenate(
                        [np.clip(mean.data, model.spec.lower, model.spec.upper),
                         np.argmax(mode_logits.data, axis=-1)[:, None]], axis=1
                    )
                    predicted = tokenize_array(values, model.spec)
                elif cfg.autoregressive_actions:
                    predicted = np.argmax(model.teacher_forced_logits(pooled, targets[indices]).data, axis=-1)
                else:
                    predicted = np.argmax(model.action_logits(pooled).data, axis=-1)
                real = mask > 0
                newest = np.zeros_like(real)
                newest[-1] = True
                keep = real & newest
                hits += int((predicted[keep] == targets[indices][keep]).sum())
                total += int(keep.sum()) * targets.shape[1]
    accuracy = hits / total if total else float("nan")
    logger.info("Token accuracy %.4f over %d tokens", accuracy, total)
    return accuracy

"""
Closed-loop policy execution.

A per-episode ``TokenCache`` keeps the post-TokenLearner block of each of
the last frames so every frame is encoded once, however many history
windows it appears in. ``run_episode`` drives a controller against an
environment with a fixed-wait schedule: a frame is captured every control
period and the resulting action is emitted a fixed delay after capture,
so observation-to-action latency does not depend on how long inference
took. Inference slower than the model budget is recorded, not fatal.
"""
import json
import logging
import threading
import time
from collections import deque
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..core import numerics as F
from ..core.action_codec import (
    NUM_BINS,
    NUM_DIMENSIONS,
    ActionSpaceSpec,
    ActionVector,
    TokenizedAction,
    detokenize,
    tokenize,
)
from ..core.config import ActionMode, DecodeMode, LoopConfig
from ..core.numerics import Tensor
from ..core.utils import SeedStream, atomic_write_bytes, percentile_ms, stable_hash
from ..models.film_backbone import NUM_FRAME_TOKENS
from ..models.layers import Embedding
from ..models.policy_transformer import NUM_MODES, PolicyModel, pad_history

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Token cache
# ---------------------------------------------------------------------------

class TokenCache:
    """
    FIFO of the most recent frames' token blocks for one instruction.

    Args:
        capacity: Number of blocks kept (the history length)
    """

    def __init__(self, capacity: int = 6):
        self.capacity = int(capacity)
        self.entries: Deque[Tuple[int, Tensor]] = deque(maxlen=self.capacity)
        self.instruction_hash: Optional[int] = None

    def flush(self) -> None:
        self.entries.clear()
        self.instruction_hash = None

    def matches(self, instruction: str) -> bool:
        return self.instruction_hash is None or self.instruction_hash == stable_hash(instruction)

    def push(self, seq: int, block: Tensor) -> None:
        self.entries.append((int(seq), block))

    def blocks(self) -> List[Tensor]:
        return [block for _, block in self.entries]

    def seqs(self) -> List[int]:
        return [seq for seq, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        return f"TokenCache(size={len(self)}/{self.capacity}, seqs={self.seqs()})"


class InferenceStats:
    """Bookkeeping of one ``infer_step`` call."""

    def __init__(self, encodes: int, cache_hits: int, pads: int, flushed: bool):
        self.encodes = encodes
        self.cache_hits = cache_hits
        self.pads = pads
        self.flushed = flushed

    def to_dict(self) -> Dict[str, Any]:
        return {"encodes": self.encodes, "cache_hits": self.cache_hits, "pads": self.pads, "flushed": self.flushed}


class InferenceResult:
    """
    Output of ``infer_step``.

    Attributes:
        logits: [F, 11, 256] action logits, or None for a continuous head
        pooled: [F, width] per-frame pooled features
        cache: The (updated) cache
        stats: Encode/cache bookkeeping
    """

    def __init__(self, logits: Optional[Tensor], pooled: Tensor, cache: TokenCache, stats: InferenceStats):
        self.logits = logits
        self.pooled = pooled
        self.cache = cache
        self.stats = stats


def _stack_blocks(blocks: Sequence[Tensor]) -> Tensor:
    per_frame, d_token = blocks[0].shape
    return F.concat([b.reshape(1, 1, per_frame, d_token) for b in blocks], axis=1)


def infer_step(
    model: PolicyModel,
    cache: TokenCache,
    new_frame,
    instruction: str,
    seq: Optional[int] = None,
) -> InferenceResult:
    """
    Encode one new frame and run the policy over the cached history.

    Exactly one backbone + TokenLearner evaluation happens per call; the
    other blocks of the window come from the cache (a short history is
    left-padded by repeating its oldest block). The logits equal those of
    ``forward`` over the same padded window bit for bit.

    A different instruction flushes the cache first; this is recorded in
    the stats, not raised.
    """
    with F.no_grad():
        key = stable_hash(instruction)
        flushed = cache.instruction_hash is not None and cache.instruction_hash != key
        if flushed:
            logger.debug("Instruction changed; flushing %d cached blocks", len(cache))
            cache.flush()
        cache.instruction_hash = key
        hits = min(len(cache), cache.capacity - 1)
        block = model.encode_frame(new_frame, instruction)
        cache.push(len(cache) if seq is None else seq, block)
        blocks = cache.blocks()
        cfg = model.config
        if cfg.use_history:
            window = pad_history(blocks, cfg.history_length)
            pads = cfg.history_length - len(blocks)
        else:
            window, hits, pads = blocks[-1:], 0, 0
        pooled = model.forward_from_tokens(_stack_blocks(window))[0]
        logits = None if cfg.continuous_head else model.action_logits(pooled)
    return InferenceResult(logits, pooled, cache, InferenceStats(1, hits, pads, flushed))


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

class ModelController:
    """
    Drives a ``PolicyModel`` through the token cache.

    Args:
        model: Trained policy
        decode_mode: Greedy or sampled decoding
        seed: Seed of the sampling stream
    """

    def __init__(self, model: PolicyModel, decode_mode: Union[DecodeMode, str] = DecodeMode.GREEDY, seed: int = 0):
        self.model = model
        self.decode_mode = DecodeMode(decode_mode)
        self.seed = seed
        self.cache = TokenCache(model.config.history_length)
        self.instruction = ""
        self.rng = SeedStream(seed).rng("decode")
        self.seq = 0
        self.last_tokens: Optional[TokenizedAction] = None
        self.last_stats: Optional[InferenceStats] = None

    def reset(self, instruction: str) -> None:
        self.cache = TokenCache(self.model.config.history_length)
        self.instruction = instruction
        self.rng = SeedStream(self.seed).rng("decode")
        self.seq = 0

    def act(self, frame) -> ActionVector:
        result = infer_step(self.model, self.cache, frame, self.instruction, self.seq)
        self.seq += 1
        with F.no_grad():
            tokens, action = self.model.decode(result.pooled[-1], self.decode_mode, self.rng)
        self.last_tokens = tokens
        self.last_stats = result.stats
        return action


class RandomController:
    """Uniformly random tokens in every dimension; the chance-level baseline."""

    def __init__(self, spec: Optional[ActionSpaceSpec] = None, seed: int = 0):
        self.spec = spec or ActionSpaceSpec()
        self.seed = seed
        self.rng = SeedStream(seed).rng("random-policy")
        self.last_tokens: Optional[TokenizedAction] = None

    def reset(self, instruction: str) -> None:
        self.rng = SeedStream(self.seed).rng("random-policy")

    def act(self, frame) -> ActionVector:
        tokens = self.rng.integers(0, NUM_BINS, size=NUM_DIMENSIONS)
        tokens[-1] = self.rng.integers(0, NUM_MODES)
        self.last_tokens = TokenizedAction(tokens)
        return detokenize(self.last_tokens, self.spec)


# ---------------------------------------------------------------------------
# Clocks, delays and frame handoff
# ---------------------------------------------------------------------------

class WallClock:
    """Real time from ``time.perf_counter``."""

    def now(self) -> float:
        return time.perf_counter()

    def sleep_until(self, t: float) -> None:
        remaining = t - self.now()
        if remaining > 0:
            time.sleep(remaining)

    def advance(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)


class VirtualClock:
    """Simulated time that only moves when told to."""

    def __init__(self, start: float = 0.0):
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def sleep_until(self, t: float) -> None:
        self.t = max(self.t, float(t))

    def advance(self, dt: float) -> None:
        self.t += max(float(dt), 0.0)


class UniformDelay:
    """Artificial inference delay drawn uniformly from ``[low_ms, high_ms]``."""

    def __init__(self, low_ms: float, high_ms: float, seed: int = 0):
        if high_ms < low_ms:
            raise ValueError(f"Delay range [{low_ms}, {high_ms}] is empty")
        self.low_ms = low_ms
        self.high_ms = high_ms
        self.rng = SeedStream(seed).rng("delay")

    def __call__(self) -> float:
        return float(self.rng.uniform(self.low_ms, self.high_ms)) / 1000.0


class FrameMailbox:
    """
    Single-slot handoff from a camera thread; a newer frame replaces an unread one.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._item: Optional[Tuple[int, Any, float]] = None
        self._seq = -1
        self._taken = -1
        self.dropped = 0

    def put(self, frame, timestamp: Optional[float] = None) -> int:
        with self._cond:
            if self._seq > self._taken:
                self.dropped += 1
            self._seq += 1
            self._item = (self._seq, frame, time.perf_counter() if timestamp is None else timestamp)
            self._cond.notify_all()
            return self._seq

    def take(self, timeout: Optional[float] = None) -> Tuple[int, Any, float]:
        """
        Latest frame not yet taken, waiting for one if needed.

        Raises:
            TimeoutError: no new frame arrived within ``timeout`` seconds
        """
        with self._cond:
            if not self._cond.wait_for(lambda: self._seq > self._taken, timeout=timeout):
                raise TimeoutError("No frame arrived in the mailbox")
            self._taken = self._seq
            return self._item


# ---------------------------------------------------------------------------
# Episode loop
# ---------------------------------------------------------------------------

class BudgetViolation:
    def __init__(self, step: int, inference_ms: float, budget_ms: float):
        self.step = step
        self.inference_ms = inference_ms
        self.budget_ms = budget_ms

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "inference_ms": self.inference_ms, "budget_ms": self.budget_ms}


class StepRecord:
    """One control step of an episode trace."""

    TIMING_FIELDS = ("capture_time", "emit_time", "inference_ms")

    def __init__(
        self,
        seq: int,
        capture_time: float,
        emit_time: float,
        inference_ms: float,
        cache_hits: int,
        tokens: Sequence[int],
        action: Sequence[float],
    ):
        self.seq = seq
        self.capture_time = capture_time
        self.emit_time = emit_time
        self.inference_ms = inference_ms
        self.cache_hits = cache_hits
        self.tokens = [int(t) for t in tokens]
        self.action = [float(v) for v in action]

    def to_dict(self, timing: bool = True) -> Dict[str, Any]:
        record = {
            "seq": self.seq,
            "capture_time": self.capture_time,
            "emit_time": self.emit_time,
            "inference_ms": self.inference_ms,
            "cache_hits": self.cache_hits,
            "tokens": self.tokens,
            "action": self.action,
        }
        if not timing:
            for name in self.TIMING_FIELDS:
                record.pop(name)
        return record


class EpisodeTrace:
    """Per-step log of one episode, serialised as JSON lines."""

    def __init__(self, instruction: str):
        self.instruction = instruction
        self.steps: List[StepRecord] = []
        self.violations: List[BudgetViolation] = []

    def __len__(self) -> int:
        return len(self.steps)

    def emit_periods(self) -> np.ndarray:
        return np.diff([s.emit_time for s in self.steps])

    def to_records(self, timing: bool = True) -> List[Dict[str, Any]]:
        return [s.to_dict(timing) for s in self.steps]

    def to_json_lines(self, timing: bool = True) -> str:
        header = {"instruction": self.instruction, "violations": [v.to_dict() for v in self.violations]}
        if not timing:
            header["violations"] = len(self.violations)
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.to_records(timing)]
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        atomic_write_bytes(path, self.to_json_lines().encode("utf-8"))


class EpisodeResult:
    """Outcome of one episode."""

    def __init__(
        self,
        success: bool,
        steps: int,
        terminated: bool,
        aborted: bool = False,
        error: Optional[str] = None,
        budget_violations: int = 0,
    ):
        self.success = bool(success)
        self.steps = steps
        self.terminated = terminated
        self.aborted = aborted
        self.error = error
        self.budget_violations = budget_violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "success": self.success,
            "steps": self.steps,
            "terminated": self.terminated,
            "aborted": self.aborted,
            "error": self.error,
            "budget_violations": self.budget_violations,
        }

    def __repr__(self) -> str:
        return f"EpisodeResult(success={self.success}, steps={self.steps}, aborted={self.aborted})"


def run_episode(
    controller,
    env,
    instruction: str,
    loop: Optional[LoopConfig] = None,
    seed: int = 0,
    clock=None,
    delay: Optional[Callable[[], float]] = None,
    mailbox: Optional[FrameMailbox] = None,
    spec: Optional[ActionSpaceSpec] = None,
) -> Tuple[EpisodeTrace, EpisodeResult]:
    """
    Run one closed-loop episode.

    Each step captures a frame at ``t0 + k * period``, asks the controller
    for an action, waits until ``capture + fixed_wait`` and emits the
    action. The episode ends after a terminate action (which is emitted
    and recorded) or at the step limit.

    Args:
        controller: A ``PolicyModel`` or any object with ``reset(instruction)``
            and ``act(frame) -> ActionVector``
        env: Environment with ``render()``, ``step(action)`` and ``success()``
        instruction: Instruction text
        loop: Timing configuration
        seed: Decoding seed when ``controller`` is a model
        clock: ``WallClock`` (default) or ``VirtualClock``
        delay: Optional injected inference delay in seconds per step
        mailbox: Optional frame source replacing ``env.render()``; its
            frame timestamps are recorded as capture times
        spec: Action space used to tokenize actions for the trace

    Returns:
        Tuple of (trace, result); an environment fault aborts the episode
        and marks it failed
    """
    loop = loop or LoopConfig()
    clock = clock or WallClock()
    spec = spec or ActionSpaceSpec()
    if isinstance(controller, PolicyModel):
        controller = ModelController(controller, loop.decode_mode, seed)
    period = loop.control_period_ms / 1000.0
    wait = loop.fixed_wait_ms / 1000.0
    trace = EpisodeTrace(instruction)
    terminated = aborted = False
    error = None
    controller.reset(instruction)
    t0 = clock.now()
    for k in range(loop.step_limit):
        capture = max(t0 + k * period, clock.now())
        clock.sleep_until(capture)
        try:
            if mailbox is not None:
                _, frame, captured = mailbox.take(timeout=period)
            else:
                frame, captured = env.render(), capture
        except Exception as exc:
            aborted, error = True, f"capture failed: {exc}"
            logger.error("Episode '%s' aborted at step %d: %s", instruction, k, error)
            break
        started = time.perf_counter()
        action = controller.act(frame)
        compute = time.perf_counter() - started
        injected = delay() if delay is not None else 0.0
        clock.advance(injected)
        inference_ms = (compute + injected) * 1000.0
        if inference_ms > loop.model_budget_ms:
            trace.violations.append(BudgetViolation(k, inference_ms, loop.model_budget_ms))
            logger.warning("Step %d inference took %.1f ms (budget %.1f ms)", k, inference_ms, loop.model_budget_ms)
        clock.sleep_until(capture + wait)
        emit = clock.now()
        try:
            env.step(action)
        except Exception as exc:
            aborted, error = True, f"env fault: {exc}"
            logger.error("Episode '%s' aborted at step %d: %s", instruction, k, error)
            break
        tokens = getattr(controller, "last_tokens", None)
        if tokens is None:
            tokens = tokenize(action, spec)
        stats = getattr(controller, "last_stats", None)
        trace.steps.append(
            StepRecord(k, captured, emit, inference_ms, stats.cache_hits if stats else 0, tokens.tokens, action.values)
        )
        if action.mode == ActionMode.TERMINATE:
            terminated = True
            break
    success = False if aborted else bool(env.success())
    result = EpisodeResult(success, len(trace), terminated, aborted, error, len(trace.violations))
    logger.debug("Episode '%s': %r", instruction, result)
    return trace, result


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

BENCH_VARIANTS = ("reduction+cache", "reduction-nocache", "noreduction+cache", "noreduction-nocache")
BASELINE_VARIANT = "noreduction-nocache"


class _BenchRunner:
    """One variant's per-step work on a shared frame stream."""

    def __init__(self, model: PolicyModel, variant: str, instruction: str, positions: Embedding):
        self.model = model
        self.reduction = variant.startswith("reduction")
        self.cached = variant.endswith("+cache")
        self.instruction = instruction
        self.embedding = model.embed(instruction)[None, :]
        self.positions = positions
        self.frames: Deque[Any] = deque(maxlen=model.config.frames_in_window)
        self.blocks: Deque[Tensor] = deque(maxlen=model.config.frames_in_window)
        self.rng = np.random.default_rng(0)

    def _encode(self, frame) -> Tensor:
        if self.reduction:
            return self.model.encode_frame(frame, self.instruction)
        tokens = self.model.backbone(F.as_tensor(frame[None]), Tensor(self.embedding))
        return tokens.reshape(NUM_FRAME_TOKENS, -1)

    def step(self, frame) -> None:
        self.frames.append(frame)
        if self.cached:
            self.blocks.append(self._encode(frame))
            blocks = list(self.blocks)
        else:
            blocks = [self._encode(f) for f in self.frames]
        window = pad_history(blocks, self.model.config.frames_in_window)
        pooled = self.model.forward_from_tokens(
            _stack_blocks(window), positions=None if self.reduction else self.positions
        )[0]
        self.model.decode(pooled[-1], DecodeMode.GREEDY, self.rng)


def bench_inference(
    model: PolicyModel,
    n_steps: int = 500,
    variants: Sequence[str] = BENCH_VARIANTS,
    seed: int = 0,
    warmup: int = 5,
    instruction: str = "pick coke can",
) -> pd.DataFrame:
    """
    Median and p99 per-step latency of each inference variant on identical inputs.

    Without reduction, the sequence model runs over all 81 tokens of each
    frame, using a position table sized for the longer sequence.

    Returns:
        DataFrame with columns variant, median_ms, p99_ms, speedup_vs_baseline
    """
    cfg = model.config
    size = cfg.backbone.image_size
    stream = SeedStream(seed)
    pool = stream.rng("frames").random((16, 3, size, size)).astype(np.float32)
    positions = Embedding(cfg.frames_in_window * NUM_FRAME_TOKENS, cfg.width, stream.rng("positions"))
    rows = []
    with F.no_grad():
        for variant in variants:
            if variant not in BENCH_VARIANTS:
                raise ValueError(f"Unknown bench variant '{variant}'")
            runner = _BenchRunner(model, variant, instruction, positions)
            durations = []
            for k in range(warmup + n_steps):
                started = time.perf_counter()
                runner.step(pool[k % len(pool)])
                if k >= warmup:
                    durations.append(time.perf_counter() - started)
            rows.append({
                "variant": variant,
                "median_ms": percentile_ms(durations, 50),
                "p99_ms": percentile_ms(durations, 99),
            })
            logger.info("%s: median %.2f ms", variant, rows[-1]["median_ms"])
    report = pd.DataFrame(rows, columns=["variant", "median_ms", "p99_ms"])
    baseline = report.loc[report["variant"] == BASELINE_VARIANT, "median_ms"]
    reference = float(baseline.iloc[0]) if len(baseline) else float(report["median_ms"].max())
    report["speedup_vs_baseline"] = reference / report["median_ms"]
    return report

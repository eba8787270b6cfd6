"""
Tests for cached inference, the control loop and the latency benchmark.
"""
import threading

import numpy as np
import pytest

from rtdesk.core.action_codec import ActionVector
from rtdesk.core.config import ActionMode, LoopConfig
from rtdesk.models.policy_transformer import PolicyModel, forward, pad_history
from rtdesk.runtime.inference import (
    BENCH_VARIANTS,
    FrameMailbox,
    ModelController,
    RandomController,
    TokenCache,
    UniformDelay,
    VirtualClock,
    bench_inference,
    infer_step,
    run_episode,
)

from conftest import TINY_IMAGE, tiny_policy


def _frames(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((3, TINY_IMAGE, TINY_IMAGE)).astype(np.float32) for _ in range(n)]


class CountingEnv:
    """Renders random frames and counts the actions it receives."""

    def __init__(self, succeed=True, fail_at=None):
        self.frames = _frames(8, seed=5)
        self.actions = []
        self.succeed = succeed
        self.fail_at = fail_at

    def render(self):
        return self.frames[len(self.actions) % len(self.frames)]

    def step(self, action):
        if self.fail_at is not None and len(self.actions) == self.fail_at:
            raise RuntimeError("arm collided")
        self.actions.append(action)

    def success(self):
        return self.succeed


class ScriptedController:
    """Emits arm actions and terminates after a fixed number of steps."""

    def __init__(self, stop_after):
        self.stop_after = stop_after
        self.calls = 0

    def reset(self, instruction):
        self.calls = 0

    def act(self, frame):
        self.calls += 1
        if self.calls >= self.stop_after:
            return ActionVector.terminate()
        return ActionVector.build(arm=(0.1, 0.0, 0.0))


def test_cached_logits_match_forward(policy_config):
    """Test that 100 consecutive cached steps equal forward over the padded window bit for bit."""
    model = PolicyModel(policy_config, seed=0)
    length = policy_config.history_length
    cache = TokenCache(length)
    pool = _frames(7)
    seen = []
    for k in range(100):
        seen.append(pool[k % len(pool)])
        result = infer_step(model, cache, seen[-1], "pick apple")
        window = pad_history(seen[-length:], length)
        assert np.array_equal(result.logits.data, forward(model, window, "pick apple").data)
        assert result.stats.encodes == 1
        assert result.stats.cache_hits == min(k, length - 1)
    assert len(cache) == length


def test_short_history_is_padded(policy_config):
    """Test that the first step pads the window and reports it."""
    model = PolicyModel(policy_config, seed=0)
    result = infer_step(model, TokenCache(2), _frames(1)[0], "pick apple")
    assert result.stats.pads == 1
    assert result.stats.cache_hits == 0


def test_instruction_change_flushes(policy_config):
    """Test that a new instruction flushes the cache instead of raising."""
    model = PolicyModel(policy_config, seed=0)
    cache = TokenCache(2)
    frames = _frames(2)
    infer_step(model, cache, frames[0], "pick apple")
    result = infer_step(model, cache, frames[1], "open top drawer")
    assert result.stats.flushed
    assert len(cache) == 1
    fresh = infer_step(model, TokenCache(2), frames[1], "open top drawer")
    assert np.array_equal(result.logits.data, fresh.logits.data)


def test_model_controller_resets_between_episodes(policy_config):
    """Test that reset gives identical decisions for identical frame streams."""
    controller = ModelController(PolicyModel(policy_config, seed=0), decode_mode="sample", seed=3)
    runs = []
    for _ in range(2):
        controller.reset("pick apple")
        runs.append([controller.act(f).values.tolist() for f in _frames(3)])
    assert runs[0] == runs[1]


def test_random_controller_is_legal(spec):
    """Test that random actions always lie in the action space."""
    controller = RandomController(seed=1)
    controller.reset("pick apple")
    for _ in range(50):
        action = controller.act(None)
        assert action.validate(spec)[0]


def test_virtual_clock_fixed_wait_schedule():
    """Test that emits stay evenly spaced over 300 steps of 10 to 120 ms inference jitter."""
    loop = LoopConfig(step_limit=300)
    trace, result = run_episode(
        ScriptedController(stop_after=1000), CountingEnv(), "pick apple", loop,
        clock=VirtualClock(), delay=UniformDelay(10.0, 120.0, seed=0),
    )
    period = loop.control_period_ms / 1000.0
    periods = trace.emit_periods()
    assert len(trace) == 300
    assert len(periods) == 299
    assert np.std(periods) < 0.1 * period
    assert np.allclose(periods, period)
    assert trace.steps[0].emit_time - trace.steps[0].capture_time == pytest.approx(0.28)
    slow = sum(step.inference_ms > loop.model_budget_ms for step in trace.steps)
    assert result.budget_violations == slow
    assert not result.terminated


def test_mailbox_timestamp_is_recorded_as_capture_time():
    """Test that a frame taken from the mailbox keeps its camera timestamp in the trace."""
    mailbox = FrameMailbox()
    mailbox.put(_frames(1)[0], timestamp=-0.05)
    trace, result = run_episode(
        ScriptedController(stop_after=1), CountingEnv(), "pick apple", LoopConfig(step_limit=1),
        clock=VirtualClock(), mailbox=mailbox,
    )
    assert result.terminated
    assert trace.steps[0].capture_time == -0.05
    assert trace.steps[0].emit_time == pytest.approx(0.28)


def test_slow_inference_is_recorded_not_fatal():
    """Test that steps over the model budget are recorded as violations."""
    trace, result = run_episode(
        ScriptedController(stop_after=4), CountingEnv(), "pick apple", LoopConfig(step_limit=10),
        clock=VirtualClock(), delay=UniformDelay(150.0, 200.0, seed=0),
    )
    assert result.terminated
    assert result.steps == 4
    assert result.budget_violations == 4
    assert all(v.inference_ms > 100.0 for v in trace.violations)


def test_terminate_is_emitted_and_ends_episode():
    """Test that the terminate action is recorded as the last step."""
    env = CountingEnv()
    trace, result = run_episode(ScriptedController(stop_after=3), env, "pick apple", clock=VirtualClock())
    assert len(env.actions) == 3
    assert env.actions[-1].mode == ActionMode.TERMINATE
    assert trace.steps[-1].tokens[-1] == int(ActionMode.TERMINATE)
    assert result.success


def test_env_fault_aborts_episode():
    """Test that an environment error aborts the episode and marks it failed."""
    trace, result = run_episode(
        ScriptedController(stop_after=100), CountingEnv(fail_at=2), "pick apple", clock=VirtualClock()
    )
    assert result.aborted
    assert not result.success
    assert "arm collided" in result.error
    assert len(trace) == 2


def test_trace_json_lines_without_timing(policy_config):
    """Test that two runs with the same seed write identical timing-free traces."""
    model = PolicyModel(policy_config, seed=0)
    lines = []
    for _ in range(2):
        trace, _ = run_episode(
            model, CountingEnv(), "pick apple", LoopConfig(step_limit=3, model_budget_ms=1e6), clock=VirtualClock()
        )
        lines.append(trace.to_json_lines(timing=False))
    assert lines[0] == lines[1]
    assert "capture_time" not in lines[0]


def test_mailbox_keeps_latest_frame():
    """Test that an unread frame is replaced by a newer one."""
    mailbox = FrameMailbox()
    mailbox.put("a", timestamp=0.0)
    mailbox.put("b", timestamp=1.0)
    seq, frame, stamp = mailbox.take(timeout=0.1)
    assert (seq, frame, stamp) == (1, "b", 1.0)
    assert mailbox.dropped == 1
    with pytest.raises(TimeoutError):
        mailbox.take(timeout=0.01)


def test_mailbox_wakes_waiting_reader():
    """Test that a reader blocked on the mailbox receives a frame from another thread."""
    mailbox = FrameMailbox()
    timer = threading.Timer(0.05, mailbox.put, args=("frame",))
    timer.start()
    try:
        assert mailbox.take(timeout=2.0)[1] == "frame"
    finally:
        timer.cancel()


def test_bench_report_columns(policy_config):
    """Test that the benchmark reports every variant against the uncached full-token baseline."""
    report = bench_inference(PolicyModel(policy_config, seed=0), n_steps=3, warmup=1)
    assert report["variant"].tolist() == list(BENCH_VARIANTS)
    assert list(report.columns) == ["variant", "median_ms", "p99_ms", "speedup_vs_baseline"]
    baseline = report.set_index("variant").loc["noreduction-nocache", "speedup_vs_baseline"]
    assert baseline == pytest.approx(1.0)
    with pytest.raises(ValueError):
        bench_inference(PolicyModel(tiny_policy(), seed=0), n_steps=1, variants=("fast",))

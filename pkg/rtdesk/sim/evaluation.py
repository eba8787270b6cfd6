"""
Evaluation protocol: suites, closed-loop trials, reports and chained plans.

Every trial derives its scene, task choice and decoding seed from the
suite seed through named streams, so a (suite, controller) pair always
produces the same report apart from timing fields.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..core import numerics as F
from ..core.action_codec import ActionVector
from ..core.config import LoopConfig, RobustnessTier, Skill, Split
from ..core.errors import ConfigError, ContractError
from ..core.utils import SeedStream, atomic_write_bytes, atomic_write_json, fingerprint
from ..models.policy_transformer import PolicyModel
from ..runtime.inference import EpisodeResult, EpisodeTrace, ModelController, RandomController, VirtualClock, run_episode
from .expert import ExpertController
from .scene import Scene, render, step
from .tasks import TaskSpec, default_split, parse_instruction, sample_scene, sample_task_scene, sim_tasks_for

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 100


class SimEnv:
    """Environment handle over a scene and the task being attempted."""

    def __init__(self, scene: Scene, task: TaskSpec):
        self.scene = scene
        self.task = task

    def render(self) -> np.ndarray:
        return render(self.scene)

    def step(self, action: ActionVector) -> None:
        self.scene = step(self.scene, action)

    def success(self) -> bool:
        return self.task.success(self.scene)


class EvalSuite:
    """
    A set of evaluation trials.

    Attributes:
        name: Suite name (used in reports and seed streams)
        split: Instruction split the tasks come from
        tier: Robustness tier applied to every scene
        tasks: Instructions drawn round-robin in a seeded order
        trials: Number of trials
        seed: Suite seed
        image_size: Render resolution
    """

    def __init__(
        self,
        name: str,
        tasks: Sequence[TaskSpec],
        split: Union[Split, str] = Split.SEEN,
        tier: Union[RobustnessTier, str] = RobustnessTier.NONE,
        trials: int = DEFAULT_TRIALS,
        seed: int = 0,
        image_size: int = 96,
    ):
        if trials < 1:
            raise ConfigError(f"Suite '{name}' needs at least one trial")
        if not tasks:
            raise ConfigError(f"Suite '{name}' has no tasks")
        self.name = name
        self.tasks = list(tasks)
        self.split = Split(split)
        self.tier = RobustnessTier(tier)
        self.trials = int(trials)
        self.seed = int(seed)
        self.image_size = int(image_size)

    def task_for(self, trial: int) -> TaskSpec:
        order = SeedStream(self.seed).child(self.name).rng("order").permutation(len(self.tasks))
        return self.tasks[int(order[trial % len(self.tasks)])]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "split": self.split.value,
            "tier": self.tier.value,
            "trials": self.trials,
            "seed": self.seed,
            "image_size": self.image_size,
            "instructions": [t.instruction for t in self.tasks],
        }

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def __repr__(self) -> str:
        return f"EvalSuite('{self.name}', tier={self.tier.value}, trials={self.trials}, tasks={len(self.tasks)})"


# ---------------------------------------------------------------------------
# Suite factories
# ---------------------------------------------------------------------------

_OBJECT_SKILLS = (Skill.PICK, Skill.MOVE_NEAR, Skill.KNOCK_OVER, Skill.PLACE_UPRIGHT)


def seen_suite(trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    seen, _ = default_split()
    return EvalSuite("seen", seen, Split.SEEN, RobustnessTier.NONE, trials, seed, image_size)


def unseen_suite(trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    _, unseen = default_split()
    return EvalSuite("unseen", unseen, Split.UNSEEN, RobustnessTier.NONE, trials, seed, image_size)


def distractor_suite(level: str = "hard", trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    """Seen object tasks among 0-5 (easy) or 9 (medium, hard) distractors; hard also occludes the target."""
    seen, _ = default_split()
    tasks = [t for t in seen if t.skill in _OBJECT_SKILLS]
    tier = RobustnessTier(f"distractor-{level}")
    return EvalSuite(f"distractor-{level}", tasks, Split.SEEN, tier, trials, seed, image_size)


def background_suite(level: str = "hard", trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    seen, _ = default_split()
    tier = RobustnessTier(f"background-{level}")
    return EvalSuite(f"background-{level}", seen, Split.SEEN, tier, trials, seed, image_size)


def realistic_suite(level: str = "L1", trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    """
    Kitchen-like generalization tiers.

    L1 changes the background and lighting, L2 adds distractor types never
    seen in training, L3 also puts the target in the sink zone.
    """
    seen, _ = default_split()
    tasks = [t for t in seen if t.skill in (Skill.PICK, Skill.MOVE_NEAR)]
    return EvalSuite(level, tasks, Split.SEEN, RobustnessTier(level), trials, seed, image_size)


def bin_transfer_suite(trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    """Bin-picking scenes in the foreign embodiment's visual theme, instruction "pick anything"."""
    return EvalSuite("bin", [TaskSpec(Skill.PICK)], Split.SEEN, RobustnessTier.BIN, trials, seed, image_size)


def sim_object_suite(skill_seen: bool = True, trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    """Sim-only objects with a skill that was (pick) or was not (move-near) collected on them."""
    name = "sim-seen-skill" if skill_seen else "sim-unseen-skill"
    split = Split.SEEN if skill_seen else Split.UNSEEN
    return EvalSuite(name, sim_tasks_for(skill_seen), split, RobustnessTier.NONE, trials, seed, image_size)


SUITES: Dict[str, Callable[..., EvalSuite]] = {
    "seen": seen_suite,
    "unseen": unseen_suite,
    "distractor-easy": lambda **kw: distractor_suite("easy", **kw),
    "distractor-medium": lambda **kw: distractor_suite("medium", **kw),
    "distractor-hard": lambda **kw: distractor_suite("hard", **kw),
    "background-easy": lambda **kw: background_suite("easy", **kw),
    "background-medium": lambda **kw: background_suite("medium", **kw),
    "background-hard": lambda **kw: background_suite("hard", **kw),
    "L1": lambda **kw: realistic_suite("L1", **kw),
    "L2": lambda **kw: realistic_suite("L2", **kw),
    "L3": lambda **kw: realistic_suite("L3", **kw),
    "bin": bin_transfer_suite,
    "sim-seen-skill": lambda **kw: sim_object_suite(True, **kw),
    "sim-unseen-skill": lambda **kw: sim_object_suite(False, **kw),
}


def make_suite(name: str, trials: int = DEFAULT_TRIALS, seed: int = 0, image_size: int = 96) -> EvalSuite:
    """
    Build a suite by name.

    Raises:
        ConfigError: the name is not a known suite
    """
    if name not in SUITES:
        raise ConfigError(f"Unknown suite '{name}'. Choose from {sorted(SUITES)}")
    return SUITES[name](trials=trials, seed=seed, image_size=image_size)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

def controller_factory(kind: str, model: Optional[PolicyModel] = None, loop: Optional[LoopConfig] = None) -> Callable:
    """
    Factory building a fresh controller per trial.

    The returned callable takes ``(env, seed)``.

    Raises:
        ConfigError: unknown kind, or a model controller without a model
    """
    loop = loop or LoopConfig()
    if kind == "model":
        if model is None:
            raise ConfigError("The model controller needs a checkpoint")
        return lambda env, seed: ModelController(model, loop.decode_mode, seed)
    if kind == "expert":
        return lambda env, seed: ExpertController(env, seed)
    if kind == "random":
        spec = model.spec if model is not None else None
        return lambda env, seed: RandomController(spec, seed)
    raise ConfigError(f"Unknown controller '{kind}'")


def _as_factory(controller, loop: LoopConfig) -> Callable:
    if isinstance(controller, PolicyModel):
        return controller_factory("model", controller, loop)
    if isinstance(controller, str):
        return controller_factory(controller, None, loop)
    if callable(controller):
        return controller
    raise ContractError(f"Cannot evaluate a {type(controller).__name__}")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class EvalReport:
    """
    Results of one suite.

    Attributes:
        suite: Suite configuration
        trials: One log record per trial
        traces: Episode traces, in trial order
    """

    def __init__(self, suite: EvalSuite, trials: List[Dict[str, Any]], traces: Optional[List[EpisodeTrace]] = None):
        self.suite = suite
        self.trials = trials
        self.traces = traces or []

    @property
    def successes(self) -> int:
        return sum(1 for t in self.trials if t["success"])

    @property
    def success_rate(self) -> float:
        return self.successes / len(self.trials)

    def per_skill(self) -> Dict[str, float]:
        frame = pd.DataFrame(self.trials)
        return {skill: float(group["success"].mean()) for skill, group in frame.groupby("skill", sort=True)}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "suite": self.suite.to_dict(),
            "fingerprint": self.suite.fingerprint(),
            "trials": len(self.trials),
            "successes": self.successes,
            "success_rate": self.success_rate,
            "per_skill": self.per_skill(),
            "trial_logs": self.trials,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_frame(self) -> pd.DataFrame:
        """One row for the suite overall and one per skill."""
        frame = pd.DataFrame(self.trials)
        rows = [{"suite": self.suite.name, "skill": "all", "trials": len(frame),
                 "successes": int(frame["success"].sum()), "success_rate": self.success_rate}]
        for skill, group in frame.groupby("skill", sort=True):
            rows.append({"suite": self.suite.name, "skill": skill, "trials": len(group),
                         "successes": int(group["success"].sum()), "success_rate": float(group["success"].mean())})
        return pd.DataFrame(rows)

    def save(self, directory: str) -> None:
        """Write ``<suite>.json``, ``<suite>.csv`` and ``<suite>.traces.jsonl`` into ``directory``."""
        os.makedirs(directory, exist_ok=True)
        base = os.path.join(directory, self.suite.name)
        atomic_write_json(base + ".json", self.to_dict())
        atomic_write_bytes(base + ".csv", self.summary_frame().to_csv(index=False).encode("utf-8"))
        if self.traces:
            atomic_write_bytes(base + ".traces.jsonl", "".join(t.to_json_lines() for t in self.traces).encode("utf-8"))

    def __repr__(self) -> str:
        return f"EvalReport('{self.suite.name}', {self.successes}/{len(self.trials)})"


def combine_reports(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([
        {"suite": r.suite.name, "trials": len(r.trials), "successes": r.successes, "success_rate": r.success_rate}
        for r in reports
    ])


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def _run_trial(suite: EvalSuite, index: int, factory: Callable, loop: LoopConfig):
    stream = SeedStream(suite.seed).child(suite.name).child(f"trial-{index}")
    task = suite.task_for(index)
    scene = sample_task_scene(task, stream.integer("scene"), suite.tier, suite.image_size)
    env = SimEnv(scene, task)
    seed = stream.integer("controller")
    trace, result = run_episode(factory(env, seed), env, task.instruction, loop, seed, clock=VirtualClock())
    log = {"trial": index, "instruction": task.instruction, "skill": task.skill.value}
    log.update(result.to_dict())
    log.pop("error")
    return log, trace


def evaluate(
    controller,
    suite: EvalSuite,
    loop: Optional[LoopConfig] = None,
    jobs: int = 1,
    progress: bool = False,
) -> EvalReport:
    """
    Run every trial of ``suite``.

    Args:
        controller: A ``PolicyModel``, a controller kind ("model", "expert",
            "random") or a factory ``(env, seed) -> controller``
        suite: Suite to run
        loop: Loop timing; episodes run on a virtual clock
        jobs: Trials run concurrently (each owns its scene and controller)
        progress: Show a progress bar

    Returns:
        Report with trials in index order
    """
    loop = loop or LoopConfig()
    factory = _as_factory(controller, loop)
    indices = range(suite.trials)
    with F.no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_run_trial, suite, i, factory, loop) for i in indices]
                outcomes = [f.result() for f in tqdm(futures, desc=suite.name, disable=not progress)]
        else:
            outcomes = [_run_trial(suite, i, factory, loop) for i in tqdm(indices, desc=suite.name, disable=not progress)]
    report = EvalReport(suite, [o[0] for o in outcomes], [o[1] for o in outcomes])
    logger.info("Suite %s: %d/%d successful (%.1f%%)", suite.name, report.successes, suite.trials, 100 * report.success_rate)
    return report


# ---------------------------------------------------------------------------
# Chained execution
# ---------------------------------------------------------------------------

FIXTURE_PLANS: Dict[str, List[str]] = {
    "drawer-3": [
        "open top drawer",
        "place sponge into top drawer",
        "close top drawer",
    ],
    "kitchen-10": [
        "pick coke can",
        "move coke can near apple",
        "knock pepsi can over",
        "place pepsi can upright",
        "open middle drawer",
        "place orange into middle drawer",
        "close middle drawer",
        "move sponge near white bowl",
        "open bottom drawer",
        "place blue chip bag into bottom drawer",
    ],
}


def load_plan(name_or_path: str) -> List[TaskSpec]:
    """
    A fixture plan by name, or a JSON file holding a list of instructions.

    Raises:
        ContractError: the plan is empty or an instruction does not parse
    """
    if name_or_path in FIXTURE_PLANS:
        instructions = FIXTURE_PLANS[name_or_path]
    else:
        if not os.path.exists(name_or_path):
            raise FileNotFoundError(f"Plan not found: {name_or_path}")
        with open(name_or_path, "r", encoding="utf-8") as fh:
            instructions = json.load(fh)
    if not instructions:
        raise ContractError("A plan needs at least one instruction")
    return [parse_instruction(text) for text in instructions]


class ChainResult:
    def __init__(self, plan: Sequence[TaskSpec], steps: List[EpisodeResult]):
        self.plan = list(plan)
        self.steps = steps

    @property
    def step_success(self) -> List[bool]:
        return [r.success for r in self.steps]

    @property
    def success(self) -> bool:
        return len(self.steps) == len(self.plan) and all(self.step_success)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plan": [t.instruction for t in self.plan],
            "step_success": self.step_success,
            "success": self.success,
        }


def chain_execute(
    controller,
    plan: Sequence[Union[TaskSpec, str]],
    scene: Optional[Scene] = None,
    seed: int = 0,
    loop: Optional[LoopConfig] = None,
    image_size: int = 96,
) -> ChainResult:
    """
    Execute a plan instruction by instruction on one evolving scene.

    The chain stops at the first failed instruction.
    """
    tasks = [parse_instruction(t) if isinstance(t, str) else t for t in plan]
    if not tasks:
        raise ContractError("A plan needs at least one instruction")
    loop = loop or LoopConfig()
    factory = _as_factory(controller, loop)
    stream = SeedStream(seed).child("chain")
    if scene is None:
        scene = sample_scene(tasks, stream.rng("scene"), RobustnessTier.NONE, image_size)
    results: List[EpisodeResult] = []
    with F.no_grad():
        for index, task in enumerate(tasks):
            current = scene.copy()
            current.frozen = False
            env = SimEnv(current, task)
            step_seed = stream.integer(f"step-{index}")
            _, result = run_episode(factory(env, step_seed), env, task.instruction, loop, step_seed, clock=VirtualClock())
            results.append(result)
            scene = env.scene
            if not result.success:
                logger.debug("Chain stopped at step %d ('%s')", index, task.instruction)
                break
    return ChainResult(tasks, results)


def chain_statistics(
    controller,
    plan: Sequence[Union[TaskSpec, str]],
    chains: int = 200,
    seed: int = 0,
    loop: Optional[LoopConfig] = None,
    image_size: int = 96,
) -> Dict[str, Any]:
    """
    Measured chain success against the product of per-step success rates.

    Per-step rates come from independent single-instruction trials on
    freshly sampled scenes.
    """
    tasks = [parse_instruction(t) if isinstance(t, str) else t for t in plan]
    chain_hits = 0
    for k in range(chains):
        chain_hits += chain_execute(controller, tasks, seed=SeedStream(seed).integer(f"chain-{k}"), loop=loop,
                                    image_size=image_size).success
    rates = []
    for index, task in enumerate(tasks):
        suite = EvalSuite(f"chain-step-{index}", [task], trials=chains, seed=seed, image_size=image_size)
        rates.append(evaluate(controller, suite, loop).success_rate)
    return {
        "chains": chains,
        "chain_success_rate": chain_hits / chains,
        "per_step_rates": rates,
        "product_of_rates": float(np.prod(rates)),
    }

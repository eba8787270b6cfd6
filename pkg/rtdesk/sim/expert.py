"""
Scripted demonstrators.

The expert plans a short list of waypoints from the scene it first sees
(approach, descend, grasp, carry, release, ...) and follows them with
clipped proportional arm deltas. Waypoints on the table are jittered by a
seeded truncated Gaussian so demonstrations cover more than a handful of
action bins; waypoints coupled to drawers stay exact.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np

from ..core.action_codec import ActionVector
from ..core.config import RobustnessTier, Skill, SourceTag
from ..core.data import Episode, ForeignEpisode
from ..core.errors import GenerationError
from ..core.utils import SeedStream
from .scene import (
    ARM_STEP,
    BOWL_RADIUS,
    DRAWER_MAX,
    LIFT_Z,
    OBJECT_TYPES,
    SPAWN_REGION,
    Z_STEP,
    Scene,
    drawer_interior,
    handle_position,
    render,
    step,
)
from .tasks import TaskSpec, parse_instruction, sample_scene

logger = logging.getLogger(__name__)

NOISE_SIGMA = 0.02
NOISE_CLIP = 0.03
NEAR_OFFSET = 0.09
ARRIVAL_TOLERANCE = 1e-6
HIGH_Z = 1.0
OPEN, CLOSE = -1.0, 1.0
DEFAULT_STEP_LIMIT = 60


class Waypoint:
    """Arm target with the gripper (and yaw) command to hold there."""

    def __init__(self, x: float, y: float, z: float, gripper: float, yaw: float = 0.0, dwell: int = 0):
        self.x = float(x)
        self.y = float(y)
        self.z = float(z)
        self.gripper = gripper
        self.yaw = yaw
        self.dwell = dwell

    def __repr__(self) -> str:
        return f"Waypoint({self.x:.3f}, {self.y:.3f}, {self.z:.2f}, g={self.gripper:+.0f}, dwell={self.dwell})"


def truncated_jitter(rng: np.random.Generator, sigma: float = NOISE_SIGMA, clip: float = NOISE_CLIP) -> np.ndarray:
    """2-D Gaussian offset with each coordinate resampled until within ``clip``."""
    out = np.empty(2)
    for i in range(2):
        value = rng.normal(0.0, sigma)
        while abs(value) > clip:
            value = rng.normal(0.0, sigma)
        out[i] = value
    return out


class ScriptedExpert:
    """
    Closed-loop waypoint follower for one task.

    Args:
        task: Task to demonstrate
        rng: Generator for waypoint jitter and free-spot choice
        noise: Whether table waypoints are jittered
    """

    def __init__(self, task: TaskSpec, rng: np.random.Generator, noise: bool = True):
        self.task = task
        self.rng = rng
        self.noise = noise
        self.plan: Optional[List[Waypoint]] = None
        self.index = 0
        self.dwelt = 0

    # ------------------------------------------------------------------
    # Planning
    # ------------------------------------------------------------------

    def _jitter(self, x: float, y: float) -> Tuple[float, float]:
        if not self.noise:
            return x, y
        dx, dy = truncated_jitter(self.rng)
        return x + dx, y + dy

    def _check_feasible(self, scene: Scene) -> None:
        task = self.task
        for noun in task.objects:
            if scene.find(noun) is None:
                raise GenerationError(f"'{task.instruction}' names '{noun}', which is not in the scene")
        if task.target is not None and scene.position_of(task.target) is None:
            raise GenerationError(f"'{task.instruction}' refers to missing '{task.target}'")
        if task.skill == Skill.PLACE_INTO and not scene.is_drawer_open(task.slot):
            raise GenerationError(f"'{task.instruction}' needs the {task.slot} drawer open")
        if task.skill == Skill.PICK_FROM_PLACE_ON:
            obj = scene.find(task.obj)
            if obj.location != f"drawer:{task.slot}" or not scene.is_drawer_open(task.slot):
                raise GenerationError(f"'{task.instruction}' needs '{task.obj}' inside the open {task.slot} drawer")
        if task.skill == Skill.PICK and task.obj is None and not self._graspable(scene):
            raise GenerationError("'pick anything' found nothing to pick")
        if task.skill in (Skill.PLACE_UPRIGHT, Skill.KNOCK_OVER) and not OBJECT_TYPES[task.obj].elongated:
            raise GenerationError(f"'{task.obj}' cannot change orientation")

    @staticmethod
    def _graspable(scene: Scene) -> List[str]:
        names = []
        for obj in scene.objects:
            if obj.location == "held":
                continue
            if obj.location.startswith("drawer:") and not scene.is_drawer_open(obj.location.split(":", 1)[1]):
                continue
            names.append(obj.name)
        return names

    def _pick(self, scene: Scene, name: str, exact: bool = False) -> List[Waypoint]:
        obj = scene.find(name)
        if scene.robot.held == name:
            x, y = scene.robot.arm_world()
            return [Waypoint(x, y, LIFT_Z, CLOSE)]
        x, y = (obj.x, obj.y) if exact else self._jitter(obj.x, obj.y)
        return [
            Waypoint(x, y, HIGH_Z, OPEN),
            Waypoint(x, y, 0.0, OPEN),
            Waypoint(x, y, 0.0, CLOSE, dwell=1),
            Waypoint(x, y, LIFT_Z, CLOSE),
        ]

    def _place(self, x: float, y: float) -> List[Waypoint]:
        return [
            Waypoint(x, y, LIFT_Z, CLOSE),
            Waypoint(x, y, LIFT_Z, OPEN, dwell=1),
            Waypoint(x, y, HIGH_Z, OPEN),
        ]

    def _push(self, scene: Scene, name: str, yaw: float) -> List[Waypoint]:
        obj = scene.find(name)
        x, y = self._jitter(obj.x, obj.y)
        return [
            Waypoint(x, y, HIGH_Z, OPEN),
            Waypoint(x, y, 0.0, OPEN),
            Waypoint(x, y, 0.0, OPEN, yaw=yaw, dwell=1),
            Waypoint(x, y, HIGH_Z, OPEN),
        ]

    def _drawer(self, slot: str, extension: float, goal: float) -> List[Waypoint]:
        hx, hy = handle_position(slot, extension)
        gx, _ = handle_position(slot, goal)
        return [
            Waypoint(hx, hy, HIGH_Z, OPEN),
            Waypoint(hx, hy, 0.0, OPEN),
            Waypoint(hx, hy, 0.0, CLOSE, dwell=1),
            Waypoint(gx, hy, 0.0, CLOSE),
            Waypoint(gx, hy, 0.0, OPEN, dwell=1),
            Waypoint(gx, hy, HIGH_Z, OPEN),
        ]

    def _free_spot(self, scene: Scene) -> Tuple[float, float]:
        x0, x1, y0, y1 = SPAWN_REGION
        occupied = [(o.x, o.y) for o in scene.objects if o.location != "held"]
        for _ in range(500):
            x = float(self.rng.uniform(x0 + 0.05, x1 - 0.05))
            y = float(self.rng.uniform(y0 + 0.05, y1 - 0.05))
            if any(np.hypot(x - ox, y - oy) < 0.12 for ox, oy in occupied):
                continue
            if any(np.hypot(x - b.x, y - b.y) < BOWL_RADIUS + 0.05 for b in scene.bowls):
                continue
            return x, y
        raise GenerationError("No free spot on the table")

    def _make_plan(self, scene: Scene) -> List[Waypoint]:
        self._check_feasible(scene)
        task = self.task
        robot = scene.robot
        ax, ay = robot.arm_world()
        keep = task.obj if task.skill in (Skill.PICK, Skill.MOVE_NEAR, Skill.PLACE_INTO) else None
        plan: List[Waypoint] = []
        if robot.held is not None and robot.held != keep:
            plan += [Waypoint(ax, ay, robot.arm[2], OPEN, dwell=1), Waypoint(ax, ay, HIGH_Z, OPEN)]
        elif robot.held is None:
            plan.append(Waypoint(ax, ay, HIGH_Z, OPEN))

        skill = task.skill
        if skill == Skill.PICK:
            name = task.obj
            if name is None:
                candidates = self._graspable(scene)
                name = min(candidates, key=lambda n: np.hypot(scene.find(n).x - ax, scene.find(n).y - ay))
            plan += self._pick(scene, name)
        elif skill == Skill.MOVE_NEAR:
            obj = scene.find(task.obj)
            ref = scene.position_of(task.target)
            start = np.array([obj.x, obj.y]) if robot.held != task.obj else robot.arm_world()
            direction = start - ref
            norm = float(np.hypot(*direction))
            direction = direction / norm if norm > 1e-9 else np.array([-1.0, 0.0])
            gx, gy = self._jitter(*(ref + NEAR_OFFSET * direction))
            plan += self._pick(scene, task.obj) + self._place(gx, gy)
        elif skill in (Skill.PLACE_UPRIGHT, Skill.KNOCK_OVER):
            plan += self._push(scene, task.obj, -1.0 if skill == Skill.PLACE_UPRIGHT else 1.0)
        elif skill == Skill.OPEN_DRAWER:
            plan += self._drawer(task.slot, scene.drawers[task.slot], DRAWER_MAX)
        elif skill == Skill.CLOSE_DRAWER:
            plan += self._drawer(task.slot, scene.drawers[task.slot], 0.0)
        elif skill == Skill.PLACE_INTO:
            cx, cy = drawer_interior(task.slot, scene.drawers[task.slot])
            plan += self._pick(scene, task.obj) + self._place(*self._jitter(cx, cy))
        else:
            plan += self._pick(scene, task.obj, exact=True) + self._place(*self._free_spot(scene))
        return plan

    # ------------------------------------------------------------------
    # Acting
    # ------------------------------------------------------------------

    def reset(self) -> None:
        self.plan = None
        self.index = 0
        self.dwelt = 0

    def act(self, scene: Scene) -> ActionVector:
        """Next action for ``scene``; terminate once every waypoint is done."""
        if self.plan is None:
            self.plan = self._make_plan(scene)
            logger.debug("Planned %d waypoints for '%s'", len(self.plan), self.task.instruction)
        arm = np.array([*scene.robot.arm_world(), scene.robot.arm[2]])
        while self.index < len(self.plan):
            wp = self.plan[self.index]
            remaining = np.array([wp.x, wp.y, wp.z]) - arm
            if np.all(np.abs(remaining) <= ARRIVAL_TOLERANCE):
                if self.dwelt < wp.dwell:
                    self.dwelt += 1
                    return ActionVector.build(rotation=(0.0, 0.0, wp.yaw), gripper=wp.gripper)
                self.index += 1
                self.dwelt = 0
                continue
            delta = np.clip(remaining / np.array([ARM_STEP, ARM_STEP, Z_STEP]), -1.0, 1.0)
            return ActionVector.build(arm=delta, gripper=wp.gripper)
        return ActionVector.terminate()


def _episode_source(task: TaskSpec) -> SourceTag:
    kinds = [OBJECT_TYPES[n].source for n in task.objects]
    return SourceTag.SIM if kinds and all(k == SourceTag.SIM for k in kinds) else SourceTag.PRIMARY


def run_expert(
    scene: Scene,
    task: TaskSpec,
    seed: int = 0,
    step_limit: int = DEFAULT_STEP_LIMIT,
    noise: bool = True,
) -> Tuple[Episode, Scene]:
    """
    Roll the scripted expert out from ``scene``.

    Returns:
        Tuple of (episode, final scene)

    Raises:
        GenerationError: the task is infeasible, the step limit is hit or
            the final scene fails the success predicate
    """
    expert = ScriptedExpert(task, SeedStream(seed).rng("expert"), noise=noise)
    frames, actions = [], []
    current = scene
    for _ in range(step_limit):
        frames.append(render(current))
        action = expert.act(current)
        actions.append(action.values)
        current = step(current, action)
        if current.frozen:
            break
    else:
        raise GenerationError(f"Expert did not finish '{task.instruction}' within {step_limit} steps")
    if not task.success(current):
        raise GenerationError(f"Expert rollout of '{task.instruction}' ended without success")
    episode = Episode(task.instruction, np.stack(frames), np.stack(actions), task.skill, _episode_source(task), True)
    return episode, current


def scripted_expert(scene: Scene, task: TaskSpec, seed: int = 0, step_limit: int = DEFAULT_STEP_LIMIT) -> Episode:
    """
    Generate one successful demonstration of ``task`` from ``scene``.

    The episode always ends with a terminate action.
    """
    episode, _ = run_expert(scene, task, seed, step_limit)
    return episode


def collect_episode(task: TaskSpec, seed: int, image_size: int = 96, attempts: int = 10) -> Episode:
    """Sample a scene for ``task`` and demonstrate it, resampling failed layouts."""
    stream = SeedStream(seed).child("collect")
    for attempt in range(attempts):
        try:
            scene = sample_scene([task], stream.rng(f"scene-{attempt}"), RobustnessTier.NONE, image_size)
            return scripted_expert(scene, task, stream.integer(f"expert-{attempt}"))
        except GenerationError as exc:
            logger.debug("Attempt %d for '%s' failed: %s", attempt, task.instruction, exc)
    raise GenerationError(f"Could not demonstrate '{task.instruction}' in {attempts} attempts")


def foreign_bin_episode(seed: int, image_size: int = 96) -> ForeignEpisode:
    """
    A bin-picking demonstration from the 4-dof embodiment.

    Actions are ``(dx, dy, dz, yaw, gripper_closed)``; the instruction
    names the object actually picked.
    """
    stream = SeedStream(seed).child("foreign")
    task = parse_instruction("pick anything")
    scene = sample_scene([task], stream.rng("scene"), RobustnessTier.BIN, image_size)
    episode, final = run_expert(scene, task, stream.integer("expert"))
    rows = [
        (float(a[0]), float(a[1]), float(a[2]), float(a[5]), bool(a[6] > 0.0))
        for a in episode.actions.astype(np.float64)
    ]
    picked = final.find(final.robot.held).noun
    return ForeignEpisode(f"pick {picked}", episode.frames, rows)


class ExpertController:
    """
    Controller that reads the environment's scene and acts as the scripted expert.

    Used as the oracle "model" in evaluation.
    """

    def __init__(self, env, seed: int = 0, noise: bool = False):
        self.env = env
        self.seed = seed
        self.noise = noise
        self.expert: Optional[ScriptedExpert] = None

    def reset(self, instruction: str) -> None:
        self.expert = ScriptedExpert(parse_instruction(instruction), SeedStream(self.seed).rng("oracle"), self.noise)

    def act(self, frame) -> ActionVector:
        return self.expert.act(self.env.scene)

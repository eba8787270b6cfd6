"""
Instruction grammar, success predicates, the seen/unseen split and
randomized scene sampling.
"""
import logging
import re
from collections import OrderedDict
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from ..core.action_codec import PICK_ANYTHING
from ..core.config import RobustnessTier, Skill, SourceTag
from ..core.errors import ContractError, GenerationError
from ..core.utils import SeedStream, normalize_text
from .scene import (
    BIN_REGION,
    BOWL_COLORS,
    BOWL_RADIUS,
    DRAWER_CLOSED,
    DRAWER_MAX,
    DRAWER_OPEN,
    DRAWER_SLOTS,
    LIFT_Z,
    OBJECT_TYPES,
    PRIMARY_NOUNS,
    SIM_NOUNS,
    SINK_REGION,
    SPAWN_REGION,
    UNSEEN_DISTRACTOR_NOUNS,
    Bowl,
    Occluder,
    Scene,
    SceneObject,
    drawer_interior,
)

logger = logging.getLogger(__name__)

NEAR_DISTANCE = 0.15
SPAWN_MARGIN = 0.02
MIN_PAIR_DISTANCE = 0.3
SPAWN_ATTEMPTS = 500
LIGHTING_TINT = (1.05, 0.95, 0.82)

_TIER_BACKGROUND = {
    RobustnessTier.NONE: 0,
    RobustnessTier.DISTRACTOR_EASY: 0,
    RobustnessTier.DISTRACTOR_MEDIUM: 0,
    RobustnessTier.DISTRACTOR_HARD: 0,
    RobustnessTier.BACKGROUND_EASY: 1,
    RobustnessTier.BACKGROUND_MEDIUM: 2,
    RobustnessTier.BACKGROUND_HARD: 3,
    RobustnessTier.L1: 5,
    RobustnessTier.L2: 5,
    RobustnessTier.L3: 5,
    RobustnessTier.BIN: 4,
}


class TaskSpec:
    """
    A parsed instruction.

    Attributes:
        skill: Manipulation skill
        obj: Manipulated object noun (None for drawer skills and "pick anything")
        target: Reference object or bowl for move-near
        slot: Drawer slot for drawer skills
    """

    def __init__(
        self,
        skill: Skill,
        obj: Optional[str] = None,
        target: Optional[str] = None,
        slot: Optional[str] = None,
    ):
        self.skill = Skill(skill)
        self.obj = obj
        self.target = target
        self.slot = slot

    @property
    def instruction(self) -> str:
        skill = self.skill
        if skill == Skill.PICK:
            return f"pick {self.obj}" if self.obj else PICK_ANYTHING
        if skill == Skill.MOVE_NEAR:
            return f"move {self.obj} near {self.target}"
        if skill == Skill.PLACE_UPRIGHT:
            return f"place {self.obj} upright"
        if skill == Skill.KNOCK_OVER:
            return f"knock {self.obj} over"
        if skill == Skill.OPEN_DRAWER:
            return f"open {self.slot} drawer"
        if skill == Skill.CLOSE_DRAWER:
            return f"close {self.slot} drawer"
        if skill == Skill.PLACE_INTO:
            return f"place {self.obj} into {self.slot} drawer"
        return f"pick {self.obj} from {self.slot} drawer and place on counter"

    @property
    def nouns(self) -> Tuple[str, ...]:
        """Object, target and drawer words the instruction binds."""
        words = [self.obj, self.target, f"{self.slot} drawer" if self.slot else None]
        return tuple(w for w in words if w)

    @property
    def objects(self) -> Tuple[str, ...]:
        return tuple(n for n in (self.obj, self.target) if n and n in OBJECT_TYPES)

    def success(self, scene: Scene) -> bool:
        """Whether ``scene`` satisfies the task. Pure; never modifies the scene."""
        robot = scene.robot
        skill = self.skill
        if skill == Skill.PICK:
            if self.obj is None:
                held = robot.held is not None and not robot.held.startswith("handle:")
                return held and robot.arm[2] >= LIFT_Z
            return robot.held == self.obj and robot.arm[2] >= LIFT_Z
        if skill in (Skill.OPEN_DRAWER, Skill.CLOSE_DRAWER):
            ext = scene.drawers[self.slot]
            return ext >= DRAWER_OPEN if skill == Skill.OPEN_DRAWER else ext <= DRAWER_CLOSED
        obj = scene.find(self.obj)
        if obj is None:
            return False
        if skill == Skill.MOVE_NEAR:
            ref = scene.position_of(self.target)
            if ref is None or obj.location == "held":
                return False
            return bool(np.hypot(obj.x - ref[0], obj.y - ref[1]) < NEAR_DISTANCE)
        if skill == Skill.PLACE_UPRIGHT:
            return obj.upright and obj.location != "held"
        if skill == Skill.KNOCK_OVER:
            return not obj.upright
        if skill == Skill.PLACE_INTO:
            return obj.location == f"drawer:{self.slot}"
        return obj.location == "table"

    def to_dict(self) -> Dict[str, Optional[str]]:
        return {"skill": self.skill.value, "obj": self.obj, "target": self.target, "slot": self.slot}

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskSpec) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.instruction)

    def __repr__(self) -> str:
        return f"TaskSpec('{self.instruction}')"


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------

def _alternation(words: Iterable[str]) -> str:
    return "|".join(re.escape(w) for w in sorted(words, key=len, reverse=True))


_OBJ = f"(?P<obj>{_alternation(OBJECT_TYPES)})"
_TARGET = f"(?P<target>{_alternation(list(OBJECT_TYPES) + list(BOWL_COLORS))})"
_SLOT = f"(?P<slot>{_alternation(DRAWER_SLOTS)})"

_GRAMMAR: List[Tuple[Skill, "re.Pattern[str]"]] = [
    (Skill.PICK_FROM_PLACE_ON, re.compile(f"pick {_OBJ} from {_SLOT} drawer and place on counter")),
    (Skill.PICK, re.compile(f"pick {_OBJ}")),
    (Skill.MOVE_NEAR, re.compile(f"move {_OBJ} near {_TARGET}")),
    (Skill.PLACE_UPRIGHT, re.compile(f"place {_OBJ} upright")),
    (Skill.KNOCK_OVER, re.compile(f"knock {_OBJ} over")),
    (Skill.OPEN_DRAWER, re.compile(f"open {_SLOT} drawer")),
    (Skill.CLOSE_DRAWER, re.compile(f"close {_SLOT} drawer")),
    (Skill.PLACE_INTO, re.compile(f"place {_OBJ} into {_SLOT} drawer")),
]


def parse_instruction(text: str) -> TaskSpec:
    """
    Parse an instruction into its TaskSpec.

    Raises:
        ContractError: the instruction does not match exactly one template
    """
    text = normalize_text(text)
    if text == PICK_ANYTHING:
        return TaskSpec(Skill.PICK)
    matches = []
    for skill, pattern in _GRAMMAR:
        match = pattern.fullmatch(text)
        if match:
            groups = match.groupdict()
            matches.append(TaskSpec(skill, groups.get("obj"), groups.get("target"), groups.get("slot")))
    if len(matches) != 1:
        raise ContractError(f"Instruction '{text}' matches {len(matches)} task templates")
    task = matches[0]
    if task.obj is not None and task.obj == task.target:
        raise ContractError(f"Instruction '{text}' moves an object near itself")
    return task


def all_tasks(source: SourceTag = SourceTag.PRIMARY) -> List[TaskSpec]:
    """
    Every instruction of the vocabulary for a source.

    Primary objects support all eight skills (orientation skills only for
    elongated objects); sim objects support pick and move-near.
    """
    source = SourceTag(source)
    tasks: List[TaskSpec] = []
    if source == SourceTag.SIM:
        for noun in SIM_NOUNS:
            tasks.append(TaskSpec(Skill.PICK, noun))
            for target in list(SIM_NOUNS) + list(BOWL_COLORS):
                if target != noun:
                    tasks.append(TaskSpec(Skill.MOVE_NEAR, noun, target))
        return tasks
    nouns = PRIMARY_NOUNS
    for noun in nouns:
        tasks.append(TaskSpec(Skill.PICK, noun))
    for noun in nouns:
        for target in list(nouns) + list(BOWL_COLORS):
            if target != noun:
                tasks.append(TaskSpec(Skill.MOVE_NEAR, noun, target))
    for noun in nouns:
        if OBJECT_TYPES[noun].elongated:
            tasks.append(TaskSpec(Skill.PLACE_UPRIGHT, noun))
            tasks.append(TaskSpec(Skill.KNOCK_OVER, noun))
    for slot in DRAWER_SLOTS:
        tasks.append(TaskSpec(Skill.OPEN_DRAWER, slot=slot))
        tasks.append(TaskSpec(Skill.CLOSE_DRAWER, slot=slot))
    for noun in nouns:
        for slot in DRAWER_SLOTS:
            tasks.append(TaskSpec(Skill.PLACE_INTO, noun, slot=slot))
            tasks.append(TaskSpec(Skill.PICK_FROM_PLACE_ON, noun, slot=slot))
    return tasks


# ---------------------------------------------------------------------------
# Seen / unseen split
# ---------------------------------------------------------------------------

def _coverage(tasks: Iterable[TaskSpec]) -> Tuple[Set[str], Set[Skill]]:
    nouns: Set[str] = set()
    skills: Set[Skill] = set()
    for task in tasks:
        nouns.update(task.nouns)
        skills.add(task.skill)
    return nouns, skills


def split_tasks(
    tasks: Sequence[TaskSpec],
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> Tuple[List[TaskSpec], List[TaskSpec]]:
    """
    Hold out a fraction of instructions as the unseen split.

    Candidates are visited in a seeded order and held out greedily as long
    as every noun and skill still occurs in some remaining seen instruction.

    Returns:
        Tuple of (seen, unseen) task lists, each in input order
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ContractError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    tasks = list(tasks)
    target = int(round(holdout_fraction * len(tasks)))
    order = SeedStream(seed).rng("split").permutation(len(tasks))
    nouns, skills = _coverage(tasks)
    held: Set[int] = set()
    for index in order:
        if len(held) >= target:
            break
        if tasks[index].instruction == PICK_ANYTHING:
            continue
        remaining = [t for i, t in enumerate(tasks) if i not in held and i != index]
        if _coverage(remaining) == (nouns, skills):
            held.add(int(index))
    seen = [t for i, t in enumerate(tasks) if i not in held]
    unseen = [t for i, t in enumerate(tasks) if i in held]
    ok, err = check_split(seen, unseen)
    if not ok:
        raise ContractError(err)
    logger.debug("Split %d instructions into %d seen / %d unseen", len(tasks), len(seen), len(unseen))
    return seen, unseen


def check_split(seen: Sequence[TaskSpec], unseen: Sequence[TaskSpec]) -> Tuple[bool, Optional[str]]:
    """
    Leakage check between training and unseen instructions.

    Returns:
        Tuple of (is_valid, error_message)
    """
    seen_strings = {t.instruction for t in seen}
    leaked = sorted(t.instruction for t in unseen if t.instruction in seen_strings)
    if leaked:
        return False, f"Unseen instructions present in training data: {leaked[:5]}"
    nouns, skills = _coverage(seen)
    for task in unseen:
        missing = [n for n in task.nouns if n not in nouns]
        if missing:
            return False, f"Unseen instruction '{task.instruction}' uses nouns absent from training: {missing}"
        if task.skill not in skills:
            return False, f"Unseen instruction '{task.instruction}' uses a skill absent from training"
    return True, None


@lru_cache(maxsize=8)
def default_split(seed: int = 0, holdout_fraction: float = 0.2) -> Tuple[Tuple[TaskSpec, ...], Tuple[TaskSpec, ...]]:
    seen, unseen = split_tasks(all_tasks(SourceTag.PRIMARY), holdout_fraction, seed)
    return tuple(seen), tuple(unseen)


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

class _Placer:
    """Rejection sampler for non-overlapping spawn positions."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.taken: List[Tuple[float, float, float]] = []

    def place(self, radius: float, region=SPAWN_REGION, away_from: Optional[np.ndarray] = None) -> Tuple[float, float]:
        x0, x1, y0, y1 = region
        for _ in range(SPAWN_ATTEMPTS):
            x = float(self.rng.uniform(x0 + radius, x1 - radius))
            y = float(self.rng.uniform(y0 + radius, y1 - radius))
            if any(np.hypot(x - tx, y - ty) < radius + tr + SPAWN_MARGIN for tx, ty, tr in self.taken):
                continue
            if away_from is not None and np.hypot(x - away_from[0], y - away_from[1]) < MIN_PAIR_DISTANCE:
                continue
            self.taken.append((x, y, radius))
            return x, y
        raise GenerationError(f"Could not place an item of radius {radius} after {SPAWN_ATTEMPTS} attempts")


def _distractor_count(tier: RobustnessTier, rng: np.random.Generator) -> int:
    if tier == RobustnessTier.DISTRACTOR_EASY:
        return int(rng.integers(0, 6))
    if tier in (RobustnessTier.DISTRACTOR_MEDIUM, RobustnessTier.DISTRACTOR_HARD):
        return 9
    return int(rng.integers(0, 3))


def sample_scene(
    tasks: Sequence[TaskSpec],
    rng: np.random.Generator,
    tier: RobustnessTier = RobustnessTier.NONE,
    image_size: int = 96,
) -> Scene:
    """
    Randomize a scene in which every task of ``tasks`` is feasible in order.

    Initial object and drawer states follow the first task that mentions
    them: an object to be set upright starts knocked over, a drawer to be
    closed (or placed into, or picked from) starts open, and an object to
    be picked from a drawer starts inside it.

    Args:
        tasks: One task, or an ordered plan
        rng: Scene generator
        tier: Robustness tier (background, tint, distractors, occlusion)
        image_size: Render resolution

    Raises:
        GenerationError: the layout could not be placed
    """
    tier = RobustnessTier(tier)
    scene = Scene(image_size=image_size)
    scene.background = _TIER_BACKGROUND[tier]
    if tier in (RobustnessTier.L1, RobustnessTier.L2, RobustnessTier.L3):
        scene.tint = np.asarray(LIGHTING_TINT)
    placer = _Placer(rng)

    if tier == RobustnessTier.BIN:
        scene.bin_region = BIN_REGION
        x0, x1, y0, y1 = BIN_REGION
        placer.taken.append(((x0 + x1) / 2, (y0 + y1) / 2, 0.0))
        inner = (x0 + 0.02, x1 - 0.02, y0 + 0.02, y1 - 0.02)
        bin_placer = _Placer(rng)
        count = int(rng.integers(3, 6))
        for noun in rng.choice(PRIMARY_NOUNS, size=count, replace=False):
            x, y = bin_placer.place(OBJECT_TYPES[noun].radius, inner)
            scene.objects.append(SceneObject(str(noun), x, y, location="bin"))
        return scene

    for name in BOWL_COLORS:
        x, y = placer.place(BOWL_RADIUS)
        scene.bowls.append(Bowl(name, x, y))

    first_skill: "OrderedDict[str, TaskSpec]" = OrderedDict()
    drawer_first: "OrderedDict[str, TaskSpec]" = OrderedDict()
    for task in tasks:
        for noun in task.objects:
            first_skill.setdefault(noun, task)
        if task.slot:
            drawer_first.setdefault(task.slot, task)
    for slot, task in drawer_first.items():
        if task.skill in (Skill.CLOSE_DRAWER, Skill.PLACE_INTO, Skill.PICK_FROM_PLACE_ON):
            scene.drawers[slot] = DRAWER_MAX

    primary_obj = tasks[0].obj if tasks else None
    for noun, task in first_skill.items():
        radius = OBJECT_TYPES[noun].radius
        upright = not (task.skill == Skill.PLACE_UPRIGHT and task.obj == noun)
        if task.skill == Skill.PICK_FROM_PLACE_ON and task.obj == noun:
            x, y = drawer_interior(task.slot, scene.drawers[task.slot])
            x += float(rng.uniform(-0.01, 0.01))
            y += float(rng.uniform(-0.02, 0.02))
            scene.objects.append(SceneObject(noun, x, y, upright, location=f"drawer:{task.slot}"))
            continue
        if tier == RobustnessTier.L3 and noun == primary_obj:
            x, y = placer.place(radius, SINK_REGION)
        else:
            away = None
            if task.skill == Skill.MOVE_NEAR:
                away = scene.position_of(task.target if noun == task.obj else task.obj)
            x, y = placer.place(radius, away_from=away)
        scene.objects.append(SceneObject(noun, x, y, upright))
    for task in tasks:
        if task.skill == Skill.MOVE_NEAR:
            mover, ref = scene.find(task.obj), scene.position_of(task.target)
            if mover is not None and ref is not None and np.hypot(mover.x - ref[0], mover.y - ref[1]) < NEAR_DISTANCE:
                raise GenerationError(f"'{task.instruction}' already holds in the sampled scene")

    used = set(first_skill)
    pool = [n for n in PRIMARY_NOUNS if n not in used]
    count = _distractor_count(tier, rng)
    kinds: List[str] = [str(n) for n in rng.choice(pool, size=count, replace=True)] if pool and count else []
    if tier in (RobustnessTier.L2, RobustnessTier.L3):
        kinds = list(UNSEEN_DISTRACTOR_NOUNS) + kinds
    for noun in kinds:
        x, y = placer.place(OBJECT_TYPES[noun].radius)
        copies = sum(1 for o in scene.objects if o.noun == noun)
        name = noun if copies == 0 and noun not in used else f"{noun}#{copies + 1}"
        upright = bool(rng.random() < 0.8)
        scene.objects.append(SceneObject(noun, x, y, upright, distractor=True, name=name))

    if tier == RobustnessTier.DISTRACTOR_HARD and primary_obj is not None:
        target = scene.find(primary_obj)
        if target is not None and target.location == "table":
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            offset = 0.045
            scene.occluders.append(
                Occluder(target.x + offset * np.cos(angle), target.y + offset * np.sin(angle), render_radius=0.05)
            )
    return scene


def sample_task_scene(
    task: TaskSpec,
    seed: int,
    tier: RobustnessTier = RobustnessTier.NONE,
    image_size: int = 96,
    attempts: int = 20,
) -> Scene:
    """Sample a scene for one task, retrying layouts that cannot be placed."""
    stream = SeedStream(seed).child("scene")
    for attempt in range(attempts):
        try:
            return sample_scene([task], stream.rng(f"attempt-{attempt}"), tier, image_size)
        except GenerationError:
            continue
    raise GenerationError(f"No feasible layout for '{task.instruction}' after {attempts} attempts")


def sim_tasks_for(skill_seen: bool) -> List[TaskSpec]:
    """Sim-object tasks whose skill is (pick) or is not (move-near) collected with sim objects."""
    tasks = all_tasks(SourceTag.SIM)
    wanted = Skill.PICK if skill_seen else Skill.MOVE_NEAR
    return [t for t in tasks if t.skill == wanted]

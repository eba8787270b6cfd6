"""
Deterministic 2-D tabletop for language-conditioned manipulation.

The table spans [0, 1] x [0, 1] in world units (x to the right, y down in
the rendered image). A cabinet with three drawers stands on the right
edge, two bowls sit on the table and a bin may be present. The robot has
a mobile base (x, y, yaw offset of the camera and arm), an arm position
(x, y, z with z in [0, 1], 1 being high) and a gripper closedness command
in [-1, 1].

Mechanics are kinematic: the gripper closes on the nearest object (or
drawer handle) within reach when the arm is low, a held object follows
the arm, pulling a held handle slides its drawer, and a sharp yaw twist
with an open gripper knocks an elongated object over (positive) or sets
it upright (negative).
"""
import copy
import logging
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..core.action_codec import ActionVector
from ..core.config import ActionMode, SourceTag

logger = logging.getLogger(__name__)

ARM_STEP = 0.08
Z_STEP = 0.25
GRASP_RADIUS = 0.07
GRASP_Z = 0.25
LIFT_Z = 0.5
GRIP_CLOSE = 0.5
GRIP_OPEN = 0.0
PUSH_THRESHOLD = 0.5
BASE_STEP = 0.05
BASE_YAW_STEP = 0.1
BASE_LIMIT = 0.2
BASE_YAW_LIMIT = 0.5

DRAWER_FRONT = 0.86
HANDLE_OFFSET = 0.02
DRAWER_SLOTS = OrderedDict([("top", 0.55), ("middle", 0.70), ("bottom", 0.85)])
DRAWER_MAX = 0.12
DRAWER_OPEN = 0.06
DRAWER_CLOSED = 0.02
DRAWER_HALF_HEIGHT = 0.06
CABINET = (0.86, 0.98, 0.48, 0.92)

BOWL_RADIUS = 0.07
SPAWN_REGION = (0.1, 0.65, 0.1, 0.8)
SINK_REGION = (0.68, 0.85, 0.08, 0.35)
BIN_REGION = (0.25, 0.6, 0.3, 0.65)
ARM_START = (0.4, 0.92, 1.0)
DEFAULT_IMAGE_SIZE = 96


class ObjectType:
    """Static appearance and physical properties of an object noun."""

    def __init__(
        self,
        noun: str,
        color: Tuple[float, float, float],
        shape: str,
        radius: float = 0.035,
        elongated: bool = False,
        source: SourceTag = SourceTag.PRIMARY,
        unseen: bool = False,
    ):
        self.noun = noun
        self.color = np.asarray(color, dtype=np.float64)
        self.shape = shape
        self.radius = radius
        self.elongated = elongated
        self.source = source
        self.unseen = unseen

    def __repr__(self) -> str:
        return f"ObjectType('{self.noun}', shape={self.shape})"


OBJECT_TYPES: "OrderedDict[str, ObjectType]" = OrderedDict(
    (t.noun, t) for t in [
        ObjectType("coke can", (0.80, 0.08, 0.10), "can", elongated=True),
        ObjectType("pepsi can", (0.10, 0.20, 0.70), "can", elongated=True),
        ObjectType("redbull can", (0.62, 0.62, 0.78), "can", elongated=True),
        ObjectType("7up can", (0.10, 0.60, 0.20), "can", elongated=True),
        ObjectType("water bottle", (0.60, 0.85, 0.95), "bottle", elongated=True),
        ObjectType("apple", (0.50, 0.05, 0.12), "round", radius=0.04),
        ObjectType("orange", (1.00, 0.55, 0.00), "round", radius=0.04),
        ObjectType("sponge", (0.95, 0.90, 0.20), "square"),
        ObjectType("blue chip bag", (0.20, 0.40, 0.95), "bag", radius=0.04),
        ObjectType("brown chip bag", (0.55, 0.35, 0.15), "bag", radius=0.04),
        ObjectType("jar", (0.80, 0.70, 0.90), "round", radius=0.04, unseen=True),
        ObjectType("mug", (0.97, 0.97, 0.97), "mug", unseen=True),
        ObjectType("toy cube", (0.90, 0.20, 0.90), "square", source=SourceTag.SIM),
        ObjectType("toy ball", (0.20, 0.90, 0.90), "round", source=SourceTag.SIM),
    ]
)
PRIMARY_NOUNS = [n for n, t in OBJECT_TYPES.items() if t.source == SourceTag.PRIMARY and not t.unseen]
UNSEEN_DISTRACTOR_NOUNS = [n for n, t in OBJECT_TYPES.items() if t.unseen]
SIM_NOUNS = [n for n, t in OBJECT_TYPES.items() if t.source == SourceTag.SIM]
BOWL_COLORS = OrderedDict([("white bowl", (0.96, 0.96, 0.94)), ("paper bowl", (0.85, 0.78, 0.62))])


class SceneObject:
    """A movable object instance."""

    def __init__(
        self,
        noun: str,
        x: float,
        y: float,
        upright: bool = True,
        location: str = "table",
        distractor: bool = False,
        name: Optional[str] = None,
    ):
        self.noun = noun
        self.x = float(x)
        self.y = float(y)
        self.upright = bool(upright)
        self.location = location
        self.distractor = distractor
        self.name = name or noun

    @property
    def kind(self) -> ObjectType:
        return OBJECT_TYPES[self.noun]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name, "noun": self.noun, "x": self.x, "y": self.y, "upright": self.upright,
            "location": self.location, "distractor": self.distractor,
        }


class Bowl:
    def __init__(self, name: str, x: float, y: float):
        self.name = name
        self.x = float(x)
        self.y = float(y)


class Occluder:
    """Flat clutter drawn above objects; its footprint exceeds its collision radius."""

    def __init__(self, x: float, y: float, render_radius: float = 0.06, collision_radius: float = 0.01):
        self.x = float(x)
        self.y = float(y)
        self.render_radius = render_radius
        self.collision_radius = collision_radius


class Robot:
    """Base pose, arm pose, gripper command and held item."""

    def __init__(self):
        self.base = np.zeros(3)
        self.arm = np.asarray(ARM_START, dtype=np.float64)
        self.gripper = -1.0
        self.held: Optional[str] = None

    def arm_world(self) -> np.ndarray:
        return self.arm[:2] + self.base[:2]


class Scene:
    """
    Full tabletop state.

    Attributes:
        objects: Movable objects (unique names; distractor duplicates carry a "#k" suffix)
        bowls: Receptacle bowls
        drawers: Drawer extension per slot (0 closed, 0.12 fully open)
        bin_region: ``(x0, x1, y0, y1)`` of the bin, or None
        occluders: Flat clutter items
        robot: Robot state
        background: Background texture id
        tint: Multiplicative lighting tint
        image_size: Rendered resolution
    """

    def __init__(self, image_size: int = DEFAULT_IMAGE_SIZE):
        self.objects: List[SceneObject] = []
        self.bowls: List[Bowl] = []
        self.drawers: "OrderedDict[str, float]" = OrderedDict((slot, 0.0) for slot in DRAWER_SLOTS)
        self.bin_region: Optional[Tuple[float, float, float, float]] = None
        self.occluders: List[Occluder] = []
        self.robot = Robot()
        self.background = 0
        self.tint = np.ones(3)
        self.image_size = image_size
        self.frozen = False

    def copy(self) -> "Scene":
        return copy.deepcopy(self)

    def find(self, name: str) -> Optional[SceneObject]:
        for obj in self.objects:
            if obj.name == name:
                return obj
        return None

    def bowl(self, name: str) -> Optional[Bowl]:
        for bowl in self.bowls:
            if bowl.name == name:
                return bowl
        return None

    def position_of(self, noun: str) -> Optional[np.ndarray]:
        """World position of an object or bowl by name."""
        obj = self.find(noun)
        if obj is not None:
            return np.array([obj.x, obj.y])
        bowl = self.bowl(noun)
        if bowl is not None:
            return np.array([bowl.x, bowl.y])
        return None

    def is_drawer_open(self, slot: str) -> bool:
        return self.drawers[slot] >= DRAWER_OPEN

    def to_dict(self) -> Dict[str, Any]:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "bowls": [{"name": b.name, "x": b.x, "y": b.y} for b in self.bowls],
            "drawers": dict(self.drawers),
            "bin_region": list(self.bin_region) if self.bin_region else None,
            "occluders": [{"x": o.x, "y": o.y} for o in self.occluders],
            "robot": {
                "base": self.robot.base.tolist(),
                "arm": self.robot.arm.tolist(),
                "gripper": self.robot.gripper,
                "held": self.robot.held,
            },
            "background": self.background,
            "tint": self.tint.tolist(),
            "image_size": self.image_size,
        }

    def __repr__(self) -> str:
        return f"Scene(objects={[o.name for o in self.objects]}, held={self.robot.held})"


def handle_position(slot: str, extension: float) -> np.ndarray:
    return np.array([DRAWER_FRONT - HANDLE_OFFSET - extension, DRAWER_SLOTS[slot]])


def drawer_interior(slot: str, extension: float) -> Tuple[float, float]:
    """Center of an open drawer's interior."""
    return DRAWER_FRONT - extension / 2.0, DRAWER_SLOTS[slot]


def _graspable(scene: Scene, obj: SceneObject) -> bool:
    if obj.location.startswith("drawer:"):
        return scene.is_drawer_open(obj.location.split(":", 1)[1])
    return obj.location != "held"


def _nearest(candidates: List[Tuple[float, str]]) -> Optional[str]:
    candidates = [c for c in candidates if c[0] <= GRASP_RADIUS]
    if not candidates:
        return None
    return min(candidates)[1]


def _try_grasp(scene: Scene) -> None:
    arm = scene.robot.arm_world()
    candidates = []
    for obj in scene.objects:
        if _graspable(scene, obj):
            candidates.append((float(np.hypot(obj.x - arm[0], obj.y - arm[1])), obj.name))
    for slot, ext in scene.drawers.items():
        hx, hy = handle_position(slot, ext)
        candidates.append((float(np.hypot(hx - arm[0], hy - arm[1])), f"handle:{slot}"))
    chosen = _nearest(candidates)
    if chosen is None:
        return
    scene.robot.held = chosen
    if not chosen.startswith("handle:"):
        obj = scene.find(chosen)
        obj.location = "held"


def _release_location(scene: Scene, x: float, y: float) -> str:
    for slot, ext in scene.drawers.items():
        if ext < DRAWER_OPEN:
            continue
        cx, cy = drawer_interior(slot, ext)
        if abs(x - cx) <= ext / 2.0 and abs(y - cy) <= DRAWER_HALF_HEIGHT:
            return f"drawer:{slot}"
    for bowl in scene.bowls:
        if np.hypot(bowl.x - x, bowl.y - y) <= BOWL_RADIUS:
            return f"bowl:{bowl.name}"
    if scene.bin_region is not None:
        x0, x1, y0, y1 = scene.bin_region
        if x0 <= x <= x1 and y0 <= y <= y1:
            return "bin"
    return "table"


def _release(scene: Scene) -> None:
    held = scene.robot.held
    scene.robot.held = None
    if held is None or held.startswith("handle:"):
        return
    obj = scene.find(held)
    obj.location = _release_location(scene, obj.x, obj.y)


def _push(scene: Scene, yaw: float) -> None:
    arm = scene.robot.arm_world()
    candidates = [
        (float(np.hypot(o.x - arm[0], o.y - arm[1])), o.name)
        for o in scene.objects
        if o.kind.elongated and (o.location == "table" or o.location.startswith("bowl:"))
    ]
    chosen = _nearest(candidates)
    if chosen is not None:
        scene.find(chosen).upright = yaw < 0


def _slide_drawer(scene: Scene, slot: str) -> None:
    robot = scene.robot
    arm = robot.arm_world()
    old = scene.drawers[slot]
    ext = float(np.clip(DRAWER_FRONT - HANDLE_OFFSET - arm[0], 0.0, DRAWER_MAX))
    scene.drawers[slot] = ext
    hx, hy = handle_position(slot, ext)
    robot.arm[0] = hx - robot.base[0]
    robot.arm[1] = hy - robot.base[1]
    for obj in scene.objects:
        if obj.location == f"drawer:{slot}":
            obj.x -= ext - old


def _follow(scene: Scene) -> None:
    held = scene.robot.held
    if held is None or held.startswith("handle:"):
        return
    obj = scene.find(held)
    obj.x, obj.y = (float(v) for v in scene.robot.arm_world())


def step(scene: Scene, action: ActionVector) -> Scene:
    """
    Apply one action and return the next scene (the input is not modified).

    Arm mode moves the arm by ``ARM_STEP`` per unit in x/y and ``Z_STEP``
    in z, then applies the gripper command; base mode moves the base;
    terminate freezes the scene.
    """
    nxt = scene.copy()
    if scene.frozen:
        return nxt
    robot = nxt.robot
    mode = action.mode
    if mode == ActionMode.TERMINATE:
        nxt.frozen = True
        return nxt
    if mode == ActionMode.BASE:
        dx, dy, dyaw = action.base
        robot.base[0] = np.clip(robot.base[0] + dx * BASE_STEP, -BASE_LIMIT, BASE_LIMIT)
        robot.base[1] = np.clip(robot.base[1] + dy * BASE_STEP, -BASE_LIMIT, BASE_LIMIT)
        robot.base[2] = np.clip(robot.base[2] + dyaw * BASE_YAW_STEP, -BASE_YAW_LIMIT, BASE_YAW_LIMIT)
        _follow(nxt)
        return nxt

    dx, dy, dz = action.arm
    robot.arm[0] = np.clip(robot.arm[0] + dx * ARM_STEP, 0.0, 1.0)
    robot.arm[1] = np.clip(robot.arm[1] + dy * ARM_STEP, 0.0, 1.0)
    robot.arm[2] = np.clip(robot.arm[2] + dz * Z_STEP, 0.0, 1.0)
    if robot.held is not None and robot.held.startswith("handle:"):
        _slide_drawer(nxt, robot.held.split(":", 1)[1])

    command = action.gripper
    robot.gripper = command
    low = robot.arm[2] < GRASP_Z
    if command > GRIP_CLOSE and robot.held is None and low:
        _try_grasp(nxt)
    elif command < GRIP_OPEN and robot.held is not None:
        _follow(nxt)
        _release(nxt)
    yaw = float(action.rotation[2])
    if abs(yaw) > PUSH_THRESHOLD and robot.held is None and command <= GRIP_OPEN and low:
        _push(nxt, yaw)
    _follow(nxt)
    return nxt


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

BACKGROUNDS = {
    0: "plain",
    1: "sage",
    2: "stripes",
    3: "checker",
    4: "concrete",
    5: "tiles",
}


def _world_grid(scene: Scene, size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(size) + 0.5) / size - 0.5
    u, v = np.meshgrid(centers, centers)
    bx, by, yaw = scene.robot.base
    cos, sin = np.cos(yaw), np.sin(yaw)
    return 0.5 + bx + cos * u - sin * v, 0.5 + by + sin * u + cos * v


def _background(texture: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    def fill(color):
        return np.broadcast_to(np.asarray(color, dtype=np.float64)[:, None, None], (3,) + X.shape).copy()

    if texture == 1:
        out = fill((0.70, 0.78, 0.64))
        out += 0.02 * np.sin(35.0 * Y)[None]
    elif texture == 2:
        band = (np.floor((X + Y) / 0.1) % 2).astype(bool)
        out = np.where(band[None], fill((0.85, 0.55, 0.50)), fill((0.96, 0.92, 0.86)))
    elif texture == 3:
        cell = ((np.floor(X / 0.08) + np.floor(Y / 0.08)) % 2).astype(bool)
        out = np.where(cell[None], fill((0.12, 0.18, 0.45)), fill((0.92, 0.86, 0.30)))
    elif texture == 4:
        out = fill((0.45, 0.47, 0.50))
        out += 0.05 * (np.sin(37.0 * X) * np.sin(23.0 * Y))[None]
    elif texture == 5:
        grout = (np.abs(((X + 1.0) % 0.125) - 0.0625) > 0.055) | (np.abs(((Y + 1.0) % 0.125) - 0.0625) > 0.055)
        out = np.where(grout[None], fill((0.35, 0.35, 0.38)), fill((0.90, 0.90, 0.93)))
    else:
        out = fill((0.82, 0.74, 0.60))
        out += 0.03 * np.sin(40.0 * Y)[None]
    return out


class _Canvas:
    def __init__(self, scene: Scene, size: int):
        self.X, self.Y = _world_grid(scene, size)
        self.rgb = _background(scene.background, self.X, self.Y)
        self.ids = np.full(self.X.shape, -1, dtype=np.int64)
        self.labels: List[str] = []

    def circle(self, cx, cy, r) -> np.ndarray:
        return (self.X - cx) ** 2 + (self.Y - cy) ** 2 <= r * r

    def rect(self, cx, cy, hx, hy) -> np.ndarray:
        return (np.abs(self.X - cx) <= hx) & (np.abs(self.Y - cy) <= hy)

    def paint(self, mask: np.ndarray, color, label: Optional[str] = None) -> None:
        color = np.asarray(color, dtype=np.float64)
        if color.ndim == 1:
            self.rgb[:, mask] = color[:, None]
        else:
            self.rgb[:, mask] = color[:, mask]
        if label is not None:
            if label not in self.labels:
                self.labels.append(label)
            self.ids[mask] = self.labels.index(label)


def _draw_object(canvas: _Canvas, obj: SceneObject, x: float, y: float) -> None:
    kind = obj.kind
    r = kind.radius
    label = f"object:{obj.name}"
    if kind.elongated and not obj.upright:
        length = 2.5 * r if kind.shape == "bottle" else 2.0 * r
        mask = canvas.rect(x, y, length, 0.75 * r)
    elif kind.shape in ("square",):
        mask = canvas.rect(x, y, r, r)
    elif kind.shape == "bag":
        mask = canvas.rect(x, y, 1.2 * r, 0.9 * r)
    else:
        mask = canvas.circle(x, y, r)
    if kind.source == SourceTag.SIM:
        canvas.paint(mask, kind.color, label)
    else:
        shade = 0.88 + 0.12 * np.clip((canvas.Y - y) / max(r, 1e-6), -1.0, 1.0)
        canvas.paint(mask, np.clip(kind.color[:, None, None] * shade[None], 0.0, 1.0), label)
    if kind.elongated and obj.upright:
        cap = (1.0, 1.0, 1.0) if kind.shape == "bottle" else kind.color * 0.55
        canvas.paint(canvas.circle(x, y, 0.45 * r), cap, label)
    if kind.shape == "bag":
        canvas.paint(mask & canvas.rect(x, y, 1.2 * r, 0.2 * r), (0.95, 0.95, 0.95), label)
    if kind.shape == "mug":
        canvas.paint(canvas.rect(x + 1.2 * r, y, 0.35 * r, 0.35 * r), kind.color * 0.8, label)


def rasterize(scene: Scene, size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """
    Draw the scene.

    Returns:
        Tuple of (rgb [3, S, S] in [0, 1] before quantisation, id map
        [S, S] of the top-most labelled item, labels indexed by the id map)
    """
    canvas = _Canvas(scene, size or scene.image_size)
    if scene.bin_region is not None:
        x0, x1, y0, y1 = scene.bin_region
        cx, cy, hx, hy = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
        canvas.paint(canvas.rect(cx, cy, hx + 0.015, hy + 0.015), (0.85, 0.45, 0.10), "bin")
        canvas.paint(canvas.rect(cx, cy, hx, hy), (0.55, 0.50, 0.45), "bin")
    for bowl in scene.bowls:
        color = np.asarray(BOWL_COLORS[bowl.name])
        canvas.paint(canvas.circle(bowl.x, bowl.y, BOWL_RADIUS), color * 0.8, f"bowl:{bowl.name}")
        canvas.paint(canvas.circle(bowl.x, bowl.y, BOWL_RADIUS * 0.75), color, f"bowl:{bowl.name}")
    x0, x1, y0, y1 = CABINET
    canvas.paint(canvas.rect((x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2), (0.40, 0.25, 0.12), "cabinet")
    for slot, ext in scene.drawers.items():
        sy = DRAWER_SLOTS[slot]
        if ext > 1e-6:
            canvas.paint(canvas.rect(DRAWER_FRONT - ext / 2, sy, ext / 2, DRAWER_HALF_HEIGHT), (0.62, 0.46, 0.30), f"drawer:{slot}")
        canvas.paint(canvas.rect(DRAWER_FRONT - ext, sy, 0.008, DRAWER_HALF_HEIGHT), (0.30, 0.18, 0.08), f"drawer:{slot}")
        hx, hy = handle_position(slot, ext)
        canvas.paint(canvas.circle(hx, hy, 0.015), (0.75, 0.75, 0.78), f"handle:{slot}")
    for obj in scene.objects:
        if obj.location == "held":
            continue
        if obj.location.startswith("drawer:") and not scene.is_drawer_open(obj.location.split(":", 1)[1]):
            continue
        _draw_object(canvas, obj, obj.x, obj.y)
    for occluder in scene.occluders:
        canvas.paint(canvas.circle(occluder.x, occluder.y, occluder.render_radius), (0.55, 0.55, 0.55), "occluder")
    robot = scene.robot
    ax, ay = robot.arm_world()
    if robot.held is not None and not robot.held.startswith("handle:"):
        _draw_object(canvas, scene.find(robot.held), ax, ay)
    outer = 0.03 + 0.02 * robot.arm[2]
    ring = canvas.circle(ax, ay, outer) & ~canvas.circle(ax, ay, outer - 0.012)
    closed = (robot.gripper + 1.0) / 2.0
    canvas.paint(ring, (0.1 + 0.85 * closed,) * 3, "gripper")
    return canvas.rgb * scene.tint[:, None, None], canvas.ids, canvas.labels


def render(scene: Scene, size: Optional[int] = None) -> np.ndarray:
    """
    Rasterize the scene to a [3, S, S] float32 image quantised to 8 bits.

    Identical scenes give identical pixels.
    """
    rgb, _, _ = rasterize(scene, size)
    return (np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def visible_pixels(scene: Scene, name: str, size: Optional[int] = None) -> int:
    """Number of pixels where object ``name`` is the top-most item."""
    _, ids, labels = rasterize(scene, size)
    label = f"object:{name}"
    if label not in labels:
        return 0
    return int((ids == labels.index(label)).sum())

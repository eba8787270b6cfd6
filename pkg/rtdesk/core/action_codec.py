"""
Action space definition and action tokenization.

The robot action has eleven dimensions: seven for the arm (x, y, z, roll,
pitch, yaw, gripper closedness), three for the mobile base (x, y, yaw) and
a categorical mode switch (arm, base, terminate). Every continuous
dimension is discretized into 256 uniform bins; the mode occupies tokens
0..2 of the same vocabulary, so a policy head always predicts 11 x 256
logits.
"""
import json
import logging
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ActionMode
from .errors import ActionRangeError, ConfigError, DimensionError
from .utils import normalize_text

logger = logging.getLogger(__name__)

DIMENSION_NAMES: Tuple[str, ...] = (
    "arm_x", "arm_y", "arm_z", "roll", "pitch", "yaw", "gripper",
    "base_x", "base_y", "base_yaw", "mode",
)
NUM_DIMENSIONS = len(DIMENSION_NAMES)
NUM_CONTINUOUS = NUM_DIMENSIONS - 1
MODE_INDEX = NUM_DIMENSIONS - 1
GRIPPER_INDEX = DIMENSION_NAMES.index("gripper")
YAW_INDEX = DIMENSION_NAMES.index("yaw")
NUM_BINS = 256
PICK_ANYTHING = "pick anything"


class ActionSpaceSpec:
    """
    Bounds and discretization of the 11-dimensional action space.

    Examples:
        >>> spec = ActionSpaceSpec()
        >>> spec.bin_width()[0]
        0.0078125
    """

    def __init__(
        self,
        lower: Optional[Sequence[float]] = None,
        upper: Optional[Sequence[float]] = None,
        bins: int = NUM_BINS,
    ):
        """
        Initialize the action space.

        Args:
            lower: Lower bound of each of the 10 continuous dimensions
                (default -1 everywhere)
            upper: Upper bound of each continuous dimension (default +1)
            bins: Bins per continuous dimension; fixed at 256
        """
        self.lower = np.asarray(
            lower if lower is not None else [-1.0] * NUM_CONTINUOUS, dtype=np.float64
        )
        self.upper = np.asarray(
            upper if upper is not None else [1.0] * NUM_CONTINUOUS, dtype=np.float64
        )
        self.bins = int(bins)
        self.names = DIMENSION_NAMES
        self.validate()

    def validate(self) -> None:
        if self.lower.shape != (NUM_CONTINUOUS,) or self.upper.shape != (NUM_CONTINUOUS,):
            raise ConfigError(
                f"Action space needs {NUM_CONTINUOUS} continuous bounds, "
                f"got {self.lower.shape[0]} lower and {self.upper.shape[0]} upper"
            )
        bad = np.nonzero(self.lower >= self.upper)[0]
        if bad.size:
            name = DIMENSION_NAMES[int(bad[0])]
            raise ConfigError(f"Action dimension '{name}' has lower >= upper")
        if self.bins != NUM_BINS:
            raise ConfigError(f"Bin count is fixed at {NUM_BINS}, got {self.bins}")

    def bin_width(self) -> np.ndarray:
        return (self.upper - self.lower) / self.bins

    def midpoint(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    def to_dict(self) -> Dict[str, Any]:
        """Serialise as a list of per-dimension records in dimension order."""
        dims = [
            {"name": name, "lower": float(lo), "upper": float(hi), "kind": "continuous"}
            for name, lo, hi in zip(DIMENSION_NAMES, self.lower, self.upper)
        ]
        dims.append({
            "name": "mode",
            "kind": "categorical",
            "values": [m.name.lower() for m in ActionMode],
        })
        return {"bins": self.bins, "dimensions": dims}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ActionSpaceSpec":
        dims = payload.get("dimensions", [])
        names = tuple(d.get("name") for d in dims)
        if names != DIMENSION_NAMES:
            raise ConfigError(f"Unexpected action dimension order: {names}")
        continuous = dims[:NUM_CONTINUOUS]
        return cls(
            lower=[d["lower"] for d in continuous],
            upper=[d["upper"] for d in continuous],
            bins=payload.get("bins", NUM_BINS),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, json_str: str) -> "ActionSpaceSpec":
        return cls.from_dict(json.loads(json_str))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ActionSpaceSpec)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and self.bins == other.bins
        )

    def __repr__(self) -> str:
        return f"ActionSpaceSpec(dims={NUM_DIMENSIONS}, bins={self.bins})"


class ActionVector:
    """
    One continuous robot action.

    ``values`` holds 11 numbers: ten continuous dimensions followed by the
    mode index (0 arm, 1 base, 2 terminate).
    """

    __slots__ = ("values",)

    def __init__(self, values: Sequence[float]):
        array = np.array(values, dtype=np.float64).reshape(-1)
        if array.shape != (NUM_DIMENSIONS,):
            raise DimensionError("ActionVector needs 11 values", array.shape)
        if not np.all(np.isfinite(array)):
            raise ActionRangeError("continuous", array.tolist(), "-inf", "inf")
        mode = array[MODE_INDEX]
        if mode not in (0.0, 1.0, 2.0):
            raise ActionRangeError("mode", mode, 0, 2)
        array.setflags(write=False)
        self.values = array

    @classmethod
    def build(
        cls,
        arm: Sequence[float] = (0.0, 0.0, 0.0),
        rotation: Sequence[float] = (0.0, 0.0, 0.0),
        gripper: float = 0.0,
        base: Sequence[float] = (0.0, 0.0, 0.0),
        mode: Union[ActionMode, int] = ActionMode.ARM,
    ) -> "ActionVector":
        """Assemble an action from its named parts."""
        return cls([*arm, *rotation, gripper, *base, int(mode)])

    @classmethod
    def terminate(cls) -> "ActionVector":
        return cls.build(mode=ActionMode.TERMINATE)

    @property
    def continuous(self) -> np.ndarray:
        return self.values[:NUM_CONTINUOUS]

    @property
    def mode(self) -> ActionMode:
        return ActionMode(int(self.values[MODE_INDEX]))

    @property
    def arm(self) -> np.ndarray:
        return self.values[0:3]

    @property
    def rotation(self) -> np.ndarray:
        return self.values[3:6]

    @property
    def gripper(self) -> float:
        return float(self.values[GRIPPER_INDEX])

    @property
    def base(self) -> np.ndarray:
        return self.values[7:10]

    def validate(self, spec: ActionSpaceSpec) -> Tuple[bool, Optional[str]]:
        """
        Check the action against the bounds of ``spec``.

        Returns:
            Tuple of (is_valid, error_message)
        """
        below = self.continuous < spec.lower
        above = self.continuous > spec.upper
        bad = np.nonzero(below | above)[0]
        if bad.size:
            d = int(bad[0])
            return False, (
                f"Action dimension '{DIMENSION_NAMES[d]}' value {self.continuous[d]} "
                f"outside [{spec.lower[d]}, {spec.upper[d]}]"
            )
        return True, None

    def to_list(self):
        return self.values.tolist()

    def __eq__(self, other) -> bool:
        return isinstance(other, ActionVector) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"ActionVector(mode={self.mode.name.lower()}, values={np.round(self.continuous, 3).tolist()})"


class TokenizedAction:
    """Eleven integer action tokens in [0, 256)."""

    __slots__ = ("tokens",)

    def __init__(self, tokens: Sequence[int]):
        array = np.array(tokens, dtype=np.int64).reshape(-1)
        if array.shape != (NUM_DIMENSIONS,):
            raise DimensionError("TokenizedAction needs 11 tokens", array.shape)
        check_tokens(array[None, :])
        array.setflags(write=False)
        self.tokens = array

    @property
    def mode(self) -> ActionMode:
        return ActionMode(int(self.tokens[MODE_INDEX]))

    def to_list(self):
        return self.tokens.tolist()

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenizedAction) and np.array_equal(self.tokens, other.tokens)

    def __hash__(self) -> int:
        return hash(self.tokens.tobytes())

    def __repr__(self) -> str:
        return f"TokenizedAction({self.tokens.tolist()})"


def check_tokens(tokens: np.ndarray, bins: int = NUM_BINS) -> None:
    """Raise ``ActionRangeError`` for any token outside its legal range."""
    tokens = np.asarray(tokens)
    bad = np.argwhere((tokens < 0) | (tokens >= bins))
    if bad.size:
        row, d = bad[0]
        raise ActionRangeError(DIMENSION_NAMES[d], int(tokens[row, d]), 0, bins - 1)
    modes = tokens[..., MODE_INDEX]
    bad = np.nonzero((modes < 0) | (modes > int(ActionMode.TERMINATE)))[0]
    if bad.size:
        raise ActionRangeError("mode", int(modes[bad[0]]), 0, int(ActionMode.TERMINATE))


def tokenize_array(values: np.ndarray, spec: ActionSpaceSpec) -> np.ndarray:
    """
    Tokenize a batch of actions.

    Args:
        values: Array of shape [N, 11]
        spec: Action space

    Returns:
        Integer array of shape [N, 11]
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != NUM_DIMENSIONS:
        raise DimensionError("tokenize expects [N, 11] actions", values.shape)
    cont = values[:, :NUM_CONTINUOUS]
    outside = np.argwhere((cont < spec.lower) | (cont > spec.upper))
    if outside.size:
        row, d = outside[0]
        raise ActionRangeError(DIMENSION_NAMES[d], float(cont[row, d]), spec.lower[d], spec.upper[d])
    scaled = np.floor((cont - spec.lower) / (spec.upper - spec.lower) * spec.bins)
    tokens = np.empty(values.shape, dtype=np.int64)
    tokens[:, :NUM_CONTINUOUS] = np.clip(scaled, 0, spec.bins - 1).astype(np.int64)
    tokens[:, MODE_INDEX] = values[:, MODE_INDEX].astype(np.int64)
    check_tokens(tokens, spec.bins)
    return tokens


def detokenize_array(tokens: np.ndarray, spec: ActionSpaceSpec) -> np.ndarray:
    """Decode a batch of tokens ([N, 11]) to bin-center continuous values."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != NUM_DIMENSIONS:
        raise DimensionError("detokenize expects [N, 11] tokens", tokens.shape)
    check_tokens(tokens, spec.bins)
    values = np.empty(tokens.shape, dtype=np.float64)
    cont = tokens[:, :NUM_CONTINUOUS].astype(np.float64)
    values[:, :NUM_CONTINUOUS] = spec.lower + (cont + 0.5) / spec.bins * (spec.upper - spec.lower)
    values[:, MODE_INDEX] = tokens[:, MODE_INDEX]
    return values


def tokenize(action: ActionVector, spec: ActionSpaceSpec) -> TokenizedAction:
    """
    Map an action to its bin indices.

    Each continuous value ``v`` becomes
    ``clamp(floor((v - lower) / (upper - lower) * 256), 0, 255)``; the mode
    passes through as its categorical index.

    Raises:
        ActionRangeError: a value lies outside its dimension's bounds
    """
    return TokenizedAction(tokenize_array(action.values[None, :], spec)[0])


def detokenize(tokens: Union[TokenizedAction, Sequence[int]], spec: ActionSpaceSpec) -> ActionVector:
    """Decode tokens to the centers of their bins."""
    raw = tokens.tokens if isinstance(tokens, TokenizedAction) else np.asarray(tokens)
    return ActionVector(detokenize_array(np.asarray(raw).reshape(1, -1), spec)[0])


def _gripper_closed(value: Any) -> bool:
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered not in ("open", "close", "closed"):
            raise ActionRangeError("gripper", value, "open", "close")
        return lowered != "open"
    return bool(value)


def remap_foreign(a4: Sequence[Any], spec: ActionSpaceSpec) -> ActionVector:
    """
    Convert a 4-dof foreign-embodiment action to the full action space.

    Args:
        a4: ``(x, y, z, yaw, gripper)`` where gripper is a binary command
            (``"open"``/``"close"`` or a truthy close flag)
        spec: Target action space

    Returns:
        Action with roll and pitch zeroed, yaw kept, the gripper at the
        lower (open) or upper (closed) bound, a still base and arm mode.
        Translations and yaw are clipped into the target bounds.
    """
    if len(a4) != 5:
        raise DimensionError("Foreign actions have 5 fields (x, y, z, yaw, gripper)", (len(a4),))
    x, y, z, yaw = (float(v) for v in a4[:4])
    closed = _gripper_closed(a4[4])
    values = np.zeros(NUM_DIMENSIONS, dtype=np.float64)
    values[0:3] = (x, y, z)
    values[YAW_INDEX] = yaw
    values[:NUM_CONTINUOUS] = np.clip(values[:NUM_CONTINUOUS], spec.lower, spec.upper)
    values[GRIPPER_INDEX] = spec.upper[GRIPPER_INDEX] if closed else spec.lower[GRIPPER_INDEX]
    values[MODE_INDEX] = int(ActionMode.ARM)
    return ActionVector(values)


def relabel_instruction(episode, label: str = PICK_ANYTHING):
    """
    Replace an episode's instruction, leaving frames and actions untouched.

    Args:
        episode: Any object exposing ``with_instruction`` (an ``Episode``)
        label: New instruction text

    Returns:
        A new episode sharing the original frame and action buffers
    """
    return episode.with_instruction(normalize_text(label))

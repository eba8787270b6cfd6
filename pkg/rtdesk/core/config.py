"""
Configuration classes for rtdesk.

This module defines the enumerations and configuration objects that
control the model architecture, the real-time control loop, training and
command-line runs. Every configuration serialises to a plain dictionary
and JSON so that it can be embedded in checkpoints and run records.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
from enum import Enum, IntEnum
import json

from .errors import ConfigError


class Skill(Enum):
    """Enumeration of manipulation skills."""
    PICK = "pick"
    MOVE_NEAR = "move-near"
    PLACE_UPRIGHT = "place-upright"
    KNOCK_OVER = "knock-over"
    OPEN_DRAWER = "open-drawer"
    CLOSE_DRAWER = "close-drawer"
    PLACE_INTO = "place-into"
    PICK_FROM_PLACE_ON = "pick-from-place-on"


class SourceTag(Enum):
    """Enumeration of demonstration sources."""
    PRIMARY = "primary"
    SIM = "sim"
    FOREIGN = "foreign"


class Split(Enum):
    """Enumeration of instruction splits."""
    SEEN = "seen"
    UNSEEN = "unseen"


class RobustnessTier(Enum):
    """Enumeration of evaluation robustness tiers."""
    NONE = "none"
    DISTRACTOR_EASY = "distractor-easy"
    DISTRACTOR_MEDIUM = "distractor-medium"
    DISTRACTOR_HARD = "distractor-hard"
    BACKGROUND_EASY = "background-easy"
    BACKGROUND_MEDIUM = "background-medium"
    BACKGROUND_HARD = "background-hard"
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    BIN = "bin"


class DecodeMode(Enum):
    """Enumeration of action decoding rules."""
    GREEDY = "greedy"
    SAMPLE = "sample"


class ActionMode(IntEnum):
    """Categorical values of the mode action dimension."""
    ARM = 0
    BASE = 1
    TERMINATE = 2


class Precision(Enum):
    """Enumeration of floating point precisions for the numeric engine."""
    FLOAT32 = "float32"
    FLOAT64 = "float64"


class FilmInit(Enum):
    """Enumeration of FiLM producer initialisations."""
    IDENTITY = "identity"
    NAIVE = "naive"


def _coerce(enum_type, value, label: str):
    if isinstance(value, enum_type):
        return value
    try:
        return enum_type(value)
    except ValueError:
        raise ConfigError(f"Unsupported {label}: {value}")


class _Config:
    """Shared dictionary/JSON plumbing for configuration classes."""

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError

    def to_json(self) -> str:
        """
        Convert configuration to a JSON string.

        Returns:
            JSON string representation
        """
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]):
        return cls(**config_dict)

    @classmethod
    def from_json(cls, json_str: str):
        return cls.from_dict(json.loads(json_str))

    def update(self, **kwargs):
        """
        Update configuration with new values.

        Args:
            **kwargs: New configuration values

        Returns:
            Self for method chaining
        """
        for key, value in kwargs.items():
            if not hasattr(self, key):
                raise AttributeError(f"{type(self).__name__} has no attribute '{key}'")
            setattr(self, key, value)
        self.validate()
        return self

    def validate(self) -> None:
        pass

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.to_dict() == other.to_dict()


class BackboneConfig(_Config):
    """Configuration of the FiLM-conditioned convolutional image tokenizer."""

    def __init__(
        self,
        image_size: int = 96,
        d_token: int = 64,
        instruction_dim: int = 64,
        stem_channels: int = 16,
        block_channels: Sequence[int] = (16, 24, 24, 32, 48),
        block_strides: Sequence[int] = (1, 2, 1, 2, 1),
        expand_ratio: int = 4,
        film_init: Union[FilmInit, str] = FilmInit.IDENTITY,
        grid_size: int = 9,
    ):
        """
        Initialize backbone configuration.

        Args:
            image_size: Square input resolution in pixels
            d_token: Channels of the final feature map, i.e. token width
            instruction_dim: Length of the instruction embedding
            stem_channels: Output channels of the stride-2 stem convolution
            block_channels: Output channels of the inner MBConv blocks; a final
                block projecting to ``d_token`` is always appended
            block_strides: Stride of each inner block (1 or 2)
            expand_ratio: Channel expansion inside each MBConv block
            film_init: "identity" (zero FiLM producers) or "naive" (random)
            grid_size: Side of the final spatial map
        """
        self.image_size = int(image_size)
        self.d_token = int(d_token)
        self.instruction_dim = int(instruction_dim)
        self.stem_channels = int(stem_channels)
        self.block_channels = tuple(int(c) for c in block_channels)
        self.block_strides = tuple(int(s) for s in block_strides)
        self.expand_ratio = int(expand_ratio)
        self.film_init = _coerce(FilmInit, film_init, "FiLM initialisation")
        self.grid_size = int(grid_size)
        self.validate()

    def spatial_plan(self) -> Tuple[int, List[int], int]:
        """
        Spatial sizes through the network.

        Returns:
            Tuple of (size after the stem, sizes after each inner block,
            kernel of the final projection block)
        """
        size = (self.image_size + 2 - 3) // 2 + 1
        after_stem = size
        sizes = []
        for stride in self.block_strides:
            size = (size + 2 - 3) // stride + 1
            sizes.append(size)
        final_kernel = size - self.grid_size + 1 if size > self.grid_size else 3
        return after_stem, sizes, final_kernel

    def final_input_size(self) -> int:
        after_stem, sizes, _ = self.spatial_plan()
        return sizes[-1] if sizes else after_stem

    def validate(self) -> None:
        if len(self.block_channels) != len(self.block_strides):
            raise ConfigError("block_channels and block_strides must have equal length")
        if any(s not in (1, 2) for s in self.block_strides):
            raise ConfigError(f"Unsupported block strides: {self.block_strides}")
        last = self.final_input_size()
        if last < self.grid_size:
            raise ConfigError(
                f"image_size {self.image_size} reduces to {last} < grid {self.grid_size}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_size": self.image_size,
            "d_token": self.d_token,
            "instruction_dim": self.instruction_dim,
            "stem_channels": self.stem_channels,
            "block_channels": list(self.block_channels),
            "block_strides": list(self.block_strides),
            "expand_ratio": self.expand_ratio,
            "film_init": self.film_init.value,
            "grid_size": self.grid_size,
        }

    def __repr__(self) -> str:
        return f"BackboneConfig(image_size={self.image_size}, d_token={self.d_token}, blocks={len(self.block_channels) + 1})"


class PolicyConfig(_Config):
    """Configuration of the full tokenized-action policy."""

    PRESETS = {
        "default": {},
        "small": {
            "width": 32,
            "num_layers": 4,
            "backbone": {"stem_channels": 8, "block_channels": (8, 16, 16, 24, 32), "d_token": 32},
        },
    }

    def __init__(
        self,
        history_length: int = 6,
        tokens_per_frame: int = 8,
        num_layers: int = 8,
        width: int = 64,
        num_heads: int = 4,
        ffn_mult: int = 4,
        action_dims: int = 11,
        vocab: int = 256,
        use_transformer: bool = True,
        use_history: bool = True,
        continuous_head: bool = False,
        autoregressive_actions: bool = False,
        ar_decoder_layers: int = 2,
        backbone: Optional[Union[BackboneConfig, Dict[str, Any]]] = None,
    ):
        """
        Initialize policy configuration.

        Args:
            history_length: Frames in the history window
            tokens_per_frame: Tokens per frame after TokenLearner reduction
            num_layers: Self-attention layers
            width: Transformer model width
            num_heads: Attention heads
            ffn_mult: Feed-forward expansion
            action_dims: Action dimensions (fixed at 11 by the action space)
            vocab: Bins per action dimension
            use_transformer: False skips self-attention ("w/o Transformer")
            use_history: False encodes only the newest frame ("w/o history")
            continuous_head: Gaussian/MSE head instead of categorical tokens
            autoregressive_actions: Condition dimension d on tokens 0..d-1
            ar_decoder_layers: Residual MLP depth of the autoregressive decoder
            backbone: Image tokenizer configuration
        """
        self.history_length = int(history_length)
        self.tokens_per_frame = int(tokens_per_frame)
        self.num_layers = int(num_layers)
        self.width = int(width)
        self.num_heads = int(num_heads)
        self.ffn_mult = int(ffn_mult)
        self.action_dims = int(action_dims)
        self.vocab = int(vocab)
        self.use_transformer = bool(use_transformer)
        self.use_history = bool(use_history)
        self.continuous_head = bool(continuous_head)
        self.autoregressive_actions = bool(autoregressive_actions)
        self.ar_decoder_layers = int(ar_decoder_layers)
        if backbone is None:
            backbone = BackboneConfig()
        elif isinstance(backbone, dict):
            backbone = BackboneConfig.from_dict(backbone)
        self.backbone = backbone
        self.validate()

    @classmethod
    def preset(cls, name: str, **overrides) -> "PolicyConfig":
        """Build a named size preset ("default" or "small")."""
        if name not in cls.PRESETS:
            raise ConfigError(f"Unsupported model size: {name}")
        values = dict(cls.PRESETS[name])
        backbone = dict(values.pop("backbone", {}))
        backbone.update(overrides.pop("backbone", {}) or {})
        values.update(overrides)
        return cls(backbone=BackboneConfig(**backbone), **values)

    @property
    def frames_in_window(self) -> int:
        return self.history_length if self.use_history else 1

    @property
    def sequence_length(self) -> int:
        return self.frames_in_window * self.tokens_per_frame

    def validate(self) -> None:
        if self.width % self.num_heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.num_heads}")
        if self.continuous_head and self.autoregressive_actions:
            raise ConfigError("continuous_head and autoregressive_actions are exclusive")
        if self.history_length < 1 or self.tokens_per_frame < 1:
            raise ConfigError("history_length and tokens_per_frame must be positive")
        if self.vocab < 3:
            raise ConfigError("vocab must hold the three mode values")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "history_length": self.history_length,
            "tokens_per_frame": self.tokens_per_frame,
            "num_layers": self.num_layers,
            "width": self.width,
            "num_heads": self.num_heads,
            "ffn_mult": self.ffn_mult,
            "action_dims": self.action_dims,
            "vocab": self.vocab,
            "use_transformer": self.use_transformer,
            "use_history": self.use_history,
            "continuous_head": self.continuous_head,
            "autoregressive_actions": self.autoregressive_actions,
            "ar_decoder_layers": self.ar_decoder_layers,
            "backbone": self.backbone.to_dict(),
        }

    def __repr__(self) -> str:
        flags = [
            name for name, on in (
                ("no-transformer", not self.use_transformer),
                ("no-history", not self.use_history),
                ("continuous", self.continuous_head),
                ("autoregressive", self.autoregressive_actions),
            ) if on
        ]
        return f"PolicyConfig(width={self.width}, layers={self.num_layers}, flags={flags})"


class LoopConfig(_Config):
    """Timing configuration of the closed control loop."""

    def __init__(
        self,
        control_period_ms: float = 333.0,
        fixed_wait_ms: float = 280.0,
        model_budget_ms: float = 100.0,
        step_limit: int = 60,
        decode_mode: Union[DecodeMode, str] = DecodeMode.GREEDY,
    ):
        """
        Initialize loop configuration.

        Args:
            control_period_ms: Time between frame captures (3 Hz by default)
            fixed_wait_ms: Delay from frame capture to action emission
            model_budget_ms: Inference time above which a violation is recorded
            step_limit: Maximum steps per episode
            decode_mode: "greedy" or "sample"
        """
        self.control_period_ms = float(control_period_ms)
        self.fixed_wait_ms = float(fixed_wait_ms)
        self.model_budget_ms = float(model_budget_ms)
        self.step_limit = int(step_limit)
        self.decode_mode = _coerce(DecodeMode, decode_mode, "decode mode")
        self.validate()

    def validate(self) -> None:
        if self.model_budget_ms <= 0:
            raise ConfigError("model_budget_ms must be positive")
        if self.fixed_wait_ms > self.control_period_ms:
            raise ConfigError(
                f"fixed wait {self.fixed_wait_ms} ms exceeds control period {self.control_period_ms} ms"
            )
        if self.step_limit < 1:
            raise ConfigError("step_limit must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "control_period_ms": self.control_period_ms,
            "fixed_wait_ms": self.fixed_wait_ms,
            "model_budget_ms": self.model_budget_ms,
            "step_limit": self.step_limit,
            "decode_mode": self.decode_mode.value,
        }

    def __repr__(self) -> str:
        return f"LoopConfig(period={self.control_period_ms}ms, wait={self.fixed_wait_ms}ms)"


class TrainConfig(_Config):
    """Behavioral-cloning schedule."""

    def __init__(
        self,
        steps: int = 10000,
        batch: int = 8,
        lr: float = 1e-3,
        min_lr_fraction: float = 0.0,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
        seed: int = 0,
        window_stride: int = 1,
        log_every: int = 50,
        checkpoint_every: int = 1000,
    ):
        """
        Initialize training configuration.

        Args:
            steps: Optimizer steps
            batch: History windows per step
            lr: Peak learning rate, cosine-decayed to ``lr * min_lr_fraction``
            min_lr_fraction: Floor of the cosine schedule
            betas: Adam moment decay rates
            eps: Adam epsilon
            seed: Training seed (batch order, dropout-free init)
            window_stride: Step between consecutive windows of an episode
            log_every: Steps between loss log lines and curve points
            checkpoint_every: Steps between periodic checkpoints (0 disables)
        """
        self.steps = int(steps)
        self.batch = int(batch)
        self.lr = float(lr)
        self.min_lr_fraction = float(min_lr_fraction)
        self.betas = tuple(float(b) for b in betas)
        self.eps = float(eps)
        self.seed = int(seed)
        self.window_stride = int(window_stride)
        self.log_every = int(log_every)
        self.checkpoint_every = int(checkpoint_every)
        self.validate()

    def validate(self) -> None:
        if self.batch < 1:
            raise ConfigError("batch must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.window_stride < 1 or self.log_every < 1:
            raise ConfigError("window_stride and log_every must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "batch": self.batch,
            "lr": self.lr,
            "min_lr_fraction": self.min_lr_fraction,
            "betas": list(self.betas),
            "eps": self.eps,
            "seed": self.seed,
            "window_stride": self.window_stride,
            "log_every": self.log_every,
            "checkpoint_every": self.checkpoint_every,
        }

    def __repr__(self) -> str:
        return f"TrainConfig(steps={self.steps}, batch={self.batch}, lr={self.lr})"


class RunConfig(_Config):
    """
    Settings of one command-line run.

    Values come from an optional JSON config file and are overridden by
    explicitly given command-line flags.
    """

    def __init__(
        self,
        subcommand: str,
        dataset: Optional[str] = None,
        checkpoint: Optional[str] = None,
        seed: int = 0,
        suite: str = "seen",
        ablation_flags: Optional[Dict[str, Any]] = None,
        mixing_weights: Optional[List[float]] = None,
        out: str = "runs/latest",
        jobs: int = 1,
        verbose: bool = False,
        options: Optional[Dict[str, Any]] = None,
    ):
        self.subcommand = subcommand
        self.dataset = dataset
        self.checkpoint = checkpoint
        self.seed = int(seed)
        self.suite = suite
        self.ablation_flags = dict(ablation_flags or {})
        self.mixing_weights = list(mixing_weights or [])
        self.out = out
        self.jobs = int(jobs)
        self.verbose = bool(verbose)
        self.options = dict(options or {})
        self.validate()

    def validate(self) -> None:
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if any(w <= 0 for w in self.mixing_weights):
            raise ConfigError(f"mixing weights must be positive: {self.mixing_weights}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "seed": self.seed,
            "suite": self.suite,
            "ablation_flags": self.ablation_flags,
            "mixing_weights": self.mixing_weights,
            "out": self.out,
            "jobs": self.jobs,
            "verbose": self.verbose,
            "options": self.options,
        }

    def __repr__(self) -> str:
        return f"RunConfig(subcommand='{self.subcommand}', seed={self.seed}, out='{self.out}')"

"""
rtdesk: a desk-scale transformer robot policy.

A language-conditioned visuomotor policy (FiLM image tokenizer, TokenLearner
reduction, causal Transformer over a frame history, 256-bin action tokens)
together with the pieces needed to train and evaluate it on a synthetic
tabletop benchmark: a scripted expert, dataset mixing and ablation, a fixed-rate
inference runtime with a token cache, and robustness suites.
"""

__version__ = "0.1.0"

# Import core components
from .core.config import (
    ActionMode,
    BackboneConfig,
    DecodeMode,
    LoopConfig,
    PolicyConfig,
    RobustnessTier,
    RunConfig,
    Skill,
    SourceTag,
    Split,
    TrainConfig,
)
from .core.action_codec import ActionSpaceSpec, ActionVector, TokenizedAction, detokenize, tokenize
from .core.data import DemoDataset, Episode, cap_per_task, load_dataset, mix, narrow_tasks, save_dataset
from .core.checkpoint import PolicyCheckpoint, load_checkpoint, save_checkpoint
from .core.trainer import TrainResult, token_accuracy, train

# Import models
from .models.policy_transformer import PolicyModel, select_action

# Import runtime and benchmark
from .runtime.inference import TokenCache, bench_inference, infer_step, run_episode
from .sim.evaluation import EvalReport, evaluate, make_suite

__all__ = [
    # Version
    "__version__",

    # Configuration
    "ActionMode",
    "BackboneConfig",
    "DecodeMode",
    "LoopConfig",
    "PolicyConfig",
    "RobustnessTier",
    "RunConfig",
    "Skill",
    "SourceTag",
    "Split",
    "TrainConfig",

    # Actions
    "ActionSpaceSpec",
    "ActionVector",
    "TokenizedAction",
    "tokenize",
    "detokenize",

    # Data and training
    "DemoDataset",
    "Episode",
    "cap_per_task",
    "narrow_tasks",
    "mix",
    "load_dataset",
    "save_dataset",
    "PolicyCheckpoint",
    "load_checkpoint",
    "save_checkpoint",
    "TrainResult",
    "train",
    "token_accuracy",

    # Policy and runtime
    "PolicyModel",
    "select_action",
    "TokenCache",
    "infer_step",
    "run_episode",
    "bench_inference",

    # Evaluation
    "EvalReport",
    "evaluate",
    "make_suite",
]

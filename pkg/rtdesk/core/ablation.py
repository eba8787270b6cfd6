"""
Data and model ablation matrices.

Each ``AblationJob`` describes one training run relative to a baseline:
data jobs slice the dataset (per-task caps, task narrowing) and model jobs
change the policy configuration. ``run_matrix`` trains every job with the
same budget and collects suite success rates into one table.
"""
import logging
import os
import tempfile
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import LoopConfig, PolicyConfig, TrainConfig
from .data import DemoDataset, cap_per_task, mix, narrow_tasks
from .errors import ConfigError
from .trainer import train
from .utils import SeedStream, atomic_write_bytes

logger = logging.getLogger(__name__)

PRETRAIN_FRAMES = 256


class AblationJob:
    """
    One cell of an ablation matrix.

    Args:
        name: Row label, e.g. "cap 100" or "w/o history"
        kind: "baseline", "data" or "model"
        cap: Per-task episode cap applied to the dataset
        keep_fraction_tasks: Fraction of tasks kept by ``narrow_tasks``
        policy_overrides: PolicyConfig fields to change
        backbone_overrides: BackboneConfig fields to change
        shrink: Halve the transformer width and depth
        pretrain: Warm-start the backbone before training
    """

    def __init__(
        self,
        name: str,
        kind: str = "model",
        cap: Optional[int] = None,
        keep_fraction_tasks: Optional[float] = None,
        policy_overrides: Optional[Dict[str, Any]] = None,
        backbone_overrides: Optional[Dict[str, Any]] = None,
        shrink: bool = False,
        pretrain: bool = True,
    ):
        if kind not in ("baseline", "data", "model"):
            raise ConfigError(f"Unsupported ablation kind: {kind}")
        self.name = name
        self.kind = kind
        self.cap = cap
        self.keep_fraction_tasks = keep_fraction_tasks
        self.policy_overrides = dict(policy_overrides or {})
        self.backbone_overrides = dict(backbone_overrides or {})
        self.shrink = shrink
        self.pretrain = pretrain

    @property
    def slug(self) -> str:
        return "".join(c if c.isalnum() else "-" for c in self.name.lower()).strip("-")

    def build_dataset(self, dataset: DemoDataset, seed: int = 0) -> DemoDataset:
        if self.cap is not None:
            dataset = cap_per_task(dataset, self.cap, seed)
        if self.keep_fraction_tasks is not None:
            dataset = narrow_tasks(dataset, self.keep_fraction_tasks)
        return dataset

    def policy_config(self, base: Optional[PolicyConfig] = None) -> PolicyConfig:
        values = (base or PolicyConfig()).to_dict()
        if self.shrink:
            heads = values["num_heads"]
            values["width"] = max(heads, (values["width"] // 2) // heads * heads)
            values["num_layers"] = max(1, values["num_layers"] // 2)
        values.update(self.policy_overrides)
        values["backbone"] = dict(values["backbone"], **self.backbone_overrides)
        return PolicyConfig.from_dict(values)

    def describe(self) -> Dict[str, Any]:
        return {
            "job": self.name,
            "kind": self.kind,
            "cap": self.cap,
            "keep_fraction_tasks": self.keep_fraction_tasks,
            "policy_overrides": self.policy_overrides,
            "backbone_overrides": self.backbone_overrides,
            "shrink": self.shrink,
            "pretrain": self.pretrain,
        }

    def __repr__(self) -> str:
        return f"AblationJob('{self.name}', kind='{self.kind}')"


BASELINE = AblationJob("default", kind="baseline")

DATA_ABLATIONS: List[AblationJob] = [
    AblationJob("cap 200", kind="data", cap=200),
    AblationJob("cap 100", kind="data", cap=100),
    AblationJob("cap 50", kind="data", cap=50),
    AblationJob("narrow 0.75", kind="data", keep_fraction_tasks=0.75),
]

MODEL_ABLATIONS: List[AblationJob] = [
    AblationJob("w/o big model", shrink=True),
    AblationJob("w/o pre-training", pretrain=False),
    AblationJob("w/ naive FiLM", backbone_overrides={"film_init": "naive"}),
    AblationJob("w/ continuous actions", policy_overrides={"continuous_head": True}),
    AblationJob("w/ auto-regressive actions", policy_overrides={"autoregressive_actions": True}),
    AblationJob("w/o history", policy_overrides={"use_history": False}),
    AblationJob("w/o Transformer", policy_overrides={"use_transformer": False}),
]


def ablation_matrix(kind: str = "all") -> List[AblationJob]:
    """The baseline followed by the data jobs, the model jobs, or both."""
    if kind == "data":
        return [BASELINE] + DATA_ABLATIONS
    if kind == "model":
        return [BASELINE] + MODEL_ABLATIONS
    if kind == "all":
        return [BASELINE] + DATA_ABLATIONS + MODEL_ABLATIONS
    raise ConfigError(f"Unsupported ablation matrix: {kind}")


def _pretrain_frames(dataset: DemoDataset, seed: int) -> np.ndarray:
    frames = np.concatenate([episode.frames for episode in dataset])
    rng = SeedStream(seed).rng("pretrain-frames")
    chosen = rng.choice(len(frames), size=min(PRETRAIN_FRAMES, len(frames)), replace=False)
    return frames[np.sort(chosen)].astype(np.float32) / 255.0


def run_ablation(
    job: AblationJob,
    dataset: DemoDataset,
    train_config: TrainConfig,
    suites: Sequence[str] = ("seen", "unseen"),
    base_config: Optional[PolicyConfig] = None,
    seed: int = 0,
    out_dir: Optional[str] = None,
    pretrain_steps: int = 200,
    trials: int = 100,
    loop: Optional[LoopConfig] = None,
    jobs: int = 1,
    bench_steps: int = 0,
    progress: bool = False,
) -> Dict[str, Any]:
    """
    Train and evaluate one job.

    Returns:
        A table row: job name, kind, dataset size, final loss, one success
        rate per suite and, when ``bench_steps`` > 0, the median latency
        of cached inference
    """
    from ..models.film_backbone import pretrain_backbone
    from ..models.policy_transformer import PolicyModel
    from ..runtime.inference import bench_inference
    from ..sim.evaluation import evaluate, make_suite

    job_dir = os.path.join(out_dir, job.slug) if out_dir else None
    data = job.build_dataset(dataset, seed)
    config = job.policy_config(base_config)
    logger.info("Ablation %s: %d episodes over %d tasks", job.name, len(data), len(data.tasks))

    warm_start = None
    if job.pretrain and pretrain_steps > 0:
        directory = job_dir or tempfile.mkdtemp(prefix="rtdesk-pretrain-")
        os.makedirs(directory, exist_ok=True)
        warm_start = os.path.join(directory, "backbone.npz")
        pretrain_backbone(_pretrain_frames(data, seed), config.backbone, pretrain_steps, seed, warm_start,
                          progress=progress)

    model = PolicyModel(config, seed=seed, spec=data.spec, warm_start=warm_start)
    result = train(mix([(data, 1.0)], seed), model, train_config, out_dir=job_dir, progress=progress,
                   metadata={"ablation": job.describe()})
    row: Dict[str, Any] = {
        "job": job.name,
        "kind": job.kind,
        "episodes": len(data),
        "data_fraction": len(data) / len(dataset),
        "tasks": len(data.tasks),
        "task_fraction": len(data.tasks) / len(dataset.tasks),
        "final_loss": float(result.loss_curve["loss"].iloc[-1]) if len(result.loss_curve) else float("nan"),
    }
    for name in suites:
        suite = make_suite(name, trials=trials, seed=seed, image_size=config.backbone.image_size)
        report = evaluate(model, suite, loop, jobs=jobs, progress=progress)
        if job_dir:
            report.save(job_dir)
        row[name] = report.success_rate
    if bench_steps > 0:
        bench = bench_inference(model, n_steps=bench_steps, variants=("reduction+cache",), seed=seed)
        row["inference_median_ms"] = float(bench["median_ms"].iloc[0])
    return row


def run_matrix(
    jobs: Sequence[AblationJob],
    dataset: DemoDataset,
    train_config: TrainConfig,
    out_dir: Optional[str] = None,
    **kwargs,
) -> pd.DataFrame:
    """Run every job with the same budget; writes ``ablation.csv`` under ``out_dir``."""
    rows = [run_ablation(job, dataset, train_config, out_dir=out_dir, **kwargs) for job in jobs]
    table = pd.DataFrame(rows)
    if out_dir:
        atomic_write_bytes(os.path.join(out_dir, "ablation.csv"), table.to_csv(index=False).encode("utf-8"))
    return table


def dry_run(jobs: Sequence[AblationJob]) -> pd.DataFrame:
    """The job matrix as a table, without training anything."""
    return pd.DataFrame([job.describe() for job in jobs])

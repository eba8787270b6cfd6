"""
Command-line entry point.

Every subcommand reads an optional JSON config file, applies the flags that
were given on the command line on top of it, validates the referenced
files, then runs. Artifacts go under ``--out`` together with a ``run.json``
provenance record.

Exit codes: 0 success, 2 validation failure, 3 runtime fault.
"""
import argparse
import json
import logging
import os
import shutil
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import __version__
from .core.checkpoint import load_checkpoint, read_header
from .core.config import DecodeMode, LoopConfig, PolicyConfig, RunConfig, SourceTag, TrainConfig
from .core.data import (
    DemoDataset,
    EpisodeValidator,
    ingest_foreign,
    load_dataset,
    mix,
    save_dataset,
)
from .core.errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    DatasetFormatError,
)
from .core.utils import SeedStream, atomic_write_bytes, atomic_write_json, root_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAULT = 3

SOURCES = ("primary", "sim", "foreign")

# ---------------------------------------------------------------------------
# Flag registry
# ---------------------------------------------------------------------------

# name -> (argparse keyword arguments, default). argparse defaults stay None:
# only flags given on the command line override the config file.
FLAG_REGISTRY: Dict[str, Tuple[Dict[str, Any], Any]] = {
    "config": ({"help": "JSON file with option values; explicit flags win"}, None),
    "seed": ({"type": int, "help": "Root seed (default: $RTX_SEED or 0)"}, None),
    "out": ({"help": "Output directory for all artifacts"}, "runs/latest"),
    "verbose": ({"action": "store_true", "help": "Log at DEBUG level"}, False),
    "quiet": ({"action": "store_true", "help": "Hide progress bars"}, False),
    # collect
    "source": ({"choices": SOURCES, "help": "Demonstration source to collect"}, "primary"),
    "split": ({"choices": ("seen", "unseen", "all"), "help": "Instruction split to collect from"}, "seen"),
    "episodes_per_task": ({"type": int, "help": "Episodes per instruction (per run for the foreign source)"}, 50),
    "tasks": ({"nargs": "+", "help": "Instructions to collect, or 'all' for the whole split"}, ["all"]),
    "image_size": ({"type": int, "help": "Rendered frame size in pixels"}, 96),
    # train / ablate
    "dataset": ({"help": "Dataset directory written by 'collect'"}, None),
    "mixture": ({"help": "mixture.json written by 'mix'; replaces --dataset"}, None),
    "steps": ({"type": int, "help": "Optimizer steps (bench: timed inference steps)"}, None),
    "batch": ({"type": int, "help": "History windows per optimizer step"}, 8),
    "lr": ({"type": float, "help": "Peak learning rate of the cosine schedule"}, 1e-3),
    "log_every": ({"type": int, "help": "Steps between loss log lines"}, 50),
    "checkpoint_every": ({"type": int, "help": "Steps between periodic checkpoints, 0 disables"}, 1000),
    "pretrain_steps": ({"type": int, "help": "Backbone warm-start steps before training, 0 skips"}, 200),
    "model_size": ({"choices": tuple(PolicyConfig.PRESETS), "help": "Model size preset"}, "default"),
    "no_history": ({"action": "store_true", "help": "Condition on the newest frame only"}, False),
    "no_transformer": ({"action": "store_true", "help": "Skip the self-attention layers"}, False),
    "continuous_actions": ({"action": "store_true", "help": "Gaussian action head instead of tokens"}, False),
    "autoregressive_actions": ({"action": "store_true", "help": "Decode action dimensions one by one"}, False),
    "naive_film": ({"action": "store_true", "help": "Random instead of identity FiLM initialisation"}, False),
    # eval / bench / inspect
    "checkpoint": ({"help": "Checkpoint file (.rtdk)"}, None),
    "suite": ({"nargs": "+", "help": "Suite names to run"}, ["seen"]),
    "controller": ({"choices": ("model", "expert", "random"), "help": "Who acts in the episodes"}, "model"),
    "trials": ({"type": int, "help": "Trials per suite"}, 100),
    "jobs": ({"type": int, "help": "Trials run concurrently"}, 1),
    "chain_plan": ({"help": "Run a chain plan (fixture name or JSON file) instead of suites"}, None),
    "chains": ({"type": int, "help": "Chains executed for --chain-plan"}, 200),
    "decode_mode": ({"choices": tuple(m.value for m in DecodeMode), "help": "Action decoding"}, "greedy"),
    "step_limit": ({"type": int, "help": "Maximum steps per episode"}, 60),
    "matrix": ({"choices": ("all", "data", "model"), "help": "Which ablation jobs to run"}, "all"),
    "dry_run": ({"action": "store_true", "help": "List the ablation jobs without running them"}, False),
    "bench_steps": ({"type": int, "help": "Timed inference steps per ablation job, 0 skips"}, 0),
    # mix
    "sources": ({"nargs": "+", "metavar": "DIR:WEIGHT", "help": "Datasets and their mixing weights"}, None),
    "draws": ({"type": int, "help": "Draws used to report sampled source fractions"}, 30000),
}

COMMON_FLAGS = ("config", "seed", "out", "verbose", "quiet")
MODEL_FLAGS = ("model_size", "no_history", "no_transformer", "continuous_actions", "autoregressive_actions",
               "naive_film")

SUBCOMMAND_FLAGS: Dict[str, Tuple[str, ...]] = {
    "collect": ("source", "split", "episodes_per_task", "tasks", "image_size"),
    "train": ("dataset", "mixture", "steps", "batch", "lr", "log_every", "checkpoint_every", "pretrain_steps")
    + MODEL_FLAGS,
    "eval": ("checkpoint", "suite", "controller", "trials", "jobs", "chain_plan", "chains", "decode_mode",
             "step_limit", "image_size"),
    "bench": ("checkpoint", "steps", "image_size") + MODEL_FLAGS,
    "ablate": ("dataset", "matrix", "dry_run", "steps", "batch", "lr", "suite", "trials", "jobs",
               "pretrain_steps", "bench_steps", "model_size"),
    "mix": ("sources", "draws"),
    "inspect-checkpoint": ("checkpoint",),
}

SUBCOMMAND_HELP = {
    "collect": "Collect scripted demonstrations into a dataset directory",
    "train": "Train a policy by behavioral cloning",
    "eval": "Evaluate a controller on benchmark suites or a chain plan",
    "bench": "Time the four inference variants",
    "ablate": "Run the data and model ablation matrix",
    "mix": "Write a mixture of datasets with sampling weights",
    "inspect-checkpoint": "Print a checkpoint header",
}

STEP_DEFAULTS = {"train": 10000, "ablate": 10000, "bench": 500}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    """Parser whose help text is generated from ``FLAG_REGISTRY``."""
    parser = argparse.ArgumentParser(prog="rtdesk", description="Desk-scale transformer robot policy toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, names in SUBCOMMAND_FLAGS.items():
        cmd = sub.add_parser(command, help=SUBCOMMAND_HELP[command], description=SUBCOMMAND_HELP[command])
        for name in COMMON_FLAGS + names:
            kwargs, default = FLAG_REGISTRY[name]
            kwargs = dict(kwargs)
            if name == "steps":
                default = STEP_DEFAULTS.get(command)
            if default not in (None, False):
                kwargs["help"] = f"{kwargs['help']} (default: {default})"
            cmd.add_argument(_flag(name), dest=name, default=None, **kwargs)
    return parser


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge registry defaults, the JSON config file and explicit flags.

    Raises:
        FileNotFoundError: the config file does not exist
        ConfigError: the config file is not a JSON object or names unknown options
    """
    command = args.command
    names = COMMON_FLAGS + SUBCOMMAND_FLAGS[command]
    options: Dict[str, Any] = {name: FLAG_REGISTRY[name][1] for name in names}
    if "steps" in options:
        options["steps"] = STEP_DEFAULTS.get(command)
    options["seed"] = root_seed()
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"Config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"Config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {args.config} must hold a JSON object")
        unknown = sorted(set(k.replace("-", "_") for k in loaded) - set(names))
        if unknown:
            raise ConfigError(f"Unknown options for '{command}': {unknown}")
        options.update({k.replace("-", "_"): v for k, v in loaded.items()})
    options.update({name: getattr(args, name) for name in names if getattr(args, name, None) is not None})
    options.pop("config", None)

    flags = {name: options.pop(name) for name in MODEL_FLAGS if name in options}
    suite = options.pop("suite", ["seen"])
    return RunConfig(
        subcommand=command,
        dataset=options.pop("dataset", None),
        checkpoint=options.pop("checkpoint", None),
        seed=options.pop("seed"),
        suite=",".join(suite) if isinstance(suite, (list, tuple)) else str(suite),
        ablation_flags=flags,
        mixing_weights=None,
        out=options.pop("out"),
        jobs=options.pop("jobs", 1),
        verbose=options.pop("verbose"),
        options=options,
    )


def _suites(run: RunConfig) -> List[str]:
    return [s for s in run.suite.split(",") if s]


def _require_file(path: Optional[str], label: str) -> str:
    if not path:
        raise ConfigError(f"{label} is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{label} not found: {path}")
    return path


def _check_dataset_dir(path: Optional[str]) -> int:
    """Validate a dataset manifest and return the frame size it records."""
    _require_file(path, "--dataset")
    manifest = os.path.join(path, "manifest.json")
    _require_file(manifest, "Dataset manifest")
    with open(manifest, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{manifest} is not valid JSON: {exc}") from exc
    ok, error = EpisodeValidator.validate_manifest(payload)
    if not ok:
        raise DatasetFormatError(f"{manifest}: {error}")
    return int(payload.get("image_size") or 96)


def _parse_sources(entries: Sequence[str]) -> List[Tuple[str, float]]:
    sources = []
    for entry in entries:
        path, sep, weight = entry.rpartition(":")
        if not sep:
            raise ConfigError(f"Mixture source '{entry}' must look like DIR:WEIGHT")
        try:
            value = float(weight)
        except ValueError as exc:
            raise ConfigError(f"Mixture weight in '{entry}' is not a number") from exc
        sources.append((path, value))
    return sources


def _read_mixture(path: str) -> List[Tuple[str, float]]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Mixture file {path} is not valid JSON: {exc}") from exc
    try:
        sources = [(s["dataset"], float(s["weight"])) for s in payload["sources"]]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"Mixture file {path} needs a 'sources' list of {{dataset, weight}}") from exc
    if not sources:
        raise ConfigError(f"Mixture file {path} lists no sources")
    return sources


def validate_run(run: RunConfig) -> None:
    """
    Check every referenced file and option before any long-running work.

    Raises:
        ConfigError, FileNotFoundError, DatasetFormatError, CheckpointFormatError
    """
    from .sim.evaluation import SUITES, load_plan
    from .sim.tasks import parse_instruction

    opts = run.options
    command = run.subcommand
    for name in ("steps", "batch", "trials", "episodes_per_task", "image_size", "chains", "draws"):
        value = opts.get(name)
        if value is not None and value < 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be non-negative, got {value}")
    if command == "collect":
        if opts["tasks"] != ["all"]:
            for text in opts["tasks"]:
                parse_instruction(text)
    elif command in ("train", "ablate"):
        if command == "train" and opts.get("mixture"):
            sources = _read_mixture(_require_file(opts["mixture"], "--mixture"))
            sizes = [_check_dataset_dir(path) for path, _ in sources]
            run.mixing_weights = [w for _, w in sources]
            run.validate()
            image_size = sizes[0]
        else:
            image_size = _check_dataset_dir(run.dataset)
        if not opts.get("dry_run"):
            _model_config(run, image_size)
    elif command == "eval":
        if opts["controller"] == "model":
            read_header(_require_file(run.checkpoint, "--checkpoint"))
        if opts.get("chain_plan"):
            load_plan(opts["chain_plan"])
        for name in _suites(run):
            if name not in SUITES:
                raise ConfigError(f"Unknown suite '{name}'. Choose from {sorted(SUITES)}")
        LoopConfig(step_limit=opts["step_limit"], decode_mode=opts["decode_mode"])
    elif command == "bench":
        if run.checkpoint:
            read_header(_require_file(run.checkpoint, "--checkpoint"))
        else:
            _model_config(run, opts["image_size"])
    elif command == "mix":
        if not opts.get("sources"):
            raise ConfigError("--sources is required")
        sources = _parse_sources(opts["sources"])
        for path, _ in sources:
            _check_dataset_dir(path)
        run.mixing_weights = [w for _, w in sources]
        run.validate()
    elif command == "inspect-checkpoint":
        read_header(_require_file(run.checkpoint, "--checkpoint"))
    os.makedirs(run.out, exist_ok=True)


def _model_config(run: RunConfig, image_size: int) -> PolicyConfig:
    flags = run.ablation_flags
    backbone: Dict[str, Any] = {"image_size": image_size}
    if flags.get("naive_film"):
        backbone["film_init"] = "naive"
    return PolicyConfig.preset(
        flags.get("model_size") or "default",
        backbone=backbone,
        use_history=not flags.get("no_history"),
        use_transformer=not flags.get("no_transformer"),
        continuous_head=bool(flags.get("continuous_actions")),
        autoregressive_actions=bool(flags.get("autoregressive_actions")),
    )


def _write_run_record(run: RunConfig) -> None:
    atomic_write_json(os.path.join(run.out, "run.json"), {"rtdesk_version": __version__, "run": run.to_dict()})


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _collect_tasks(run: RunConfig):
    from .sim.tasks import all_tasks, default_split, parse_instruction, sim_tasks_for

    opts = run.options
    if opts["tasks"] != ["all"]:
        return [parse_instruction(t) for t in opts["tasks"]]
    if opts["source"] == "sim":
        return sim_tasks_for(True)
    seen, unseen = default_split()
    if opts["split"] == "seen":
        return list(seen)
    if opts["split"] == "unseen":
        return list(unseen)
    return all_tasks(SourceTag.PRIMARY)


def cmd_collect(run: RunConfig) -> None:
    """Collect demonstrations into ``<out>/dataset``; a failed run leaves no partial directory."""
    from .core.action_codec import ActionSpaceSpec
    from .sim.expert import collect_episode, foreign_bin_episode

    opts = run.options
    progress = not opts["quiet"]
    stream = SeedStream(run.seed).child("collect")
    target = os.path.join(run.out, "dataset")
    partial = target + ".partial"
    if os.path.exists(partial):
        shutil.rmtree(partial)
    try:
        if opts["source"] == "foreign":
            raw = [
                foreign_bin_episode(stream.integer(f"foreign-{k}"), opts["image_size"])
                for k in tqdm(range(opts["episodes_per_task"]), desc="collect", disable=not progress)
            ]
            dataset = ingest_foreign(raw, ActionSpaceSpec())
        else:
            tasks = _collect_tasks(run)
            jobs = [(task, k) for task in tasks for k in range(opts["episodes_per_task"])]
            episodes = [
                collect_episode(task, stream.integer(f"{task.instruction}-{k}"), opts["image_size"])
                for task, k in tqdm(jobs, desc="collect", disable=not progress)
            ]
            dataset = DemoDataset(episodes)
        save_dataset(dataset, partial)
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    if os.path.exists(target):
        shutil.rmtree(target)
    os.replace(partial, target)
    print(dataset.summary_frame().to_string(index=False))


def _train_sources(run: RunConfig) -> List[Tuple[DemoDataset, float]]:
    if run.options.get("mixture"):
        return [(load_dataset(path), weight) for path, weight in _read_mixture(run.options["mixture"])]
    return [(load_dataset(run.dataset), 1.0)]


def cmd_train(run: RunConfig) -> None:
    from .core.trainer import train
    from .models.film_backbone import pretrain_backbone
    from .models.policy_transformer import PolicyModel

    opts = run.options
    progress = not opts["quiet"]
    sources = _train_sources(run)
    first = sources[0][0]
    config = _model_config(run, int(first[0].frames.shape[-1]))
    warm_start = None
    if opts["pretrain_steps"] > 0:
        frames = np.concatenate([e.float_frames() for dataset, _ in sources for e in dataset.episodes[:64]])
        warm_start = os.path.join(run.out, "backbone.npz")
        pretrain_backbone(frames, config.backbone, opts["pretrain_steps"], run.seed, warm_start, progress=progress)
    model = PolicyModel(config, seed=run.seed, spec=first.spec, warm_start=warm_start)
    train_config = TrainConfig(
        steps=opts["steps"], batch=opts["batch"], lr=opts["lr"], seed=run.seed,
        log_every=opts["log_every"], checkpoint_every=opts["checkpoint_every"],
    )
    stream = mix(sources, SeedStream(run.seed).integer("mix"))
    result = train(stream, model, train_config, out_dir=run.out, progress=progress,
                   metadata={"sources": [d.manifest()["sources"] for d, _ in sources]})
    print(result)


def _eval_controller(run: RunConfig):
    kind = run.options["controller"]
    if kind == "model":
        model = load_checkpoint(run.checkpoint).model
        return model, model.config.backbone.image_size
    return kind, run.options["image_size"]


def cmd_eval(run: RunConfig) -> None:
    from .sim.evaluation import chain_statistics, combine_reports, evaluate, load_plan, make_suite

    opts = run.options
    loop = LoopConfig(step_limit=opts["step_limit"], decode_mode=opts["decode_mode"])
    controller, image_size = _eval_controller(run)
    if opts.get("chain_plan"):
        plan = load_plan(opts["chain_plan"])
        stats = chain_statistics(controller, plan, chains=opts["chains"], seed=run.seed, loop=loop,
                                 image_size=image_size)
        stats["plan"] = [t.instruction for t in plan]
        atomic_write_json(os.path.join(run.out, "chain.json"), stats)
        print(json.dumps(stats, indent=2))
        return
    reports = []
    for name in _suites(run):
        suite = make_suite(name, trials=opts["trials"], seed=run.seed, image_size=image_size)
        report = evaluate(controller, suite, loop, jobs=run.jobs, progress=not opts["quiet"])
        report.save(run.out)
        reports.append(report)
    table = combine_reports(reports)
    atomic_write_bytes(os.path.join(run.out, "eval_summary.csv"), table.to_csv(index=False).encode("utf-8"))
    print(table.to_string(index=False))


def cmd_bench(run: RunConfig) -> None:
    from .models.policy_transformer import PolicyModel
    from .runtime.inference import bench_inference

    opts = run.options
    if run.checkpoint:
        model = load_checkpoint(run.checkpoint).model
    else:
        model = PolicyModel(_model_config(run, opts["image_size"]), seed=run.seed)
    table = bench_inference(model, n_steps=opts["steps"], seed=run.seed)
    atomic_write_bytes(os.path.join(run.out, "bench.csv"), table.to_csv(index=False).encode("utf-8"))
    print(table.to_string(index=False))


def cmd_ablate(run: RunConfig) -> None:
    from .core.ablation import ablation_matrix, dry_run, run_matrix

    opts = run.options
    jobs = ablation_matrix(opts["matrix"])
    if opts["dry_run"]:
        table = dry_run(jobs)
        atomic_write_bytes(os.path.join(run.out, "ablation_jobs.csv"), table.to_csv(index=False).encode("utf-8"))
        print(table[["job", "kind"]].to_string(index=False))
        return
    dataset = load_dataset(run.dataset)
    base = _model_config(run, int(dataset[0].frames.shape[-1]))
    train_config = TrainConfig(steps=opts["steps"], batch=opts["batch"], lr=opts["lr"], seed=run.seed)
    table = run_matrix(
        jobs, dataset, train_config, out_dir=run.out, suites=_suites(run), base_config=base, seed=run.seed,
        pretrain_steps=opts["pretrain_steps"], trials=opts["trials"], jobs=run.jobs,
        bench_steps=opts["bench_steps"], progress=not opts["quiet"],
    )
    print(table.to_string(index=False))


def cmd_mix(run: RunConfig) -> None:
    sources = _parse_sources(run.options["sources"])
    datasets = [(load_dataset(path), weight) for path, weight in sources]
    fractions = mix(datasets, run.seed).sample_fractions(run.options["draws"])
    payload = {
        "seed": run.seed,
        "sources": [
            {"dataset": path, "weight": weight, "episodes": len(dataset), "sampled_fraction": fraction}
            for (path, weight), (dataset, _), fraction in zip(sources, datasets, fractions)
        ],
    }
    atomic_write_json(os.path.join(run.out, "mixture.json"), payload)
    print(pd.DataFrame(payload["sources"]).to_string(index=False))


def cmd_inspect_checkpoint(run: RunConfig) -> None:
    print(json.dumps(read_header(run.checkpoint), indent=2, sort_keys=True, default=str))


COMMANDS: Dict[str, Callable[[RunConfig], None]] = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "mix": cmd_mix,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}

VALIDATION_ERRORS = (
    ConfigError, ContractError, DatasetFormatError, CheckpointFormatError, FileNotFoundError, json.JSONDecodeError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run = resolve_run_config(args)
        validate_run(run)
    except VALIDATION_ERRORS as exc:
        logger.error("Invalid invocation: %s", exc)
        return EXIT_INVALID
    logging.getLogger().setLevel(logging.DEBUG if run.verbose else logging.INFO)
    _write_run_record(run)
    try:
        COMMANDS[run.subcommand](run)
    except Exception:
        logger.exception("'%s' failed", run.subcommand)
        return EXIT_FAULT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""
Tests for the command-line interface.
"""
import json
import os

import pandas as pd
import pytest

from rtdesk.cli import (
    EXIT_INVALID,
    EXIT_OK,
    FLAG_REGISTRY,
    SUBCOMMAND_FLAGS,
    build_parser,
    main,
)
from rtdesk.core.data import load_dataset
from rtdesk.models.policy_transformer import PolicyModel

from conftest import tiny_policy

SMALL = "24"


def _collect(out, *tasks, episodes="2", source=None):
    argv = ["collect", "--out", str(out), "--episodes-per-task", episodes, "--image-size", SMALL, "--quiet"]
    if source:
        argv += ["--source", source]
    else:
        argv += ["--tasks", *tasks]
    return main(argv)


@pytest.mark.parametrize("command", sorted(SUBCOMMAND_FLAGS))
def test_help_documents_every_flag(command, capsys):
    """Test that each subcommand's help lists all of its flags."""
    with pytest.raises(SystemExit):
        build_parser().parse_args([command, "--help"])
    text = capsys.readouterr().out
    for name in SUBCOMMAND_FLAGS[command]:
        assert "--" + name.replace("_", "-") in text


def test_every_flag_has_help():
    """Test that the registry carries help text for every flag."""
    assert all(kwargs.get("help") for kwargs, _ in FLAG_REGISTRY.values())


def test_collect_writes_dataset(tmp_path):
    """Test that collect writes a loadable dataset and a run record."""
    assert _collect(tmp_path, "pick apple", "open top drawer") == EXIT_OK
    dataset = load_dataset(str(tmp_path / "dataset"))
    assert dataset.counts() == {"pick apple": 2, "open top drawer": 2}
    assert not os.path.exists(tmp_path / "dataset.partial")
    with open(tmp_path / "run.json") as fh:
        record = json.load(fh)
    assert record["run"]["subcommand"] == "collect"


def test_collect_foreign_source(tmp_path):
    """Test that the foreign source is relabelled and tagged."""
    assert _collect(tmp_path, source="foreign") == EXIT_OK
    dataset = load_dataset(str(tmp_path / "dataset"))
    assert dataset.source_counts() == {"foreign": 2}
    assert dataset.tasks == ["pick anything"]


def test_collect_rejects_unknown_instruction(tmp_path):
    """Test that an instruction outside the grammar fails validation."""
    assert _collect(tmp_path, "juggle apple") == EXIT_INVALID


def test_train_missing_dataset(tmp_path):
    """Test that training without a dataset directory is a validation failure."""
    code = main(["train", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path / "run")])
    assert code == EXIT_INVALID


def test_train_bad_manifest(tmp_path):
    """Test that a dataset with a malformed manifest is rejected before training."""
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "manifest.json").write_text(json.dumps({"episodes": []}))
    code = main(["train", "--dataset", str(tmp_path / "data"), "--out", str(tmp_path / "run")])
    assert code == EXIT_INVALID


def test_train_rejects_frames_too_small_for_model(tmp_path):
    """Test that a dataset whose frames cannot reach the token grid fails validation."""
    _collect(tmp_path / "data", "pick apple", episodes="1")
    code = main(["train", "--dataset", str(tmp_path / "data" / "dataset"), "--out", str(tmp_path / "run")])
    assert code == EXIT_INVALID


def test_config_file_and_flag_precedence(tmp_path):
    """Test that explicit flags override the config file."""
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"trials": 3, "step-limit": 5}))
    out = tmp_path / "run"
    code = main([
        "eval", "--config", str(config), "--controller", "random", "--trials", "1",
        "--image-size", SMALL, "--out", str(out), "--quiet",
    ])
    assert code == EXIT_OK
    with open(out / "run.json") as fh:
        options = json.load(fh)["run"]["options"]
    assert options["trials"] == 1
    assert options["step_limit"] == 5


def test_config_file_unknown_key(tmp_path):
    """Test that unknown config keys are rejected."""
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"momentum": 0.9}))
    code = main(["eval", "--config", str(config), "--controller", "random", "--out", str(tmp_path / "run")])
    assert code == EXIT_INVALID


def test_eval_unknown_suite(tmp_path):
    """Test that an unknown suite name is a validation failure."""
    code = main(["eval", "--controller", "random", "--suite", "moon", "--out", str(tmp_path)])
    assert code == EXIT_INVALID


def test_eval_model_needs_checkpoint(tmp_path):
    """Test that the model controller requires a checkpoint."""
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_INVALID


def test_eval_expert_writes_reports(tmp_path):
    """Test that evaluating the expert writes per-suite reports and a summary."""
    code = main([
        "eval", "--controller", "expert", "--suite", "seen", "--trials", "2",
        "--image-size", SMALL, "--out", str(tmp_path), "--quiet",
    ])
    assert code == EXIT_OK
    summary = pd.read_csv(tmp_path / "eval_summary.csv")
    assert summary["success_rate"].tolist() == [1.0]
    assert os.path.exists(tmp_path / "seen.json")


def test_eval_chain_plan(tmp_path):
    """Test that a chain plan writes chain statistics."""
    code = main([
        "eval", "--controller", "expert", "--chain-plan", "drawer-3", "--chains", "1",
        "--image-size", SMALL, "--out", str(tmp_path), "--quiet",
    ])
    assert code == EXIT_OK
    with open(tmp_path / "chain.json") as fh:
        stats = json.load(fh)
    assert stats["plan"][0] == "open top drawer"
    assert stats["chain_success_rate"] == 1.0


def test_mix_reports_fractions(tmp_path):
    """Test that mix writes sampled fractions close to the weights."""
    _collect(tmp_path / "a", "pick apple", episodes="1")
    _collect(tmp_path / "b", "pick sponge", episodes="1")
    out = tmp_path / "mix"
    code = main([
        "mix", "--sources", f"{tmp_path / 'a' / 'dataset'}:1", f"{tmp_path / 'b' / 'dataset'}:3",
        "--draws", "4000", "--out", str(out),
    ])
    assert code == EXIT_OK
    with open(out / "mixture.json") as fh:
        sources = json.load(fh)["sources"]
    assert sources[0]["sampled_fraction"] == pytest.approx(0.25, abs=0.03)


def test_mix_rejects_bad_weight(tmp_path):
    """Test that a non-positive weight is a validation failure."""
    _collect(tmp_path / "a", "pick apple", episodes="1")
    code = main(["mix", "--sources", f"{tmp_path / 'a' / 'dataset'}:0", "--out", str(tmp_path / "mix")])
    assert code == EXIT_INVALID


def test_ablate_dry_run(tmp_path):
    """Test that the dry run validates the dataset and lists the ablation jobs."""
    code = main(["ablate", "--dry-run", "--matrix", "model", "--out", str(tmp_path)])
    assert code == EXIT_INVALID
    _collect(tmp_path / "data", "pick apple", episodes="1")
    code = main([
        "ablate", "--dry-run", "--matrix", "model", "--dataset", str(tmp_path / "data" / "dataset"),
        "--out", str(tmp_path / "ablate"),
    ])
    assert code == EXIT_OK
    jobs = pd.read_csv(tmp_path / "ablate" / "ablation_jobs.csv")
    assert jobs["job"].tolist()[0] == "default"
    assert len(jobs) == 8


def test_inspect_and_bench_checkpoint(tmp_path, capsys):
    """Test that a checkpoint can be inspected and benchmarked."""
    path = str(tmp_path / "model.rtdk")
    PolicyModel(tiny_policy(), seed=0).save(path, metadata={"step": 5})
    assert main(["inspect-checkpoint", "--checkpoint", path, "--out", str(tmp_path / "inspect")]) == EXIT_OK
    assert '"policy_config"' in capsys.readouterr().out
    code = main(["bench", "--checkpoint", path, "--steps", "2", "--out", str(tmp_path / "bench")])
    assert code == EXIT_OK
    assert len(pd.read_csv(tmp_path / "bench" / "bench.csv")) == 4


def test_inspect_corrupted_checkpoint(tmp_path):
    """Test that a corrupted checkpoint fails validation."""
    path = tmp_path / "model.rtdk"
    path.write_bytes(b"RTDK" + bytes(40))
    assert main(["inspect-checkpoint", "--checkpoint", str(path), "--out", str(tmp_path / "x")]) == EXIT_INVALID

"""
Tests for the tabletop simulator, the task grammar, the scripted expert and evaluation.
"""
import json
import os

import numpy as np
import pytest

from rtdesk.core.action_codec import ActionVector
from rtdesk.core.config import ActionMode, LoopConfig, RobustnessTier, Skill
from rtdesk.core.data import EpisodeValidator
from rtdesk.core.errors import ConfigError, ContractError
from rtdesk.sim.evaluation import (
    SUITES,
    chain_execute,
    chain_statistics,
    combine_reports,
    evaluate,
    load_plan,
    make_suite,
)
from rtdesk.sim.expert import collect_episode, foreign_bin_episode
from rtdesk.sim.scene import DRAWER_MAX, LIFT_Z, Scene, SceneObject, render, step, visible_pixels
from rtdesk.sim.tasks import (
    all_tasks,
    check_split,
    default_split,
    parse_instruction,
    sample_task_scene,
    sim_tasks_for,
)

SMALL = 24


# ---------------------------------------------------------------------------
# Scene mechanics
# ---------------------------------------------------------------------------

def _scene_with_can():
    scene = Scene(image_size=SMALL)
    scene.objects.append(SceneObject("coke can", 0.4, 0.5))
    scene.robot.arm[:] = (0.4, 0.5, 0.1)
    return scene


def test_step_does_not_modify_input():
    """Test that stepping returns a new scene and leaves the old one alone."""
    scene = _scene_with_can()
    nxt = step(scene, ActionVector.build(arm=(1.0, 0.0, 0.0)))
    assert scene.robot.arm[0] == pytest.approx(0.4)
    assert nxt.robot.arm[0] == pytest.approx(0.48)


def test_grasp_and_lift_satisfies_pick():
    """Test that closing low over an object and lifting it completes a pick."""
    scene = step(_scene_with_can(), ActionVector.build(gripper=1.0))
    assert scene.robot.held == "coke can"
    for _ in range(2):
        scene = step(scene, ActionVector.build(arm=(0.0, 0.0, 1.0), gripper=1.0))
    assert scene.robot.arm[2] >= LIFT_Z
    assert parse_instruction("pick coke can").success(scene)
    assert not parse_instruction("pick apple").success(scene)


def test_terminate_freezes_scene():
    """Test that the scene ignores actions after terminate."""
    scene = step(_scene_with_can(), ActionVector.terminate())
    assert scene.frozen
    after = step(scene, ActionVector.build(arm=(1.0, 1.0, 1.0)))
    assert np.array_equal(after.robot.arm, scene.robot.arm)


def test_base_mode_moves_base_only():
    """Test that a base action leaves the arm coordinates unchanged."""
    scene = _scene_with_can()
    nxt = step(scene, ActionVector.build(base=(1.0, 0.0, 0.0), mode=ActionMode.BASE))
    assert nxt.robot.base[0] > 0
    assert np.array_equal(nxt.robot.arm, scene.robot.arm)


def test_render_is_deterministic():
    """Test that identical scenes render identical 8-bit images."""
    scene = _scene_with_can()
    image = render(scene)
    assert image.shape == (3, SMALL, SMALL)
    assert np.array_equal(image, render(scene.copy()))
    assert np.allclose(image * 255, np.round(image * 255), atol=1e-3)
    assert visible_pixels(scene, "coke can", size=96) > 0


# ---------------------------------------------------------------------------
# Task grammar and splits
# ---------------------------------------------------------------------------

def test_every_task_parses_back():
    """Test that every instruction of the vocabulary parses to its own task."""
    for task in all_tasks() + all_tasks("sim"):
        assert parse_instruction(task.instruction) == task


@pytest.mark.parametrize(
    "text,skill",
    [
        ("Pick  Coke can", Skill.PICK),
        ("move apple near white bowl", Skill.MOVE_NEAR),
        ("pick sponge from top drawer and place on counter", Skill.PICK_FROM_PLACE_ON),
        ("place orange into middle drawer", Skill.PLACE_INTO),
        ("pick anything", Skill.PICK),
    ],
)
def test_parse_instruction(text, skill):
    """Test that instructions map to their skill."""
    assert parse_instruction(text).skill == skill


@pytest.mark.parametrize("text", ["fly coke can", "move apple near apple", "open side drawer"])
def test_parse_rejects(text):
    """Test that instructions outside the grammar are rejected."""
    with pytest.raises(ContractError):
        parse_instruction(text)


def test_default_split_is_clean():
    """Test that unseen instructions are disjoint from seen ones and only recombine seen words."""
    seen, unseen = default_split()
    assert unseen
    assert not {t.instruction for t in seen} & {t.instruction for t in unseen}
    assert check_split(seen, unseen) == (True, None)
    total = len(seen) + len(unseen)
    assert len(unseen) == pytest.approx(0.2 * total, abs=1)


def test_check_split_detects_leak():
    """Test that an unseen instruction present in training is reported."""
    task = parse_instruction("pick apple")
    ok, error = check_split([task], [task])
    assert not ok and "pick apple" in error


def test_initial_states_follow_task():
    """Test that close-drawer scenes start open and upright tasks start knocked over."""
    scene = sample_task_scene(parse_instruction("close top drawer"), seed=0, image_size=SMALL)
    assert scene.drawers["top"] == DRAWER_MAX
    scene = sample_task_scene(parse_instruction("place coke can upright"), seed=0, image_size=SMALL)
    assert not scene.find("coke can").upright


def test_sim_tasks_split_by_skill():
    """Test that sim-object tasks are picks when the skill was seen and move-near otherwise."""
    assert {t.skill for t in sim_tasks_for(True)} == {Skill.PICK}
    assert {t.skill for t in sim_tasks_for(False)} == {Skill.MOVE_NEAR}


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "text",
    [
        "pick coke can",
        "move apple near white bowl",
        "knock pepsi can over",
        "place water bottle upright",
        "open middle drawer",
        "close bottom drawer",
        "place sponge into top drawer",
        "pick orange from middle drawer and place on counter",
        "pick toy cube",
    ],
)
def test_expert_demonstrates_every_skill(text, spec):
    """Test that the expert produces a valid, terminated demonstration for each skill."""
    episode = collect_episode(parse_instruction(text), seed=1, image_size=SMALL)
    assert episode.frames.shape[1:] == (3, SMALL, SMALL)
    assert episode.actions[-1, -1] == int(ActionMode.TERMINATE)
    assert EpisodeValidator.validate(episode, spec) == (True, None)


def test_expert_is_seeded():
    """Test that the same seed gives the same demonstration."""
    task = parse_instruction("pick apple")
    a = collect_episode(task, seed=4, image_size=SMALL)
    b = collect_episode(task, seed=4, image_size=SMALL)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.frames, b.frames)


def test_foreign_bin_episode():
    """Test that bin demonstrations carry 4-dof actions with a binary gripper."""
    raw = foreign_bin_episode(seed=0, image_size=SMALL)
    assert raw.instruction.startswith("pick ")
    assert all(len(a) == 5 and isinstance(a[4], bool) for a in raw.actions)
    assert any(a[4] for a in raw.actions)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(SUITES))
def test_every_suite_builds_a_scene(name):
    """Test that each suite's first trial has a feasible scene."""
    suite = make_suite(name, trials=1, seed=0, image_size=SMALL)
    scene = sample_task_scene(suite.task_for(0), seed=0, tier=suite.tier, image_size=SMALL)
    assert scene.image_size == SMALL
    if suite.tier == RobustnessTier.BIN:
        assert scene.bin_region is not None


def test_unknown_suite():
    """Test that an unknown suite name is rejected."""
    with pytest.raises(ConfigError):
        make_suite("moon", trials=1)


def test_expert_solves_seen_suite(tmp_path):
    """Test that the expert oracle succeeds on every seen trial and the report is written."""
    suite = make_suite("seen", trials=4, seed=0, image_size=SMALL)
    report = evaluate("expert", suite, LoopConfig(step_limit=60))
    assert report.success_rate == 1.0
    report.save(str(tmp_path))
    with open(tmp_path / "seen.json") as fh:
        saved = json.load(fh)
    assert saved["successes"] == 4
    assert os.path.exists(tmp_path / "seen.csv")
    assert os.path.exists(tmp_path / "seen.traces.jsonl")


def test_parallel_trials_match_serial():
    """Test that running trials concurrently gives the same logs in the same order."""
    suite = make_suite("distractor-easy", trials=3, seed=2, image_size=SMALL)
    loop = LoopConfig(step_limit=5)
    serial = evaluate("random", suite, loop)
    parallel = evaluate("random", suite, loop, jobs=3)
    assert serial.trials == parallel.trials
    table = combine_reports([serial, parallel])
    assert table["trials"].tolist() == [3, 3]


def test_load_plan_errors(tmp_path):
    """Test that plans are loaded by name or file and bad ones are rejected."""
    assert len(load_plan("kitchen-10")) == 10
    with pytest.raises(FileNotFoundError):
        load_plan(str(tmp_path / "absent.json"))
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    with pytest.raises(ContractError):
        load_plan(str(empty))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(["juggle apple"]))
    with pytest.raises(ContractError):
        load_plan(str(bad))


def test_expert_chain():
    """Test that the expert completes a three-step drawer plan on one scene."""
    result = chain_execute("expert", load_plan("drawer-3"), seed=0, image_size=SMALL)
    assert result.step_success == [True, True, True]
    assert result.success


def test_chain_statistics_for_expert():
    """Test that chain statistics report the measured rate next to the product of step rates."""
    stats = chain_statistics("expert", load_plan("drawer-3"), chains=2, seed=0, image_size=SMALL)
    assert stats["chain_success_rate"] == 1.0
    assert stats["product_of_rates"] == pytest.approx(1.0)
    assert len(stats["per_step_rates"]) == 3

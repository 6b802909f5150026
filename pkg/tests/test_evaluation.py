import itertools
import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundplan.constraints import ConstraintSet
from groundplan.errors import EmptyInput, NoMutableField
from groundplan.evaluation import (AUGMENT_STRATEGIES, FAULTS, NEGATIVE_STRATEGIES, Localization, SampleRecord,
                                   augment_positive, bridge_task, evaluate_task1, executability, export_dataset,
                                   generate_corpus, generate_negative, headphone_task, import_dataset, inject_fault,
                                   lcs_length, miou, normalize_action, pick_place_actions, positive_sample, rouge_l,
                                   tsr, validate_sample)
from groundplan.gateway import TaskStep
from groundplan.simulator import Outcome, parse_action, run_plan
from groundplan.supervision import validate_plan


def brute_lcs(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                return k
    return 0


def brute_ball_iou(pred, truth, voxel, radius):
    # Count lattice cells (anchored at the truth) over a generous cube.
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    n = int(np.ceil((np.abs(pred - truth).max() + radius) / voxel)) + 2
    a = b = both = 0
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            for k in range(-n, n + 1):
                q = truth + voxel * np.array([i, j, k])
                in_b = np.linalg.norm(q - truth) <= radius + 1e-9 * voxel
                in_a = np.linalg.norm(q - pred) <= radius + 1e-9 * voxel
                a += in_a or in_b
                both += in_a and in_b
    return both / a


def test_rouge_examples():
    assert rouge_l(["a", "b", "c"], ["a", "c"]) == pytest.approx(0.8)
    assert rouge_l(["x"], ["x"]) == 1.0
    assert rouge_l(["x"], ["y"]) == 0.0
    assert rouge_l([], []) == 1.0
    assert rouge_l([], ["y"]) == 0.0
    assert rouge_l(["Move_To([1, 2,  3])"], ["move_to([1, 2, 3])"]) == 1.0
    assert normalize_action("  Grasp( 5 ) ") == "grasp( 5 )"


@given(st.lists(st.sampled_from("abcd"), max_size=9), st.lists(st.sampled_from("abcd"), max_size=9))
@settings(max_examples=200, deadline=None)
def test_lcs_brute_force(a, b):
    assert lcs_length(a, b) == brute_lcs(a, b)
    if a or b:
        assert rouge_l(a, b) == pytest.approx(2 * brute_lcs(a, b) / (len(a) + len(b)))


def test_miou_examples():
    assert miou([Localization("a", (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))]) == 1.0
    assert miou([Localization("a", (0.8, 0.5, 0.5), (0.5, 0.5, 0.5))]) == 0.0
    mixed = miou([Localization("a", (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)), Localization("b", (0, 0, 0), (0.3, 0, 0))])
    assert mixed == pytest.approx(0.5)
    with pytest.raises(EmptyInput):
        miou([])


def test_miou_offset_matches_voxel_count():
    loc = Localization("a", (0.55, 0.5, 0.5), (0.5, 0.5, 0.5))
    assert miou([loc]) == pytest.approx(brute_ball_iou(loc.predicted, loc.truth, 0.05, 0.1), abs=1e-12)
    assert 0 < miou([loc]) < 1


@pytest.mark.parametrize("seed", range(5))
def test_miou_random_offsets_match_voxel_count(seed):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0, 1, 3)
    pred = truth + rng.uniform(-0.1, 0.1, 3)
    loc = Localization("a", tuple(pred), tuple(truth))
    assert miou([loc]) == pytest.approx(brute_ball_iou(pred, truth, 0.05, 0.1), abs=1e-12)


def test_executability_and_tsr():
    assert executability([{"parsed_and_validated": True}, {"parsed_and_validated": False}]) == 0.5
    assert executability([True, True, False, Outcome(False, True)]) == 0.75
    assert tsr([Outcome(True, True), Outcome(False, True)]) == 0.5
    with pytest.raises(EmptyInput):
        executability([])
    with pytest.raises(EmptyInput):
        tsr([])


def test_pick_place_shape():
    acts = pick_place_actions((0.5, 0.3, 0.2), (0.4, 0.2, 0.15), ConstraintSet())
    assert acts == ["move_to([0.5, 0.3, 0.2])", "grasp(5.0)", "move_to([0.5, 0.3, 0.35])",
                    "move_to([0.4, 0.2, 0.3])", "move_to([0.4, 0.2, 0.15])", "release()"]


@pytest.mark.parametrize("task_id", [1, 2, 3])
def test_headphone_tasks_are_solvable(task_id):
    rng = np.random.default_rng(task_id)
    for _ in range(10):
        inst = headphone_task(rng, task_id)
        assert validate_plan(inst.plan(), inst.scene) == []
        assert run_plan(inst.scene, inst.plan(), inst.goal()).success


def test_bridge_tasks_are_solvable():
    rng = np.random.default_rng(0)
    for _ in range(20):
        inst = bridge_task(rng)
        assert inst.source == "bridge"
        assert run_plan(inst.scene, inst.plan(), inst.goal()).success


@pytest.mark.parametrize("fault", FAULTS)
def test_every_fault_is_caught_by_validator(fault):
    inst = headphone_task(np.random.default_rng(3), 1)
    bad = inject_fault(inst.actions, fault)
    plan = inst.plan()
    plan.steps = [TaskStep(str(i), a) for i, a in enumerate(bad, start=1)]
    assert validate_plan(plan, inst.scene)
    assert not run_plan(inst.scene, plan, inst.goal()).success


def test_inject_fault_unknown():
    with pytest.raises(ValueError):
        inject_fault(["move_to([0.5, 0.5, 0.5])", "grasp(5)", "release()"], "teleport")


def base_sample(seed=0):
    return positive_sample(headphone_task(np.random.default_rng(seed), 1))


@pytest.mark.parametrize("strategy", AUGMENT_STRATEGIES)
def test_augment_positive_produces_flagged_negative(strategy):
    s = augment_positive(base_sample(), strategy, seed=1)
    assert s.polarity == "negative" and s.flag == 0
    assert validate_plan(s.plan, s.scene_model)
    assert s.source.endswith(strategy)
    validate_sample(s.to_dict())


@pytest.mark.parametrize("strategy,expected", [("reverse_flow", "LogicalError"),
                                               ("invalid_position", "ParameterError"),
                                               ("occlusion", "ParameterError")])
def test_generate_negative_error_types(strategy, expected):
    s = generate_negative(base_sample(), strategy, seed=2)
    assert s.error_type == expected
    assert validate_plan(s.plan, s.scene_model)


def test_fragile_param_exceed_is_constraint_violation():
    assert augment_positive(base_sample(), "param_exceed", seed=0).error_type == "ConstraintViolation"


def test_augmentation_rejects_bad_input():
    s = base_sample()
    neg = generate_negative(s, "occlusion", 0)
    with pytest.raises(ValueError):
        augment_positive(neg, "drop_step", 0)
    with pytest.raises(ValueError):
        generate_negative(s, "teleport", 0)
    empty = SampleRecord("t", {"objects": []}, {"scene_description": {"objects": []}, "task_steps": [],
                                                "flag": "complete"}, [], "", [], 1.0, "", 1, "positive")
    with pytest.raises(NoMutableField):
        augment_positive(empty, "add_step", 0)


def test_sample_record_invariants():
    with pytest.raises(ValueError):
        SampleRecord("t", {}, {}, [], "", [], 1.0, "", 1, "neutral")
    with pytest.raises(ValueError):
        SampleRecord("t", {}, {}, [], "", [], 1.0, "", 0, "negative")


def test_schema_rejects_malformed():
    d = base_sample().to_dict()
    validate_sample(d)
    bad = json.loads(json.dumps(d))
    bad["output"]["Confidence"]["Value"] = 2
    with pytest.raises(jsonschema.ValidationError):
        validate_sample(bad)
    bad = json.loads(json.dumps(d))
    bad["polarity"], bad["error_type"] = "negative", None
    with pytest.raises(jsonschema.ValidationError):
        validate_sample(bad)


def test_small_corpus_round_trip(tmp_path):
    corpus = generate_corpus(seed=4, n_bridge=6, n_custom=6, n_aug_pos=6, n_aug_neg=12)
    assert len(corpus) == 30
    assert sum(s.polarity == "negative" for s in corpus) == 12
    assert {s.source.split("+")[-1] for s in corpus if s.polarity == "negative"} == \
        set(AUGMENT_STRATEGIES + NEGATIVE_STRATEGIES)
    path = tmp_path / "d.jsonl"
    assert export_dataset(corpus, path) == 30
    back = import_dataset(path)
    assert [s.to_dict() for s in back] == [s.to_dict() for s in corpus]
    assert path.read_text() == "".join(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n"
                                       for s in back)


def test_corpus_is_seeded():
    a = generate_corpus(seed=9, n_bridge=3, n_custom=3, n_aug_pos=2, n_aug_neg=4)
    b = generate_corpus(seed=9, n_bridge=3, n_custom=3, n_aug_pos=2, n_aug_neg=4)
    assert [s.to_dict() for s in a] == [s.to_dict() for s in b]


def test_evaluate_task1_small():
    report, rows = evaluate_task1(runs=8, seed=1)
    assert report.tsr == 1.0 and report.executability == 1.0 and report.n == 8
    assert report.miou == 1.0 and report.rouge_l == 1.0
    assert len(rows) == 8


def test_evaluate_task1_ablation_direction():
    with_rev, _ = evaluate_task1(runs=20, seed=2, reviewer=True, fault_rate=0.6)
    without, rows = evaluate_task1(runs=20, seed=2, reviewer=False, fault_rate=0.6)
    assert without.counts["faulty"] > 0
    assert with_rev.tsr == 1.0 and without.tsr < with_rev.tsr
    # Every faulty first plan fails when run unsupervised.
    assert all(not r["success"] for r in rows if r["fault"])
    with pytest.raises(EmptyInput):
        evaluate_task1(runs=0)


def test_move_targets_parse():
    inst = headphone_task(np.random.default_rng(5), 2)
    for a in inst.actions:
        parse_action(a)

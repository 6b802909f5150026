"""Evaluation metrics, reviewer-dataset generation and the desk-scale task harness."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .constraints import ConstraintSet
from .errors import EmptyInput, NoMutableField
from .gateway import ScriptedBackend, Suggestion, VlmPlan, parse_vlm_plan
from .simulator import (Grasp, MoveTo, Outcome, Release, Rotate, SceneModel, SceneObject, builtin_goals,
                        format_action, parse_action, run_plan, segment_samples)
from .supervision import (CATEGORIES, LOGICAL_ERROR, PARAMETER_ERROR, FeedbackHistory, LoopParams,
                          Templates, rule_based_review, run_supervision, validate_raw)

logger = logging.getLogger(__name__)

MIOU_VOXEL = 0.05
MIOU_TOL = 0.2

AUGMENT_STRATEGIES = ("param_exceed", "drop_step", "add_step")
NEGATIVE_STRATEGIES = ("reverse_flow", "invalid_position", "occlusion")


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Localization:
    name: str
    predicted: Tuple[float, float, float]
    truth: Tuple[float, float, float]

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (*self.predicted, *self.truth)):
            raise ValueError("localization coordinates must be finite")


@dataclass
class EvalReport:
    miou: float
    rouge_l: float
    executability: float
    tsr: float
    n: int
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"miou": self.miou, "rouge_l": self.rouge_l, "executability": self.executability,
                "tsr": self.tsr, "n": self.n, "counts": dict(self.counts)}


def _ball_iou(pred, truth, voxel: float, radius: float) -> float:
    # Lattice anchored at the ground truth; a cell is in a ball if its center is.
    d = np.asarray(pred, float) - np.asarray(truth, float)
    lo = np.floor((np.minimum(d, 0.0) - radius) / voxel).astype(int)
    hi = np.ceil((np.maximum(d, 0.0) + radius) / voxel).astype(int)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3) * voxel
    eps = 1e-9 * voxel
    in_b = np.linalg.norm(grid, axis=1) <= radius + eps
    in_a = np.linalg.norm(grid - d, axis=1) <= radius + eps
    union = np.count_nonzero(in_a | in_b)
    return float(np.count_nonzero(in_a & in_b) / union) if union else 1.0


def miou(locs: Sequence[Localization], voxel: float = MIOU_VOXEL, tol: float = MIOU_TOL) -> float:
    """Mean IoU of voxelized balls (radius ``tol/2``) around prediction and truth.

    Objects localized ``tol`` or further from the truth score 0.
    """
    if not locs:
        raise EmptyInput("miou needs at least one localization")
    if voxel <= 0 or tol <= 0:
        raise ValueError("voxel and tol must be positive")
    scores = []
    for loc in locs:
        err = float(np.linalg.norm(np.subtract(loc.predicted, loc.truth)))
        scores.append(0.0 if err >= tol else _ball_iou(loc.predicted, loc.truth, voxel, tol / 2))
    return float(np.mean(scores))


def normalize_action(text: str) -> str:
    return " ".join(str(text).lower().split())


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: Sequence[str], gt: Sequence[str]) -> float:
    p = [normalize_action(t) for t in pred]
    g = [normalize_action(t) for t in gt]
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    return 2.0 * lcs_length(p, g) / (len(p) + len(g))


def _executed(r) -> bool:
    if isinstance(r, Outcome):
        return r.executed
    if isinstance(r, dict):
        return bool(r["parsed_and_validated"])
    return bool(r)


def executability(results: Sequence) -> float:
    """Share of plans whose every command parsed and executed."""
    if not results:
        raise EmptyInput("executability needs at least one result")
    return sum(_executed(r) for r in results) / len(results)


def tsr(outcomes: Sequence[Outcome]) -> float:
    if not outcomes:
        raise EmptyInput("tsr needs at least one outcome")
    return sum(bool(o.success) for o in outcomes) / len(outcomes)


# --------------------------------------------------------------------------- samples

@dataclass
class SampleRecord:
    task: str
    scene: Dict[str, Any]
    vlm_output: Dict[str, Any]
    history: List[str]
    feedback: str
    suggestions: List[Suggestion]
    confidence: float
    prompt_for_vlm: str
    flag: int
    polarity: str
    error_type: Optional[str] = None
    source: str = "custom"

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"invalid polarity {self.polarity!r}")
        if self.polarity == "negative" and not self.error_type:
            raise ValueError("negative samples need an error_type")

    @property
    def plan(self) -> VlmPlan:
        return parse_vlm_plan(self.vlm_output)

    @property
    def scene_model(self) -> SceneModel:
        return SceneModel.from_dict(self.scene)

    def to_dict(self) -> dict:
        return {
            "input": {"Task Description": self.task, "Scene": self.scene, "VLM Output": self.vlm_output,
                      "Historical SLM Feedback": list(self.history)},
            "output": {"Feedback": {"Description": self.feedback},
                       "Suggestions": [s.to_dict() for s in self.suggestions],
                       "Confidence": {"Value": self.confidence},
                       "Prompt for VLM": {"Command": self.prompt_for_vlm},
                       "Flag": self.flag},
            "polarity": self.polarity,
            "error_type": self.error_type,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d) -> "SampleRecord":
        i, o = d["input"], d["output"]
        return cls(i["Task Description"], i["Scene"], i["VLM Output"], list(i["Historical SLM Feedback"]),
                   o["Feedback"]["Description"],
                   [Suggestion(s["id"], s["text"], s["confidence"]) for s in o["Suggestions"]],
                   o["Confidence"]["Value"], o["Prompt for VLM"]["Command"], o["Flag"],
                   d["polarity"], d.get("error_type"), d.get("source", "custom"))


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
SAMPLE_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["input", "output", "polarity", "error_type", "source"],
    "properties": {
        "input": {
            "type": "object",
            "required": ["Task Description", "Scene", "VLM Output", "Historical SLM Feedback"],
            "properties": {
                "Task Description": {"type": "string", "minLength": 1},
                "Scene": {"type": "object", "required": ["objects"], "properties": {"objects": {
                    "type": "array", "items": {"type": "object", "required": ["name"],
                                               "properties": {"name": {"type": "string"}, "position": _VEC3,
                                                              "properties": {"type": "object"}}}}}},
                "VLM Output": {
                    "type": "object", "required": ["scene_description", "task_steps", "flag"],
                    "properties": {
                        "scene_description": {"type": "object", "required": ["objects"]},
                        "task_steps": {"type": "array", "items": {
                            "type": "object", "required": ["step_id", "action"],
                            "properties": {"step_id": {"type": "string"}, "action": {"type": "string"},
                                           "description": {"type": "string"}}}},
                        "flag": {"enum": ["complete", "incomplete"]}}},
                "Historical SLM Feedback": {"type": "array", "items": {"type": "string"}},
            },
        },
        "output": {
            "type": "object",
            "required": ["Feedback", "Suggestions", "Confidence", "Prompt for VLM", "Flag"],
            "properties": {
                "Feedback": {"type": "object", "required": ["Description"],
                             "properties": {"Description": {"type": "string"}}},
                "Suggestions": {"type": "array", "items": {
                    "type": "object", "required": ["id", "text", "confidence"],
                    "properties": {"id": {"type": "string"}, "text": {"type": "string"},
                                   "confidence": {"type": "number", "minimum": 0, "maximum": 1}}}},
                "Confidence": {"type": "object", "required": ["Value"],
                               "properties": {"Value": {"type": "number", "minimum": 0, "maximum": 1}}},
                "Prompt for VLM": {"type": "object", "required": ["Command"],
                                   "properties": {"Command": {"type": "string"}}},
                "Flag": {"enum": [0, 1]},
            },
        },
        "polarity": {"enum": ["positive", "negative"]},
        "error_type": {"enum": [None, *CATEGORIES]},
        "source": {"type": "string"},
    },
    "allOf": [{"if": {"properties": {"polarity": {"const": "negative"}}},
               "then": {"properties": {"error_type": {"type": "string"}}}}],
}


def validate_sample(d: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``d`` is not a well-formed exported sample."""
    jsonschema.validate(d, SAMPLE_SCHEMA)


def export_dataset(samples: Iterable[SampleRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


def import_dataset(path) -> List[SampleRecord]:
    with open(path, encoding="utf-8") as fh:
        return [SampleRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------- scene and plan generators

BRIDGE_OBJECTS = ("cup", "spoon", "towel", "marker", "block", "bowl", "sponge", "carrot", "lid", "brush")
BRIDGE_PLACES = ("plate", "tray", "pot", "basket", "cloth", "shelf")
LIFT = 0.15
SEPARATION = 0.15


def _r3(p) -> Tuple[float, float, float]:
    return tuple(round(float(x), 3) for x in p)


def _grid_point(rng: np.random.Generator, lo, hi) -> Tuple[float, float, float]:
    # Positions on a 1 cm grid, like measured coordinates.
    return tuple(int(rng.integers(round(a * 100), round(b * 100) + 1)) / 100 for a, b in zip(lo, hi))


def _lifted(p, c: ConstraintSet) -> Tuple[float, float, float]:
    return _r3((p[0], p[1], min(p[2] + LIFT, c.z_bounds[1] - 0.05)))


def pick_place_actions(obj_pos, dest, c: ConstraintSet, rotate: Optional[float] = None) -> List[str]:
    """Competent pick-and-place: approach, grasp, lift, carry over ``dest``, lower, release."""
    acts = [MoveTo(_r3(obj_pos)), Grasp(force=c.default_grip_force), MoveTo(_lifted(obj_pos, c))]
    if rotate is not None:
        acts.append(Rotate(rotate))
    acts += [MoveTo(_lifted(dest, c)), MoveTo(_r3(dest)), Release()]
    return [format_action(a) for a in acts]


def _waypoints(actions: Sequence[str], c: ConstraintSet) -> List[Tuple[float, float, float]]:
    pts = [tuple(c.home)]
    for a in actions:
        cmd = parse_action(a, c.known_actions)
        if isinstance(cmd, MoveTo):
            pts.append(cmd.target)
    return pts


def _path_clearance(point, waypoints) -> float:
    p = np.asarray(point, float)
    best = math.inf
    for a, b in zip(waypoints, waypoints[1:]):
        s = segment_samples(a, b, 0.005)
        best = min(best, float(np.min(np.linalg.norm(s - p, axis=1))))
    return best


def _place_obstacle(rng, objects: List[SceneObject], actions: Sequence[str], c: ConstraintSet,
                    tries: int = 60) -> Optional[SceneObject]:
    wps = _waypoints(actions, c)
    margin = c.min_clearance + 0.05
    for _ in range(tries):
        pos = _grid_point(rng, (0.1, 0.1, 0.05), (0.9, 0.9, 0.5))
        if _path_clearance(pos, wps) < margin:
            continue
        if any(np.linalg.norm(np.subtract(pos, o.position)) < margin for o in objects):
            continue
        size = ("small", "medium", "large")[int(rng.integers(3))]
        return SceneObject("obstacle", pos, {"size": size, "type": "box"})
    return None


def _separated(points, min_dist: float) -> bool:
    return all(np.linalg.norm(np.subtract(a, b)) >= min_dist for i, a in enumerate(points) for b in points[i + 1:])


@dataclass
class TaskInstance:
    task: str
    scene: SceneModel
    actions: List[str]
    task_id: int = 1
    target: Optional[Tuple[float, float, float]] = None
    stand_target: Optional[Tuple[float, float, float]] = None
    source: str = "custom"

    def plan(self, perceived: Optional[SceneModel] = None) -> VlmPlan:
        scene = perceived or self.scene
        return parse_vlm_plan({
            "scene_description": {"objects": [o.to_dict() for o in scene.objects if o.position is not None]},
            "task_steps": [{"step_id": str(i), "action": a} for i, a in enumerate(self.actions, start=1)],
            "issues": [], "flag": "complete"})

    def goal(self):
        if self.task_id in (1, 2, 3):
            return builtin_goals(self.task_id, self.scene, self.target, self.stand_target, stand="headphone_stand")
        obj = self.scene.objects[0].name
        dest = self.target
        return builtin_goals(2, self.scene, dest, headphone=obj, stand=self.scene.objects[1].name)


def headphone_task(rng: np.random.Generator, task_id: int = 1, c: Optional[ConstraintSet] = None,
                   obstacle: bool = True) -> TaskInstance:
    """Random instance of the headphone tasks (1 hang, 2 hand over, 3 move stand then hang)."""
    c = c or ConstraintSet()
    hook = np.array([0.0, 0.0, 0.05])
    for _ in range(200):
        head = _grid_point(rng, (0.2, 0.2, 0.05), (0.8, 0.8, 0.35))
        stand = _grid_point(rng, (0.2, 0.2, 0.05), (0.8, 0.8, 0.3))
        extra = _grid_point(rng, (0.2, 0.2, 0.05), (0.8, 0.8, 0.3))
        if _separated([head, stand, extra], SEPARATION):
            break
    else:
        raise RuntimeError("could not sample a separated scene")
    objects = [SceneObject("headphone", head, {"fragility": "high"}),
               SceneObject("headphone_stand", stand, {"material": "plastic", "stability": "unstable"})]
    target = stand_target = None
    if task_id == 1:
        task = "Hang the headphone on the headphone stand."
        actions = pick_place_actions(head, _r3(np.add(stand, hook)), c)
    elif task_id == 2:
        target = extra
        task = f"Hand the headphone to the user; their hand is at {list(target)}."
        actions = pick_place_actions(head, target, c)
    elif task_id == 3:
        stand_target = extra
        task = f"Move the headphone stand to {list(stand_target)} and hang the headphone on it."
        actions = (pick_place_actions(stand, stand_target, c)
                   + pick_place_actions(head, _r3(np.add(stand_target, hook)), c))
    else:
        raise ValueError(f"unknown headphone task {task_id}")
    if obstacle:
        obs = _place_obstacle(rng, objects + ([SceneObject("x", extra)] if task_id != 1 else []), actions, c)
        if obs is not None:
            objects.append(obs)
    return TaskInstance(task, SceneModel(objects), actions, task_id, target, stand_target, "custom")


def bridge_task(rng: np.random.Generator, c: Optional[ConstraintSet] = None) -> TaskInstance:
    """Generic tabletop pick-and-place in the style of public manipulation datasets."""
    c = c or ConstraintSet()
    obj = BRIDGE_OBJECTS[int(rng.integers(len(BRIDGE_OBJECTS)))]
    place = BRIDGE_PLACES[int(rng.integers(len(BRIDGE_PLACES)))]
    for _ in range(200):
        a = _grid_point(rng, (0.15, 0.15, 0.02), (0.85, 0.85, 0.3))
        b = _grid_point(rng, (0.15, 0.15, 0.02), (0.85, 0.85, 0.3))
        if _separated([a, b], SEPARATION):
            break
    dest = _r3(np.add(b, (0.0, 0.0, 0.05)))
    rotate = float(rng.choice([90.0, -90.0, 45.0])) if rng.random() < 0.3 else None
    actions = pick_place_actions(a, dest, c, rotate)
    objects = [SceneObject(obj, a, {"material": "rigid"}), SceneObject(place, b, {"surface": "flat"})]
    if rng.random() < 0.5:
        obs = _place_obstacle(rng, objects, actions, c)
        if obs is not None:
            objects.append(obs)
    verb = "Put" if rng.random() < 0.5 else "Move"
    return TaskInstance(f"{verb} the {obj} on the {place}.", SceneModel(objects), actions, 0, dest, None, "bridge")


# --------------------------------------------------------------------------- sample construction

def _review_sample(task: str, scene: dict, vlm_output: dict, polarity: str, error_type: Optional[str],
                   source: str, c: ConstraintSet) -> SampleRecord:
    rec = rule_based_review(task, None, FeedbackHistory(), json.dumps(vlm_output), SceneModel.from_dict(scene), c)
    return SampleRecord(task, scene, vlm_output, [], rec.feedback, list(rec.suggestions), rec.confidence,
                        rec.prompt_for_vlm, rec.accept_flag, polarity, error_type, source)


def positive_sample(inst: TaskInstance, c: Optional[ConstraintSet] = None) -> SampleRecord:
    c = c or ConstraintSet()
    s = _review_sample(inst.task, inst.scene.to_dict(), inst.plan().to_dict(), "positive", None, inst.source, c)
    if s.flag != 1:
        raise RuntimeError(f"generated plan for {inst.task!r} does not validate: {s.feedback}")
    return s


def _steps(s: SampleRecord) -> List[dict]:
    return s.vlm_output["task_steps"]


def _renumber(steps: List[dict]) -> List[dict]:
    return [dict(st, step_id=str(i)) for i, st in enumerate(steps, start=1)]


def _finish_negative(s: SampleRecord, vlm_output: dict, scene: dict, intended: Optional[str],
                     c: ConstraintSet, tag: str) -> SampleRecord:
    _, check = validate_raw(json.dumps(vlm_output), SceneModel.from_dict(scene), c)
    if not check.issues:
        raise NoMutableField(f"{tag}: mutation did not produce a detectable error")
    cats = {i.category for i in check.issues}
    error_type = intended if intended in cats else min(cats, key=CATEGORIES.index)
    return _review_sample(s.task, scene, vlm_output, "negative", error_type, f"{s.source}+{tag}", c)


def _require_positive(s: SampleRecord) -> None:
    if s.polarity != "positive":
        raise ValueError("augmentation needs a positive sample")


def _indices(steps, name: str, c: ConstraintSet) -> List[int]:
    out = []
    for i, st in enumerate(steps):
        try:
            cmd = parse_action(st["action"], c.known_actions)
        except Exception:
            continue
        if type(cmd).__name__ == name:
            out.append(i)
    return out


def augment_positive(s: SampleRecord, strategy: str, seed: int, c: Optional[ConstraintSet] = None) -> SampleRecord:
    """Turn a clean sample into a negative one by breaking a parameter or the step structure."""
    _require_positive(s)
    c = c or ConstraintSet()
    rng = np.random.default_rng(seed)
    out = copy.deepcopy(s.vlm_output)
    steps = out["task_steps"]
    if strategy == "param_exceed":
        grasps = [i for i in _indices(steps, "Grasp", c)
                  if parse_action(steps[i]["action"], c.known_actions).target is None]
        if grasps:
            i = grasps[int(rng.integers(len(grasps)))]
            force = round(c.max_grip_force * float(rng.uniform(1.2, 3.0)), 1)
            steps[i]["action"] = format_action(Grasp(force=force))
            intended = None  # fragile objects breach the fragile limit first
        else:
            moves = _indices(steps, "MoveTo", c)
            if not moves:
                raise NoMutableField("no grasp force or move target to exceed")
            i = moves[int(rng.integers(len(moves)))]
            t = list(parse_action(steps[i]["action"], c.known_actions).target)
            t[int(rng.integers(3))] = round(c.x_bounds[1] * float(rng.uniform(1.2, 2.0)), 3)
            steps[i]["action"] = format_action(MoveTo(tuple(t)))
            intended = PARAMETER_ERROR
        return _finish_negative(s, out, s.scene, intended, c, strategy)
    if strategy == "drop_step":
        rel = _indices(steps, "Release", c)
        victims = rel or _indices(steps, "Grasp", c)
        if not victims:
            raise NoMutableField("no release or grasp step to drop")
        del steps[victims[int(rng.integers(len(victims)))]]
        out["task_steps"] = _renumber(steps)
        return _finish_negative(s, out, s.scene, LOGICAL_ERROR, c, strategy)
    if strategy == "add_step":
        grasps = _indices(steps, "Grasp", c)
        if not grasps:
            raise NoMutableField("no grasp step to duplicate")
        i = grasps[int(rng.integers(len(grasps)))]
        steps.insert(i + 1, dict(steps[i]))
        out["task_steps"] = _renumber(steps)
        return _finish_negative(s, out, s.scene, LOGICAL_ERROR, c, strategy)
    raise ValueError(f"unknown augmentation strategy {strategy!r}")


def generate_negative(s: SampleRecord, strategy: str, seed: int, c: Optional[ConstraintSet] = None) -> SampleRecord:
    """Negative sample by reversing the flow, displacing an object or hiding its position."""
    _require_positive(s)
    c = c or ConstraintSet()
    rng = np.random.default_rng(seed)
    out = copy.deepcopy(s.vlm_output)
    steps = out["task_steps"]
    scene = copy.deepcopy(s.scene)
    if strategy == "reverse_flow":
        g, r = _indices(steps, "Grasp", c), _indices(steps, "Release", c)
        if not g or not r:
            raise NoMutableField("plan has no grasp/release pair")
        k = int(rng.integers(min(len(g), len(r))))
        i, j = g[k], r[k]
        steps[i]["action"], steps[j]["action"] = steps[j]["action"], steps[i]["action"]
        return _finish_negative(s, out, scene, LOGICAL_ERROR, c, strategy)
    if strategy == "invalid_position":
        objs = out["scene_description"]["objects"]
        if not objs:
            raise NoMutableField("no object positions to displace")
        o = objs[int(rng.integers(len(objs)))]
        axis = int(rng.integers(3))
        o["position"][axis] = (round(1.0 + float(rng.uniform(0.05, 0.5)), 3) if rng.random() < 0.5
                               else round(-float(rng.uniform(0.05, 0.5)), 3))
        return _finish_negative(s, out, scene, PARAMETER_ERROR, c, strategy)
    if strategy == "occlusion":
        listed = {o["name"] for o in out["scene_description"]["objects"]}
        cands = [o for o in scene["objects"] if "position" in o and o["name"] in listed]
        if not cands:
            raise NoMutableField("no positioned object to occlude")
        del cands[int(rng.integers(len(cands)))]["position"]
        return _finish_negative(s, out, scene, PARAMETER_ERROR, c, strategy)
    raise ValueError(f"unknown negative strategy {strategy!r}")


def make_negative(s: SampleRecord, strategy: str, seed: int, c: Optional[ConstraintSet] = None) -> SampleRecord:
    if strategy in AUGMENT_STRATEGIES:
        return augment_positive(s, strategy, seed, c)
    return generate_negative(s, strategy, seed, c)


def base_positive(rng: np.random.Generator, source: str, c: ConstraintSet) -> SampleRecord:
    if source == "bridge":
        return positive_sample(bridge_task(rng, c), c)
    return positive_sample(headphone_task(rng, int(rng.integers(1, 4)), c, obstacle=rng.random() < 0.6), c)


def generate_corpus(seed: int = 0, n_bridge: int = 240, n_custom: int = 320, n_aug_pos: int = 1500,
                    n_aug_neg: int = 1500, c: Optional[ConstraintSet] = None) -> List[SampleRecord]:
    """Balanced reviewer corpus: bridge-style and custom positives plus augmented positives/negatives.

    Augmented positives are fresh scene variants of the base generators;
    negatives cycle through all six corruption strategies.
    """
    c = c or ConstraintSet()
    rng = np.random.default_rng(seed)
    base = [base_positive(rng, "bridge", c) for _ in range(n_bridge)]
    base += [base_positive(rng, "custom", c) for _ in range(n_custom)]
    out = list(base)
    for i in range(n_aug_pos):
        s = base_positive(rng, "bridge" if rng.random() < 0.4 else "custom", c)
        s.source = f"{s.source}+variant"
        out.append(s)
    strategies = AUGMENT_STRATEGIES + NEGATIVE_STRATEGIES
    pool = base or [base_positive(rng, "custom", c)]
    made = 0
    attempt = 0
    while made < n_aug_neg:
        src = pool[int(rng.integers(len(pool)))]
        strategy = strategies[attempt % len(strategies)]
        attempt += 1
        try:
            out.append(make_negative(src, strategy, int(rng.integers(2 ** 31)), c))
            made += 1
        except NoMutableField:
            continue
    return out


# --------------------------------------------------------------------------- desk-scale harness

FAULTS = ("over_force", "undefined_function", "drop_release", "duplicate_grasp", "reverse_flow")


def inject_fault(actions: Sequence[str], fault: str, c: Optional[ConstraintSet] = None) -> List[str]:
    """Corrupt a competent action list the way a VLM typically gets it wrong."""
    c = c or ConstraintSet()
    acts = list(actions)
    kinds = [type(parse_action(a, c.known_actions)).__name__ for a in acts]
    g, r = kinds.index("Grasp"), kinds.index("Release")
    if fault == "over_force":
        acts[g] = "grasp(15)"
    elif fault == "undefined_function":
        t = parse_action(acts[g + 1], c.known_actions).target
        acts[g + 1] = "liftTo(" + ", ".join(repr(x) for x in t) + ")"
    elif fault == "drop_release":
        del acts[r]
    elif fault == "duplicate_grasp":
        acts.insert(g + 1, acts[g])
    elif fault == "reverse_flow":
        acts[g], acts[r] = acts[r], acts[g]
    else:
        raise ValueError(f"unknown fault {fault!r}")
    return acts


def _plan_json(inst: TaskInstance, actions: Sequence[str]) -> str:
    d = inst.plan().to_dict()
    d["task_steps"] = [{"step_id": str(i), "action": a} for i, a in enumerate(actions, start=1)]
    return json.dumps(d)


def _localizations(plan: Optional[VlmPlan], truth: SceneModel) -> List[Localization]:
    if plan is None:
        return []
    out = []
    for o in plan.objects:
        t = truth.get(o.name)
        if t is not None and t.position is not None:
            out.append(Localization(o.name, tuple(o.position), tuple(t.position)))
    return out


def evaluate_task1(runs: int = 50, seed: int = 0, reviewer: bool = True, fault_rate: float = 0.0,
                   c: Optional[ConstraintSet] = None, p: Optional[LoopParams] = None,
                   templates: Optional[Templates] = None) -> Tuple[EvalReport, List[dict]]:
    """Task 1 under ``runs`` seeded scene perturbations with a scripted VLM.

    The scripted VLM answers with a competent plan, or (with probability
    ``fault_rate``) a faulty first plan followed by the competent one when
    asked for a correction. With ``reviewer`` the rule-based supervisor
    gates execution; without it the first plan is executed as is.
    """
    if runs < 1:
        raise EmptyInput("need at least one run")
    c = c or ConstraintSet()
    p = p or LoopParams()
    templates = templates or Templates()
    rng = np.random.default_rng(seed)
    outcomes, locs, rouge, rows = [], [], [], []
    faulty_count = 0
    for k in range(runs):
        inst = headphone_task(rng, 1, c)
        fault = FAULTS[int(rng.integers(len(FAULTS)))] if rng.random() < fault_rate else None
        good = _plan_json(inst, inst.actions)
        first = _plan_json(inst, inject_fault(inst.actions, fault, c)) if fault else good
        faulty_count += fault is not None
        if reviewer:
            script = [first] + ([good] if fault else []) + [f"Scene {k}: {inst.task}"]
            res = run_supervision(inst.task, inst.scene, ScriptedBackend(script), None, templates, c, p,
                                  clock=lambda: 0.0)
            final_raw = res.plan_raw
        else:
            final_raw = first
        plan = parse_vlm_plan(final_raw)
        outcome = run_plan(inst.scene, plan, inst.goal(), c)
        outcomes.append(outcome)
        locs.extend(_localizations(plan, inst.scene))
        rouge.append(rouge_l(plan.actions, inst.actions))
        rows.append({"run": k, "fault": fault, "success": outcome.success, "executed": outcome.executed,
                     "reason": outcome.reason})
    report = EvalReport(miou(locs) if locs else 0.0, float(np.mean(rouge)), executability(outcomes),
                        tsr(outcomes), runs, {"faulty": faulty_count,
                                              "success": sum(o.success for o in outcomes)})
    return report, rows

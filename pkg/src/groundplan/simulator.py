"""Kinematic desk-scale simulator for the move_to/grasp/release/rotate action DSL.

There are no dynamics: the gripper moves along straight lines, grasped
objects follow it, and released objects stay where they were let go.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .constraints import ACTION_ALIASES, ConstraintSet
from .errors import MissingObject, ParseError
from .gateway import VlmPlan

HOOK_OFFSET = (0.0, 0.0, 0.05)
GOAL_TOLERANCE = 0.05


# --------------------------------------------------------------------------- scene

@dataclass
class SceneObject:
    name: str
    position: Optional[Tuple[float, float, float]]
    properties: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_obstacle(self) -> bool:
        return "type" in self.properties

    @property
    def occluded(self) -> bool:
        return self.position is None

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"name": self.name}
        if self.position is not None:
            d["position"] = [float(x) for x in self.position]
        if self.properties:
            d["properties"] = dict(self.properties)
        return d


@dataclass
class SceneModel:
    objects: List[SceneObject] = field(default_factory=list)

    def __post_init__(self):
        names = [o.name for o in self.objects]
        if len(names) != len(set(names)):
            raise ValueError("scene object names must be unique")
        for o in self.objects:
            if o.position is not None:
                o.position = tuple(float(x) for x in o.position)
                if not all(math.isfinite(x) for x in o.position):
                    raise ValueError(f"object {o.name!r} has a non-finite position")

    def get(self, name: str) -> Optional[SceneObject]:
        return next((o for o in self.objects if o.name == name), None)

    def require(self, name: str) -> SceneObject:
        obj = self.get(name)
        if obj is None:
            raise MissingObject(name)
        return obj

    @property
    def obstacles(self) -> List[SceneObject]:
        return [o for o in self.objects if o.is_obstacle]

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d) -> "SceneModel":
        if "scene_description" in d:
            d = d["scene_description"]
        objs = []
        for o in d["objects"]:
            pos = o.get("position")
            objs.append(SceneObject(o["name"], tuple(pos) if pos is not None else None,
                                    dict(o.get("properties", {}))))
        return cls(objs)

    @classmethod
    def from_plan(cls, plan: VlmPlan) -> "SceneModel":
        return cls([SceneObject(o.name, tuple(o.position), dict(o.properties)) for o in plan.objects])

    @classmethod
    def load(cls, path) -> "SceneModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def copy(self) -> "SceneModel":
        return copy.deepcopy(self)


@dataclass
class RobotState:
    gripper: Tuple[float, float, float]
    held: Optional[str] = None
    force: float = 0.0
    orientation: float = 0.0

    def to_dict(self) -> dict:
        return {"gripper": list(self.gripper), "held": self.held, "force": self.force,
                "orientation": self.orientation}


# --------------------------------------------------------------------------- actions

@dataclass(frozen=True)
class MoveTo:
    target: Tuple[float, float, float]


@dataclass(frozen=True)
class Grasp:
    target: Optional[str] = None
    force: Optional[float] = None


@dataclass(frozen=True)
class Release:
    pass


@dataclass(frozen=True)
class Rotate:
    angle: float


@dataclass(frozen=True)
class Analyse:
    """Perception request; no effect on the robot."""


ActionCommand = Union[MoveTo, Grasp, Release, Rotate, Analyse]

_CALL = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*$", re.S)
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_NUM_RE = re.compile(rf"\s*{_NUMBER}\s*$")
_STR_RE = re.compile(r"""\s*(['"])(.*)\1\s*$""", re.S)


def _fmt(x: float) -> str:
    return repr(round(float(x), 6))


def format_action(cmd: ActionCommand) -> str:
    """Canonical DSL text for a command."""
    if isinstance(cmd, MoveTo):
        return "move_to([" + ", ".join(_fmt(x) for x in cmd.target) + "])"
    if isinstance(cmd, Grasp):
        return f"grasp('{cmd.target}')" if cmd.target is not None else f"grasp({_fmt(cmd.force)})"
    if isinstance(cmd, Release):
        return "release()"
    if isinstance(cmd, Rotate):
        return f"rotate({_fmt(cmd.angle)})"
    return "analyse()"


def _numbers(text: str, col: int, what: str) -> List[float]:
    parts = text.split(",")
    out = []
    for part in parts:
        if not _NUM_RE.match(part):
            raise ParseError(f"{what}: expected a decimal number, got {part.strip()!r}", location=col)
        out.append(float(part))
    return out


def function_name(text: str) -> Optional[str]:
    m = _CALL.match(text)
    return m.group(1) if m else None


def parse_action(text: str, known_actions=None) -> ActionCommand:
    """Parse one DSL step such as ``move_to([0.5, 0.3, 0.2])`` or ``grasp(5)``.

    ``moveTo`` (with bracketed or bare coordinates) and ``analyze`` are
    accepted as aliases. Raises :class:`ParseError` carrying a 1-based column.
    """
    m = _CALL.match(text)
    if not m:
        raise ParseError(f"malformed action {text!r}: expected name(arguments)", location=1)
    raw_name, args = m.group(1), m.group(2)
    name = ACTION_ALIASES.get(raw_name, raw_name)
    known = known_actions if known_actions is not None else ConstraintSet().known_actions
    if name not in known:
        raise ParseError(f"The function '{raw_name}' is not recognized as a valid robotic function.",
                         location=m.start(1) + 1)
    col = m.start(2) + 1
    stripped = args.strip()

    if name == "move_to":
        inner = stripped[1:-1] if stripped.startswith("[") and stripped.endswith("]") else stripped
        vals = _numbers(inner, col, "move_to")
        if len(vals) != 3:
            raise ParseError(f"move_to takes 3 coordinates, got {len(vals)}", location=col)
        return MoveTo(tuple(vals))
    if name == "grasp":
        s = _STR_RE.match(args)
        if s:
            if not s.group(2).strip():
                raise ParseError("grasp target name is empty", location=col)
            return Grasp(target=s.group(2).strip())
        (force,) = _numbers(stripped, col, "grasp") if "," not in stripped else (None,)
        if force is None:
            raise ParseError("grasp takes a single object name or force", location=col)
        if force < 0:
            raise ParseError("grasp force must be non-negative", location=col)
        return Grasp(force=force)
    if name in ("release", "analyse"):
        if stripped:
            raise ParseError(f"{name} takes no arguments", location=col)
        return Release() if name == "release" else Analyse()
    if name == "rotate":
        vals = _numbers(stripped, col, "rotate")
        if len(vals) != 1:
            raise ParseError("rotate takes one angle in degrees", location=col)
        return Rotate(vals[0])
    raise ParseError(f"The function '{raw_name}' is not recognized as a valid robotic function.",
                     location=m.start(1) + 1)


# --------------------------------------------------------------------------- geometry helpers

def segment_samples(a, b, step: float) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
    return a + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)


def path_collisions(start, end, scene: SceneModel, c: ConstraintSet,
                    held: Optional[str] = None) -> List[Tuple[SceneObject, float]]:
    """Obstacles passed closer than ``min_clearance`` on the straight path start->end.

    The held object and obstacles within clearance of either endpoint (the
    objects being approached or left) are exempt.
    """
    samples = segment_samples(start, end, c.path_step)
    hits = []
    for obs in scene.obstacles:
        if obs.name == held or obs.position is None:
            continue
        p = np.asarray(obs.position)
        if (np.linalg.norm(p - np.asarray(start, float)) < c.min_clearance
                or np.linalg.norm(p - np.asarray(end, float)) < c.min_clearance):
            continue
        closest = float(np.min(np.linalg.norm(samples - p, axis=1)))
        if closest < c.min_clearance:
            hits.append((obs, closest))
    return hits


def distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float)))


def resolve_grasp_target(cmd: Grasp, gripper, scene: SceneModel) -> Optional[SceneObject]:
    """Nearest visible object matching the grasp's name (or any object for force-only grasps)."""
    pool = [o for o in scene.objects if o.position is not None]
    if cmd.target is not None:
        exact = [o for o in pool if o.name == cmd.target]
        pool = exact or [o for o in pool if cmd.target.lower() in o.name.lower()]
    if not pool:
        return None
    return min(pool, key=lambda o: (distance(o.position, gripper), o.name))


# --------------------------------------------------------------------------- execution

class StepFailure(Exception):
    REASONS = ("OutOfWorkspace", "Collision", "NothingToGrasp", "OverForce", "NothingHeld")

    def __init__(self, reason: str, message: str = ""):
        assert reason in self.REASONS, reason
        super().__init__(message or reason)
        self.reason = reason


def step(state: RobotState, scene: SceneModel, cmd: ActionCommand,
         c: ConstraintSet) -> Tuple[RobotState, SceneModel]:
    """Apply one command; returns new (state, scene) or raises :class:`StepFailure`."""
    scene = scene.copy()
    state = copy.copy(state)
    if isinstance(cmd, MoveTo):
        if not c.in_workspace(cmd.target):
            raise StepFailure("OutOfWorkspace", f"target {list(cmd.target)} is outside the workspace")
        hits = path_collisions(state.gripper, cmd.target, scene, c, held=state.held)
        if hits:
            obs, d = hits[0]
            raise StepFailure("Collision", f"path passes {d:.3f} m from {obs.name!r}")
        state.gripper = tuple(float(x) for x in cmd.target)
        if state.held is not None:
            scene.require(state.held).position = state.gripper
    elif isinstance(cmd, Grasp):
        if state.held is not None:
            raise StepFailure("NothingToGrasp", f"gripper already holds {state.held!r}")
        target = resolve_grasp_target(cmd, state.gripper, scene)
        if target is None or distance(target.position, state.gripper) > c.reach_tolerance:
            raise StepFailure("NothingToGrasp", "no matching object within reach")
        force = c.default_grip_force if cmd.force is None else cmd.force
        if force > c.force_limit(target.properties):
            raise StepFailure("OverForce", f"{force} N exceeds the {c.force_limit(target.properties)} N limit "
                                           f"for {target.name!r}")
        state.held, state.force = target.name, force
        target.position = state.gripper
    elif isinstance(cmd, Release):
        if state.held is None:
            raise StepFailure("NothingHeld", "release with an empty gripper")
        scene.require(state.held).position = state.gripper
        state.held, state.force = None, 0.0
    elif isinstance(cmd, Rotate):
        state.orientation = state.orientation + math.radians(cmd.angle)
    return state, scene


@dataclass
class GoalPredicate:
    name: str
    check: Callable[[SceneModel, RobotState], bool]

    def __call__(self, scene: SceneModel, state: RobotState) -> bool:
        return bool(self.check(scene, state))


TRUE_GOAL = GoalPredicate("true", lambda scene, state: True)


@dataclass
class Outcome:
    success: bool
    executed: bool
    failed_step: Optional[str] = None
    reason: Optional[str] = None
    message: str = ""
    trace: List[dict] = field(default_factory=list)
    final_scene: Optional[SceneModel] = None
    final_state: Optional[RobotState] = None

    def to_dict(self) -> dict:
        return {"success": self.success, "executed": self.executed, "failed_step": self.failed_step,
                "reason": self.reason, "message": self.message, "trace": self.trace,
                "final_scene": self.final_scene.to_dict() if self.final_scene else None}


def run_plan(scene: SceneModel, plan: VlmPlan, goal: GoalPredicate = TRUE_GOAL,
             c: Optional[ConstraintSet] = None) -> Outcome:
    """Execute ``plan`` step by step; the first parse error or step failure aborts.

    ``executed`` is true when every step parsed and ran; ``success`` also
    needs ``goal`` to hold on the final state.
    """
    c = c or ConstraintSet()
    state = RobotState(tuple(c.home))
    trace: List[dict] = []
    for n, s in enumerate(plan.steps, start=1):
        try:
            cmd = parse_action(s.action, c.known_actions)
            state, scene = step(state, scene, cmd, c)
        except ParseError as exc:
            trace.append({"n": n, "command": s.action, "state_after": state.to_dict(), "result": "ParseError"})
            return Outcome(False, False, s.step_id, "ParseError", str(exc), trace, scene, state)
        except StepFailure as exc:
            trace.append({"n": n, "command": s.action, "state_after": state.to_dict(), "result": exc.reason})
            return Outcome(False, False, s.step_id, exc.reason, str(exc), trace, scene, state)
        trace.append({"n": n, "command": format_action(cmd), "state_after": state.to_dict(), "result": "ok"})
    ok = goal(scene, state)
    return Outcome(ok, True, None, None if ok else "GoalNotMet", "" if ok else f"goal {goal.name!r} not met",
                   trace, scene, state)


# --------------------------------------------------------------------------- goals

def _placed_near(scene: SceneModel, state: RobotState, name: str, target, tol: float) -> bool:
    obj = scene.require(name)
    return state.held != name and obj.position is not None and distance(obj.position, target) <= tol


def builtin_goals(task_id: int, scene: SceneModel, target=None, stand_target=None,
                  maps_to: int = 1, headphone: str = "headphone", stand: str = "stand",
                  hook_offset=HOOK_OFFSET, tol: float = GOAL_TOLERANCE) -> GoalPredicate:
    """Terminal predicates for the four headphone tasks.

    1: headphone hung on the stand's hook; 2: headphone placed at ``target``;
    3: stand moved to ``stand_target`` and headphone hung on it;
    4: a high-level instruction resolved to task ``maps_to``.
    """
    scene.require(headphone)
    scene.require(stand)
    hook = np.asarray(hook_offset, float)

    def hung(sc: SceneModel, st: RobotState) -> bool:
        stand_pos = sc.require(stand).position
        return stand_pos is not None and _placed_near(sc, st, headphone, np.asarray(stand_pos) + hook, tol)

    if task_id == 1:
        return GoalPredicate("task1_hang", hung)
    if task_id == 2:
        if target is None:
            raise ValueError("task 2 needs a target position")
        return GoalPredicate("task2_place", lambda sc, st: _placed_near(sc, st, headphone, target, tol))
    if task_id == 3:
        if stand_target is None:
            raise ValueError("task 3 needs a stand target position")
        return GoalPredicate("task3_move_and_hang",
                             lambda sc, st: _placed_near(sc, st, stand, stand_target, tol) and hung(sc, st))
    if task_id == 4:
        if maps_to not in (1, 2, 3):
            raise ValueError("task 4 must resolve to task 1, 2 or 3")
        inner = builtin_goals(maps_to, scene, target, stand_target, 1, headphone, stand, hook_offset, tol)
        return GoalPredicate(f"task4_via_{inner.name}", inner.check)
    raise ValueError(f"unknown task id {task_id}")

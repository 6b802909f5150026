"""Closed-loop plan supervision.

A reviewer (the deterministic rule set below, or any chat backend speaking
the SLM review schema) checks each VLM plan and sends a correction prompt
back until the plan is accepted or the iteration budget runs out.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from .constraints import ConstraintSet
from .errors import ArchiveError, EmptyHistory, ParseError, SchemaError
from .gateway import (ChatMessage, PromptTemplate, SlmReview, Suggestion, VlmPlan, load_template,
                      parse_slm_review, parse_vlm_plan, render_template)
from .simulator import (Analyse, Grasp, MoveTo, Release, SceneModel, distance, format_action,
                        function_name, parse_action, path_collisions, resolve_grasp_target)

logger = logging.getLogger(__name__)

PARSE_ERROR = "ParseError"
CONSTRAINT_VIOLATION = "ConstraintViolation"
LOGICAL_ERROR = "LogicalError"
PARAMETER_ERROR = "ParameterError"
CATEGORIES = (PARSE_ERROR, CONSTRAINT_VIOLATION, LOGICAL_ERROR, PARAMETER_ERROR)
SEVERITY = {c: i for i, c in enumerate(CATEGORIES)}
SUGGESTION_CONFIDENCE = {PARAMETER_ERROR: 0.9, LOGICAL_ERROR: 0.8, CONSTRAINT_VIOLATION: 0.85, PARSE_ERROR: 0.95}


@dataclass(frozen=True)
class Issue:
    category: str
    step_id: Optional[str]
    description: str
    suggested_fix: Optional[str] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown issue category {self.category!r}")

    @property
    def key(self) -> Tuple[str, Optional[str], str]:
        return (self.category, self.step_id, self.description)

    def to_dict(self) -> dict:
        return {"category": self.category, "step_id": self.step_id,
                "description": self.description, "suggested_fix": self.suggested_fix}

    @classmethod
    def from_dict(cls, d) -> "Issue":
        return cls(d["category"], d.get("step_id"), d["description"], d.get("suggested_fix"))


@dataclass
class PlanCheck:
    issues: List[Issue] = field(default_factory=list)
    # Non-blocking findings; each one lowers an accepted plan's confidence.
    warnings: List[Issue] = field(default_factory=list)


def _step_num(step_id) -> Tuple[int, str]:
    try:
        return (int(step_id), "")
    except (TypeError, ValueError):
        return (10 ** 9, str(step_id))


def _vec(p) -> str:
    return "[" + ", ".join(f"{float(x):g}" for x in p) + "]"


def check_plan(plan: VlmPlan, scene: SceneModel, c: Optional[ConstraintSet] = None) -> PlanCheck:
    """Run every validation rule over ``plan`` and collect issues and warnings.

    Rules per step, in order: known action name, argument shape, workspace
    bounds, grip force, sequence logic (reach, holding state) and obstacle
    clearance of the straight-line path. The gripper is tracked symbolically
    from ``c.home``. A grasp that follows an ``analyse()`` perception step
    has its reach demoted to a warning because its approach point was
    computed at run time rather than taken from the scene.
    """
    c = c or ConstraintSet()
    out = PlanCheck()
    issues, warnings = out.issues, out.warnings

    for obj in plan.objects:
        if not c.in_workspace(obj.position):
            issues.append(Issue(PARAMETER_ERROR, None,
                                f"Object '{obj.name}' at {_vec(obj.position)} lies outside the workspace.",
                                f"Re-localize '{obj.name}'; positions must lie within the safe zone [0, 1]."))
        truth = scene.get(obj.name)
        if truth is not None and truth.occluded:
            issues.append(Issue(PARAMETER_ERROR, None,
                                f"The location of '{obj.name}' is missing from the scene description (occluded).",
                                f"Capture a new view or re-measure the position of '{obj.name}' before planning."))

    gripper = tuple(c.home)
    held: Optional[str] = None
    perception_pending = False
    last_step: Optional[str] = None
    for s in plan.steps:
        last_step = s.step_id
        try:
            cmd = parse_action(s.action, c.known_actions)
        except ParseError as exc:
            issues.append(_parse_issue(s.step_id, s.action, str(exc)))
            continue

        if isinstance(cmd, MoveTo):
            if not c.in_workspace(cmd.target):
                clamped = [min(max(x, lo), hi) for x, (lo, hi) in zip(cmd.target, c.bounds)]
                issues.append(Issue(PARAMETER_ERROR, s.step_id,
                                    f"Target {_vec(cmd.target)} in step {s.step_id} is outside the workspace.",
                                    f"Keep step {s.step_id} inside the safe zone, e.g. "
                                    f"'{format_action(MoveTo(tuple(clamped)))}'."))
            for obs, d in path_collisions(gripper, cmd.target, scene, c, held=held):
                issues.append(Issue(CONSTRAINT_VIOLATION, s.step_id,
                                    f"The path in step {s.step_id} passes {d:.3f} m from '{obs.name}' at "
                                    f"{_vec(obs.position)}, below the {c.min_clearance:g} m clearance.",
                                    f"Insert a waypoint before step {s.step_id} so the path keeps at least "
                                    f"{c.min_clearance:g} m from '{obs.name}'."))
            gripper = tuple(cmd.target)

        elif isinstance(cmd, Grasp):
            target = resolve_grasp_target(cmd, gripper, scene)
            if target is None:
                occluded = cmd.target is not None and scene.get(cmd.target) is not None
                if occluded:
                    if plan.object(cmd.target) is None:
                        issues.append(Issue(PARAMETER_ERROR, s.step_id,
                                            f"The location of '{cmd.target}' is missing from the scene "
                                            f"description (occluded).",
                                            f"Re-measure the position of '{cmd.target}' before step {s.step_id}."))
                    held = cmd.target
                else:
                    what = f"'{cmd.target}'" if cmd.target else "any object"
                    issues.append(Issue(LOGICAL_ERROR, s.step_id,
                                        f"Step {s.step_id} grasps {what}, which is not in the scene.",
                                        f"Grasp an object listed in the scene description in step {s.step_id}."))
            else:
                force = c.default_grip_force if cmd.force is None else cmd.force
                limit = c.force_limit(target.properties)
                if force > limit and limit < c.max_grip_force:
                    issues.append(Issue(CONSTRAINT_VIOLATION, s.step_id,
                                        f"The grasp force of {force:g}N is above the recommended threshold "
                                        f"for the {target.name}.",
                                        f"Reduce the grasp force in step {s.step_id} to {limit:g}N to avoid "
                                        f"damaging the {target.name}."))
                elif force > c.max_grip_force:
                    issues.append(Issue(PARAMETER_ERROR, s.step_id,
                                        f"The grasp force of {force:g}N exceeds the maximum gripping force of "
                                        f"{c.max_grip_force:g}N.",
                                        f"Reduce the grasp force in step {s.step_id} to at most {limit:g}N."))
                if held is not None:
                    issues.append(Issue(LOGICAL_ERROR, s.step_id,
                                        f"Step {s.step_id} grasps while already holding '{held}'.",
                                        f"Release '{held}' before the grasp in step {s.step_id}."))
                gap = distance(target.position, gripper)
                if gap > c.reach_tolerance:
                    reach = Issue(LOGICAL_ERROR, s.step_id,
                                  f"The gripper is {gap:.3f} m from '{target.name}' when grasping in step "
                                  f"{s.step_id} (reach tolerance {c.reach_tolerance:g} m).",
                                  f"Move to '{target.name}' with '{format_action(MoveTo(target.position))}' "
                                  f"before the grasp in step {s.step_id}.")
                    (warnings if perception_pending else issues).append(reach)
                held = target.name
            perception_pending = False

        elif isinstance(cmd, Release):
            if held is None:
                issues.append(Issue(LOGICAL_ERROR, s.step_id,
                                    f"Step {s.step_id} releases, but the gripper holds nothing.",
                                    f"Grasp an object before the release in step {s.step_id}, or remove it."))
            held = None

        elif isinstance(cmd, Analyse):
            perception_pending = True

    if held is not None:
        issues.append(Issue(LOGICAL_ERROR, last_step,
                            f"The plan ends while still holding '{held}'.",
                            f"Add a 'release()' step after step {last_step} to put down '{held}'."))
    return out


def _parse_issue(step_id, action: str, message: str) -> Issue:
    name = function_name(action)
    fix = f"Replace '{action}' in step {step_id} with one of move_to, grasp, release, rotate."
    if name is not None:
        try:
            args = action[action.index("(") + 1:action.rindex(")")].strip().strip("[]")
            nums = [float(x) for x in args.split(",")]
        except ValueError:
            nums = []
        if len(nums) == 3 and name not in ("move_to", "moveTo"):
            fix = (f"Replace '{action}' with '{format_action(MoveTo(tuple(nums)))}' in step {step_id} "
                   f"to ensure the action is executable.")
    return Issue(PARSE_ERROR, step_id, message, fix)


def validate_plan(plan: VlmPlan, scene: SceneModel, c: Optional[ConstraintSet] = None) -> List[Issue]:
    return check_plan(plan, scene, c).issues


def validate_raw(raw: str, scene: SceneModel, c: Optional[ConstraintSet] = None) -> Tuple[Optional[VlmPlan], PlanCheck]:
    """Parse then check; a plan that does not parse yields a single ParseError issue."""
    try:
        plan = parse_vlm_plan(raw)
    except (ParseError, SchemaError) as exc:
        return None, PlanCheck([Issue(PARSE_ERROR, None, f"VLM output could not be parsed: {exc}",
                                      "Return a single JSON object in the required output format.")])
    return plan, check_plan(plan, scene, c)


# --------------------------------------------------------------------------- feedback records

@dataclass
class FeedbackRecord:
    iteration: int
    accept_flag: int
    confidence: float
    issues: List[Issue]
    suggestions: List[Suggestion]
    prompt_for_vlm: str
    feedback: str = ""

    def __post_init__(self):
        if self.accept_flag not in (0, 1):
            raise ValueError("accept_flag must be 0 or 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.accept_flag == 1 and self.issues:
            raise ValueError("an accepted record cannot carry issues")

    def to_review(self) -> SlmReview:
        details = [{"step_id": i.step_id, "issue": i.description, "recommendation": i.suggested_fix or ""}
                   for i in self.issues]
        return SlmReview(self.feedback, list(self.suggestions), self.confidence, self.prompt_for_vlm,
                         self.accept_flag, details)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "accept_flag": self.accept_flag, "confidence": self.confidence,
                "issues": [i.to_dict() for i in self.issues],
                "suggestions": [s.to_dict() for s in self.suggestions],
                "prompt_for_vlm": self.prompt_for_vlm, "feedback": self.feedback}


@dataclass
class FeedbackHistory:
    records: List[FeedbackRecord] = field(default_factory=list)
    # (iteration, issue key) for every issue surfaced as the single adjustment of a round.
    adjustments: List[Tuple[int, Tuple]] = field(default_factory=list)

    def append(self, record: FeedbackRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("history iterations must strictly increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def issued_suggestions(self) -> set:
        return {s.text for r in self.records for s in r.suggestions}

    def adjusted(self) -> set:
        return {key for _, key in self.adjustments}

    def summary_lines(self) -> List[str]:
        lines = []
        for r in self.records:
            for s in r.suggestions:
                lines.append(f"Round {r.iteration}: {s.text}")
        return lines

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records],
                "adjustments": [[n, list(k)] for n, k in self.adjustments]}


def single_dimension_adjust(issues: Sequence[Issue], history: FeedbackHistory) -> Issue:
    """Choose the one issue to fix this round.

    Order: category severity, then step number; issues already surfaced in
    earlier rounds are skipped unless nothing else is left.
    """
    if not issues:
        raise ValueError("no issues to choose from")
    ranked = sorted(issues, key=lambda i: (SEVERITY[i.category], _step_num(i.step_id)))
    done = history.adjusted()
    fresh = [i for i in ranked if i.key not in done]
    return (fresh or ranked)[0]


@dataclass(frozen=True)
class LoopParams:
    n_max: int = 5
    tau: float = 0.8

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


def _history_text(history: FeedbackHistory) -> str:
    lines = history.summary_lines()
    return "\n".join(f"- {line}" for line in lines) if lines else "- none"


def rule_based_review(task: str, template: Optional[PromptTemplate], history: FeedbackHistory,
                      plan, scene: SceneModel, c: Optional[ConstraintSet] = None,
                      p: Optional[LoopParams] = None, iteration: Optional[int] = None) -> FeedbackRecord:
    """Deterministic stand-in for the SLM reviewer.

    ``plan`` may be a parsed :class:`VlmPlan` or raw response text. ``template``
    is the correction template used for the prompt back to the VLM.
    """
    template = template or load_template("correction")
    n = iteration if iteration is not None else (history.records[-1].iteration + 1 if history.records else 1)
    if isinstance(plan, VlmPlan):
        check = check_plan(plan, scene, c)
    else:
        _, check = validate_raw(plan, scene, c)

    if not check.issues:
        conf = max(0.5, 1.0 - 0.1 * len(check.warnings))
        note = "No blocking issues found."
        if check.warnings:
            note += " Warnings: " + " ".join(w.description for w in check.warnings)
        return FeedbackRecord(n, 1, round(conf, 10), [], [], "", note)

    issued = history.issued_suggestions()
    suggestions, seen = [], set()
    for issue in sorted(check.issues, key=lambda i: (_step_num(i.step_id), SEVERITY[i.category])):
        text = issue.suggested_fix or issue.description
        if text in issued or text in seen:
            continue
        seen.add(text)
        suggestions.append(Suggestion(chr(ord("A") + len(suggestions)) if len(suggestions) < 26
                                      else str(len(suggestions) + 1),
                                      text, SUGGESTION_CONFIDENCE[issue.category]))

    chosen = single_dimension_adjust(check.issues, history)
    history.adjustments.append((n, chosen.key))
    prompt = render_template(template, {
        "ISSUE": f"{chosen.category} in step {chosen.step_id}: {chosen.description}"
                 if chosen.step_id is not None else f"{chosen.category}: {chosen.description}",
        "SUGGESTION": chosen.suggested_fix or "Resolve the issue above.",
        "HISTORY": _history_text(history),
    })
    feedback = " ".join(i.description for i in check.issues)
    return FeedbackRecord(n, 0, max(0.0, round(1.0 - 0.2 * len(check.issues), 10)),
                          list(check.issues), suggestions, prompt, feedback)


def fallback(history: FeedbackHistory, template: Optional[PromptTemplate] = None) -> str:
    """Correction prompt for the least confident suggestion on record (earliest on ties)."""
    if not history.records:
        raise EmptyHistory("fallback needs at least one feedback record")
    template = template or load_template("correction")
    best = None
    for r in history.records:
        for s in r.suggestions:
            if best is None or s.confidence < best[1].confidence:
                best = (r, s)
    if best is None:
        r = min(history.records, key=lambda rec: rec.confidence)
        issue = r.issues[0].description if r.issues else r.feedback or "the plan was not accepted"
        suggestion = r.prompt_for_vlm or "Re-check every step against the robot constraints."
    else:
        r, s = best
        issue = f"lowest-confidence correction from round {r.iteration} (confidence {s.confidence:g})"
        suggestion = f"\"{s.text}\""
    return render_template(template, {"ISSUE": issue, "SUGGESTION": suggestion, "HISTORY": _history_text(history)})


# --------------------------------------------------------------------------- archive

@dataclass
class SessionArchive:
    scenario_info: str
    task_info: str
    control_code: str
    outcome: str
    started_at: float
    finished_at: float
    iterations: int = 0
    id: Optional[int] = None

    def __post_init__(self):
        if self.outcome not in ("success", "human_intervention"):
            raise ValueError(f"invalid outcome {self.outcome!r}")
        if self.outcome == "success" and not self.control_code:
            raise ValueError("a successful session must archive control code")

    def to_dict(self) -> dict:
        return {"id": self.id, "scenario_info": self.scenario_info, "task_info": self.task_info,
                "control_code": self.control_code, "outcome": self.outcome,
                "started_at": self.started_at, "finished_at": self.finished_at, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d) -> "SessionArchive":
        return cls(d["scenario_info"], d["task_info"], d["control_code"], d["outcome"],
                   d["started_at"], d["finished_at"], d.get("iterations", 0), d.get("id"))


def _archive_line(d: dict) -> str:
    return json.dumps(d, sort_keys=True, ensure_ascii=False)


def archive_write(a: SessionArchive, store_path) -> int:
    """Append ``a`` to a JSONL archive under an exclusive lock; returns its id (1-based)."""
    path = Path(store_path)
    try:
        with open(path, "a+", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.seek(0)
                last = 0
                for line in fh:
                    if line.strip():
                        last = max(last, int(json.loads(line)["id"]))
                a.id = last + 1
                fh.seek(0, os.SEEK_END)
                fh.write(_archive_line(a.to_dict()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
    except (OSError, ValueError, KeyError) as exc:
        raise ArchiveError(f"cannot append to archive {path}: {exc}") from exc
    return a.id


def archive_read(store_path, archive_id: int) -> SessionArchive:
    return SessionArchive.from_dict(json.loads(archive_read_line(store_path, archive_id)))


def archive_read_line(store_path, archive_id: int) -> str:
    """Raw JSONL line (without newline) for ``archive_id``."""
    try:
        with open(store_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip() and json.loads(line)["id"] == archive_id:
                    return line.rstrip("\n")
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {store_path}: {exc}") from exc
    raise KeyError(archive_id)


# --------------------------------------------------------------------------- the loop

@dataclass
class Templates:
    vlm: PromptTemplate = field(default_factory=lambda: load_template("direct"))
    slm: PromptTemplate = field(default_factory=lambda: load_template("slm"))
    correction: PromptTemplate = field(default_factory=lambda: load_template("correction"))
    describe: PromptTemplate = field(default_factory=lambda: load_template("describe"))


@dataclass
class SupervisionResult:
    archive: SessionArchive
    history: FeedbackHistory
    plan: Optional[VlmPlan]
    plan_raw: str
    slm_queries: int
    fallback_used: bool
    transcript: List[dict] = field(default_factory=list)


def _classify(text: str) -> str:
    t = text.lower()
    if "not recognized" in t or "undefined" in t or "parse" in t:
        return PARSE_ERROR
    if "force" in t or "clearance" in t or "collision" in t or "obstacle" in t:
        return CONSTRAINT_VIOLATION
    if "workspace" in t or "range" in t or "coordinate" in t:
        return PARAMETER_ERROR
    return LOGICAL_ERROR


def record_from_review(review: SlmReview, iteration: int) -> FeedbackRecord:
    """Map an SLM backend review onto a feedback record."""
    issues = []
    if not review.accept_flag:
        for d in review.details:
            text = str(d.get("issue", d.get("description", "")))
            issues.append(Issue(_classify(text), str(d["step_id"]) if d.get("step_id") is not None else None,
                                text, d.get("recommendation")))
        if not issues:
            issues.append(Issue(_classify(review.feedback), None, review.feedback or "rejected by reviewer"))
    return FeedbackRecord(iteration, review.accept_flag, review.confidence, issues,
                          list(review.suggestions), review.prompt_for_vlm, review.feedback)


def run_supervision(task: str, scene: SceneModel, vlm, slm=None, templates: Optional[Templates] = None,
                    c: Optional[ConstraintSet] = None, p: Optional[LoopParams] = None,
                    initial_prompt: Optional[str] = None, archive_path=None,
                    clock: Callable[[], float] = time.time) -> SupervisionResult:
    """Review/regenerate until acceptance or the budget is spent.

    Each round reviews the current plan first and then tests acceptance
    (``confidence > tau`` and flag set). After ``n_max`` rejected rounds one
    fallback prompt is sent for the lowest-confidence suggestion; if the
    regenerated plan is still rejected the session ends with
    ``human_intervention``. At most ``n_max + 1`` reviews happen.
    ``slm=None`` selects the rule-based reviewer.
    """
    templates = templates or Templates()
    c = c or ConstraintSet()
    p = p or LoopParams()
    started = clock()
    history = FeedbackHistory()
    transcript: List[dict] = []

    prompt = initial_prompt if initial_prompt is not None else render_template(
        templates.vlm, {"T": task, "MARKERS": _scene_markers(scene), "FEEDBACK": "none"})
    raw = vlm.send_chat([ChatMessage("user", prompt)])
    transcript.append({"role": "vlm", "prompt": prompt, "response": raw})
    n, queries, fallback_used = 1, 0, False

    while True:
        if slm is None:
            record = rule_based_review(task, templates.correction, history, raw, scene, c, p, iteration=n)
        else:
            slm_prompt = render_template(templates.slm, {
                "T": json.dumps(task), "PT": json.dumps(templates.vlm.name),
                "R": raw, "H": json.dumps(history.summary_lines())})
            reply = slm.send_chat([ChatMessage("user", slm_prompt)])
            transcript.append({"role": "slm", "prompt": slm_prompt, "response": reply})
            try:
                record = record_from_review(parse_slm_review(reply), n)
            except (ParseError, SchemaError) as exc:
                record = FeedbackRecord(n, 0, 0.0, [Issue(PARSE_ERROR, None, f"unreadable review: {exc}")],
                                        [], "", "reviewer output could not be parsed")
        queries += 1
        history.append(record)

        if record.accept_flag == 1 and record.confidence > p.tau:
            plan = _try_parse(raw)
            describe = render_template(templates.describe, {"T": task, "R": raw})
            scenario = vlm.send_chat([ChatMessage("user", describe)])
            transcript.append({"role": "vlm", "prompt": describe, "response": scenario})
            code = "\n".join(plan.actions) if plan is not None else raw
            archive = SessionArchive(scenario, task, code, "success", started, clock(), n)
            if archive_path is not None:
                archive_write(archive, archive_path)
            return SupervisionResult(archive, history, plan, raw, queries, fallback_used, transcript)

        if n >= p.n_max:
            if fallback_used:
                break
            fallback_used = True
            prompt = fallback(history, templates.correction)
        else:
            prompt = record.prompt_for_vlm or fallback(history, templates.correction)
        raw = vlm.send_chat([ChatMessage("user", prompt)])
        transcript.append({"role": "vlm", "prompt": prompt, "response": raw})
        n += 1

    plan = _try_parse(raw)
    archive = SessionArchive(json.dumps(scene.to_dict(), sort_keys=True), task,
                             "\n".join(plan.actions) if plan is not None else "",
                             "human_intervention", started, clock(), n)
    if archive_path is not None:
        archive_write(archive, archive_path)
    return SupervisionResult(archive, history, plan, raw, queries, fallback_used, transcript)


def _try_parse(raw: str) -> Optional[VlmPlan]:
    try:
        return parse_vlm_plan(raw)
    except (ParseError, SchemaError):
        return None


def _scene_markers(scene: SceneModel) -> str:
    lines = [f"{o.name}: {_vec(o.position)}" for o in scene.objects if o.position is not None]
    return "\n".join(lines) if lines else "none"

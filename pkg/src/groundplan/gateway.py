"""Model backends, prompt templates and strict parsing of plan/review JSON."""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import requests

from .errors import BackendError, MissingPlaceholder, ParseError, SchemaError, ScriptExhausted

logger = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"\{([A-Z][A-Z0-9_]*)\}")
DEFAULT_TOKEN_ENV = "GROUNDPLAN_API_TOKEN"


# --------------------------------------------------------------------------- templates

@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> List[str]:
        seen = []
        for m in PLACEHOLDER.finditer(self.body):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return seen


def load_template(name_or_path) -> PromptTemplate:
    """Load a bundled template by name (``direct``, ``iterative``, ``slm``, ...) or a file path."""
    p = Path(str(name_or_path))
    if p.suffix == ".txt" and p.exists():
        return PromptTemplate(p.stem, p.read_text(encoding="utf-8"))
    asset = resources.files("groundplan") / "assets" / f"{name_or_path}.txt"
    if not asset.is_file():
        raise FileNotFoundError(f"no bundled template named {name_or_path!r}")
    return PromptTemplate(str(name_or_path), asset.read_text(encoding="utf-8"))


def render_template(t: PromptTemplate, bindings: Mapping[str, Any]) -> str:
    """Substitute every ``{NAME}`` placeholder in one pass.

    Substituted text is never rescanned, so bindings may themselves contain braces.
    """
    for name in t.placeholders:
        if name not in bindings or bindings[name] is None:
            raise MissingPlaceholder(name)
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), t.body)


# --------------------------------------------------------------------------- chat backends

@dataclass
class ChatMessage:
    role: str
    content: str
    image: Optional[bytes] = None
    media_type: str = "image/png"

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"invalid chat role {self.role!r}")

    def to_wire(self) -> dict:
        if self.image is None:
            return {"role": self.role, "content": self.content}
        url = f"data:{self.media_type};base64,{base64.b64encode(self.image).decode('ascii')}"
        return {"role": self.role, "content": [
            {"type": "text", "text": self.content},
            {"type": "image_url", "image_url": {"url": url}},
        ]}


@dataclass
class ModelBackendConfig:
    kind: str = "scripted"
    base_url: str = ""
    model: str = ""
    temperature: float = 0.0
    timeout: float = 60.0
    script: Optional[str] = None
    token_env: str = DEFAULT_TOKEN_ENV

    def __post_init__(self):
        if self.kind not in ("http", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.base_url and self.model):
            raise ValueError("http backend needs base_url and model")
        if self.kind == "scripted" and not self.script:
            raise ValueError("scripted backend needs a script path")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelBackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


class ScriptedBackend:
    """Replays canned responses, one per call.

    Script files are JSONL: a line holding a JSON string yields that string,
    any other JSON value yields its compact serialization, and a line that is
    not JSON is returned verbatim.
    """

    def __init__(self, responses: Sequence[str]):
        self._responses = list(responses)
        self._cursor = 0
        self._lock = threading.Lock()
        self.calls: List[List[ChatMessage]] = []

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise BackendError(f"cannot read script {path}: {exc}") from exc
        return cls([_script_line(line) for line in text.splitlines() if line.strip()])

    @property
    def remaining(self) -> int:
        return len(self._responses) - self._cursor

    def send_chat(self, messages: Sequence[ChatMessage]) -> str:
        with self._lock:
            if self._cursor >= len(self._responses):
                raise ScriptExhausted(f"script exhausted after {len(self._responses)} responses")
            out = self._responses[self._cursor]
            self._cursor += 1
            self.calls.append(list(messages))
        return out


def _script_line(line: str) -> str:
    try:
        value = json.loads(line)
    except json.JSONDecodeError:
        return line.rstrip("\n")
    return value if isinstance(value, str) else json.dumps(value)


class HttpBackend:
    """Chat-completions style HTTP endpoint (``choices[0].message.content``)."""

    def __init__(self, cfg: ModelBackendConfig, session: Optional[requests.Session] = None):
        self.cfg = cfg
        self._session = session or requests.Session()

    def send_chat(self, messages: Sequence[ChatMessage]) -> str:
        payload = {"model": self.cfg.model, "messages": [m.to_wire() for m in messages],
                   "temperature": self.cfg.temperature}
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._session.post(self.cfg.base_url, json=payload, headers=headers,
                                      timeout=self.cfg.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"request to {self.cfg.base_url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"{self.cfg.base_url} returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion response: {exc}") from exc
        if not isinstance(content, str):
            raise BackendError("chat completion content is not text")
        return content


def make_backend(cfg: ModelBackendConfig):
    if cfg.kind == "scripted":
        return ScriptedBackend.from_file(cfg.script)
    return HttpBackend(cfg)


def send_chat(backend, messages: Sequence[ChatMessage]) -> str:
    """Send ``messages`` through a backend instance or a :class:`ModelBackendConfig`."""
    if isinstance(backend, ModelBackendConfig):
        backend = make_backend(backend)
    return backend.send_chat(messages)


# --------------------------------------------------------------------------- VLM plans

@dataclass
class PlanObject:
    name: str
    position: tuple
    properties: Dict[str, Any] = field(default_factory=dict)


@dataclass
class TaskStep:
    step_id: str
    action: str
    description: str = ""


@dataclass
class VlmPlan:
    objects: List[PlanObject] = field(default_factory=list)
    steps: List[TaskStep] = field(default_factory=list)
    issues: List[Dict[str, Any]] = field(default_factory=list)
    flag: str = "incomplete"
    roi: Optional[Dict[str, Any]] = None
    capture: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.flag == "complete"

    @property
    def actions(self) -> List[str]:
        return [s.action for s in self.steps]

    def object(self, name: str) -> Optional[PlanObject]:
        return next((o for o in self.objects if o.name == name), None)

    def to_dict(self) -> dict:
        objs = []
        for o in self.objects:
            d = {"name": o.name, "position": list(o.position)}
            if o.properties:
                d["properties"] = dict(o.properties)
            objs.append(d)
        steps = []
        for s in self.steps:
            d = {"step_id": s.step_id, "action": s.action}
            if s.description:
                d["description"] = s.description
            steps.append(d)
        out = dict(self.extra)
        out.update({"scene_description": {"objects": objs}, "task_steps": steps,
                    "issues": [dict(i) for i in self.issues], "flag": self.flag})
        if self.roi is not None:
            out["roi"] = self.roi
        if self.capture:
            out["capture"] = True
        return out

    def to_json(self, indent=None) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _loads(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                         location=(exc.lineno, exc.colno)) from exc


def _finite_vec(value, n: int, where: str) -> tuple:
    if (not isinstance(value, list) or len(value) != n
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
            or not all(math.isfinite(x) for x in value)):
        raise SchemaError(f"{where} must be a list of {n} finite numbers", field=where)
    return tuple(float(x) for x in value)


def _parse_roi(value) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise SchemaError("roi must be an object", field="roi")
    center = _finite_vec(value.get("center"), 2, "roi.center")
    extent = _finite_vec(value.get("extent"), 2, "roi.extent")
    return {"center": list(center), "extent": list(extent)}


def parse_vlm_plan(raw: str) -> VlmPlan:
    """Strictly parse a VLM response into a :class:`VlmPlan`.

    Unknown top-level keys survive in ``extra``. A missing ``flag`` reads
    as ``"complete"``; any other value than ``"complete"`` as ``"incomplete"``.
    """
    data = _loads(raw) if isinstance(raw, str) else raw
    if not isinstance(data, dict):
        raise SchemaError("plan must be a JSON object", field="$")
    scene = data.get("scene_description")
    if not isinstance(scene, dict):
        raise SchemaError("missing or invalid scene_description", field="scene_description")
    raw_objects = scene.get("objects")
    if not isinstance(raw_objects, list):
        raise SchemaError("scene_description.objects must be a list", field="scene_description.objects")
    objects = []
    for i, o in enumerate(raw_objects):
        where = f"scene_description.objects[{i}]"
        if not isinstance(o, dict) or not isinstance(o.get("name"), str):
            raise SchemaError(f"{where} needs a string name", field=f"{where}.name")
        props = o.get("properties", {})
        if not isinstance(props, dict):
            raise SchemaError(f"{where}.properties must be an object", field=f"{where}.properties")
        objects.append(PlanObject(o["name"], _finite_vec(o.get("position"), 3, f"{where}.position"), dict(props)))

    raw_steps = data.get("task_steps")
    if not isinstance(raw_steps, list):
        raise SchemaError("missing or invalid task_steps", field="task_steps")
    steps, seen = [], set()
    for i, s in enumerate(raw_steps):
        where = f"task_steps[{i}]"
        if not isinstance(s, dict):
            raise SchemaError(f"{where} must be an object", field=where)
        sid = s.get("step_id")
        if isinstance(sid, int) and not isinstance(sid, bool):
            sid = str(sid)
        if not isinstance(sid, str) or not sid:
            raise SchemaError(f"{where}.step_id must be a non-empty string", field=f"{where}.step_id")
        if sid in seen:
            raise SchemaError(f"duplicate step_id {sid!r}", field=f"{where}.step_id")
        seen.add(sid)
        if not isinstance(s.get("action"), str):
            raise SchemaError(f"{where}.action must be a string", field=f"{where}.action")
        desc = s.get("description", "")
        steps.append(TaskStep(sid, s["action"], desc if isinstance(desc, str) else str(desc)))

    issues = data.get("issues", [])
    if not isinstance(issues, list) or not all(isinstance(i, dict) for i in issues):
        raise SchemaError("issues must be a list of objects", field="issues")
    for i, issue in enumerate(issues):
        if not isinstance(issue.get("description"), str):
            raise SchemaError(f"issues[{i}].description must be a string", field=f"issues[{i}].description")

    # Single-shot outputs carry no flag at all; they are final by construction.
    flag = "complete" if data.get("flag", "complete") == "complete" else "incomplete"
    roi = _parse_roi(data["roi"]) if "roi" in data and data["roi"] is not None else None
    known = {"scene_description", "task_steps", "issues", "flag", "roi", "capture"}
    extra = {k: v for k, v in data.items() if k not in known}
    return VlmPlan(objects, steps, [dict(i) for i in issues], flag, roi, bool(data.get("capture", False)), extra)


# --------------------------------------------------------------------------- SLM reviews

@dataclass
class Suggestion:
    id: str
    text: str
    confidence: float

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "confidence": self.confidence}


@dataclass
class SlmReview:
    feedback: str
    suggestions: List[Suggestion]
    confidence: float
    prompt_for_vlm: str
    accept_flag: int = 0
    details: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Serialize in the reviewer output layout."""
        fb: Dict[str, Any] = {"Description": self.feedback}
        if self.details:
            fb["Details"] = [dict(d) for d in self.details]
        return {
            "Feedback": fb,
            "Suggestions": [s.to_dict() for s in self.suggestions],
            "Confidence": {"Value": self.confidence},
            "Prompt for VLM": {"Command": self.prompt_for_vlm},
            "Flag": self.accept_flag,
        }

    def to_json(self, indent=None) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _norm_key(key: str) -> str:
    return re.sub(r"[^a-z0-9]", "", key.lower())


def _normalized(d: Mapping) -> Dict[str, Any]:
    return {_norm_key(k): v for k, v in d.items()}


def _unit_interval(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x) or not 0 <= x <= 1:
        raise SchemaError(f"{where} must be a number in [0, 1], got {x!r}", field=where)
    return float(x)


def parse_slm_review(raw: str) -> SlmReview:
    """Parse an SLM review. Keys match case- and punctuation-insensitively."""
    data = _loads(raw) if isinstance(raw, str) else raw
    if not isinstance(data, dict):
        raise SchemaError("review must be a JSON object", field="$")
    d = _normalized(data)

    fb = d.get("feedback")
    details: List[Dict[str, Any]] = []
    if isinstance(fb, dict):
        nfb = _normalized(fb)
        feedback = nfb.get("description", "")
        raw_details = nfb.get("details", [])
        if not isinstance(raw_details, list) or not all(isinstance(x, dict) for x in raw_details):
            raise SchemaError("Feedback.Details must be a list of objects", field="Feedback.Details")
        details = [dict(x) for x in raw_details]
    elif isinstance(fb, list) and all(isinstance(x, str) for x in fb):
        feedback = "\n".join(fb)
    elif isinstance(fb, str):
        feedback = fb
    else:
        raise SchemaError("missing or invalid Feedback", field="Feedback")
    if not isinstance(feedback, str):
        raise SchemaError("Feedback description must be text", field="Feedback")

    raw_sugg = d.get("suggestions", [])
    if not isinstance(raw_sugg, list):
        raise SchemaError("Suggestions must be a list", field="Suggestions")
    suggestions = []
    for i, s in enumerate(raw_sugg):
        if not isinstance(s, dict):
            raise SchemaError(f"Suggestions[{i}] must be an object", field=f"Suggestions[{i}]")
        ns = _normalized(s)
        if not isinstance(ns.get("text"), str):
            raise SchemaError(f"Suggestions[{i}].text must be text", field=f"Suggestions[{i}].text")
        sid = ns.get("id", chr(ord("A") + i) if i < 26 else str(i + 1))
        suggestions.append(Suggestion(str(sid), ns["text"],
                                      _unit_interval(ns.get("confidence"), f"Suggestions[{i}].confidence")))

    conf = d.get("confidence")
    if isinstance(conf, dict):
        conf = _normalized(conf).get("value")
    confidence = _unit_interval(conf, "Confidence")

    prompt = d.get("promptforvlm", "")
    if isinstance(prompt, dict):
        prompt = _normalized(prompt).get("command", "")
    if not isinstance(prompt, str):
        raise SchemaError("Prompt for VLM must be text", field="Prompt for VLM")

    flag = d.get("flag", d.get("acceptflag", d.get("accept", 0)))
    if flag in (True, 1, "1", "accept", "accepted", "complete"):
        accept = 1
    elif flag in (False, 0, "0", "reject", "rejected", "incomplete", None):
        accept = 0
    else:
        raise SchemaError(f"invalid accept flag {flag!r}", field="Flag")
    return SlmReview(feedback, suggestions, confidence, prompt, accept, details)

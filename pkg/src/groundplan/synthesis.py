"""2D prompt synthesis: mark reliable 3D points on the image and refine the VLM's ROI."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .confidence import ScoredPoint
from .errors import EmptyMask, MaxIterationsExceeded, MissingPlaceholder, NoCandidates, NoRoi, OutOfBounds
from .gateway import ChatMessage, PromptTemplate, VlmPlan, render_template
from .geometry import Pixel
from .preprocess import LabelMask

logger = logging.getLogger(__name__)

MARKER_RADIUS = 4
MARKER_COLOR = (255, 0, 0)
DEFAULT_NN = 4


@dataclass(frozen=True)
class Marker:
    label: str
    pixel: Pixel
    position: tuple
    confidence: float
    mask_id: int = 0
    name: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label, "pixel": [self.pixel.u, self.pixel.v], "position": list(self.position),
                "confidence": self.confidence, "mask_id": self.mask_id, "name": self.name}


@dataclass
class AnnotatedImage:
    image: np.ndarray
    markers: List[Marker] = field(default_factory=list)

    def marker_text(self) -> str:
        if not self.markers:
            return "none"
        return "\n".join(f"{m.name or f'object_{m.mask_id}'}: {m.label}" for m in self.markers)


@dataclass(frozen=True)
class RoiBox:
    center: Pixel
    half_extent: Tuple[float, float]

    def __post_init__(self):
        if self.half_extent[0] < 0 or self.half_extent[1] < 0:
            raise ValueError("ROI extent must be non-negative")

    def contains(self, px) -> bool:
        return (abs(px[0] - self.center.u) <= self.half_extent[0]
                and abs(px[1] - self.center.v) <= self.half_extent[1])

    def to_dict(self) -> dict:
        return {"center": [self.center.u, self.center.v], "extent": list(self.half_extent)}


@dataclass(frozen=True)
class ConvergenceParams:
    epsilon: float = 2.0
    max_iter: int = 5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class PromptState:
    iteration: int
    text: str
    task: str
    template: PromptTemplate
    markers: str = "none"
    responses: Tuple[str, ...] = ()
    roi: Optional[RoiBox] = None
    feedback: str = "none"


# --------------------------------------------------------------------------- nearest-neighbor marking

def mask_centroid(mask: LabelMask, k_id: int) -> Pixel:
    v, u = np.nonzero(mask.labels == k_id)
    if len(u) == 0:
        raise EmptyMask(f"mask id {k_id} has no pixels")
    return Pixel(float(u.mean()), float(v.mean()))


def _pixel_dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def nearest_candidates(centroid, scored: Sequence[ScoredPoint], k: int = DEFAULT_NN) -> List[ScoredPoint]:
    """The ``k`` points projecting closest to ``centroid`` (ties: lower point index first)."""
    if not scored:
        raise NoCandidates("no scored points")
    pts = np.array([[s.pixel.u, s.pixel.v] for s in scored])
    d = np.hypot(pts[:, 0] - centroid[0], pts[:, 1] - centroid[1])
    idx = np.array([s.point_index for s in scored])
    order = np.lexsort((idx, d))
    return [scored[i] for i in order[:k]]


def select_reliable(candidates: Sequence[ScoredPoint]) -> ScoredPoint:
    if not candidates:
        raise NoCandidates("no candidate points")
    return min(candidates, key=lambda s: (-s.confidence, s.point_index))


def coordinate_label(position) -> str:
    return "[" + ", ".join(f"{float(x):.3f}" for x in position) + "]"


def annotate(image: np.ndarray, selections: Iterable[Tuple[int, ScoredPoint]],
             names: Optional[Mapping[int, str]] = None, radius: int = MARKER_RADIUS) -> AnnotatedImage:
    """Draw a filled red disk at each selected point and record its marker.

    The input array is not modified. Markers come back sorted by mask id.
    """
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    markers = []
    for mask_id, sp in sorted(selections, key=lambda s: s[0]):
        u, v = sp.pixel
        if not (0 <= u < w and 0 <= v < h):
            raise OutOfBounds(f"marker pixel ({u}, {v}) outside a {w}x{h} image")
        disk = (xx - u) ** 2 + (yy - v) ** 2 <= radius ** 2
        out[disk] = MARKER_COLOR
        markers.append(Marker(coordinate_label(sp.position), Pixel(float(u), float(v)), tuple(sp.position),
                              sp.confidence, int(mask_id), (names or {}).get(mask_id, "")))
    return AnnotatedImage(out, markers)


def select_markers(mask: LabelMask, scored: Sequence[ScoredPoint], k: int = DEFAULT_NN) -> List[Tuple[int, ScoredPoint]]:
    """Centroid -> nearest candidates -> most confident point, for every mask id."""
    out = []
    for mid in mask.ids():
        c = mask_centroid(mask, mid)
        out.append((mid, select_reliable(nearest_candidates(c, scored, k))))
    return out


# --------------------------------------------------------------------------- prompting

def _bindings(state_like: dict) -> dict:
    return {"T": state_like["task"], "MARKERS": state_like["markers"], "FEEDBACK": state_like["feedback"],
            "H": state_like["history"], "ROI": state_like["roi"]}


def build_initial_prompt(task: str, template: PromptTemplate, annotated: Optional[AnnotatedImage] = None,
                         feedback: str = "none") -> PromptState:
    if "T" in template.placeholders and not (task or "").strip():
        raise MissingPlaceholder("T")
    markers = annotated.marker_text() if annotated is not None else "none"
    text = render_template(template, _bindings({"task": task, "markers": markers, "feedback": feedback,
                                                "history": "none", "roi": "none"}))
    return PromptState(1, text, task, template, markers, (), None, feedback)


def update_prompt(state: PromptState, response_raw: str, roi: Optional[RoiBox]) -> PromptState:
    """Next prompt: same template, with the latest response appended to history and its ROI."""
    responses = state.responses + (response_raw,)
    history = "\n".join(f"<Iteration {i}>: {r}" for i, r in enumerate(responses, start=1))
    roi_text = json.dumps(roi.to_dict()) if roi is not None else "none"
    text = render_template(state.template, _bindings({"task": state.task, "markers": state.markers,
                                                      "feedback": state.feedback, "history": history,
                                                      "roi": roi_text}))
    return replace(state, iteration=state.iteration + 1, text=text, responses=responses, roi=roi)


def _response_dict(response) -> dict:
    if isinstance(response, VlmPlan):
        return {"roi": response.roi, "flag": response.flag, "capture": response.capture}
    if isinstance(response, Mapping):
        return dict(response)
    try:
        data = json.loads(response)
    except (TypeError, json.JSONDecodeError) as exc:
        raise NoRoi(f"response is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise NoRoi("response is not a JSON object")
    return data


def extract_roi(response) -> RoiBox:
    roi = _response_dict(response).get("roi")
    if not isinstance(roi, Mapping):
        raise NoRoi("response has no roi object")
    try:
        cu, cv = (float(x) for x in roi["center"])
        w, h = (float(x) for x in roi["extent"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NoRoi(f"malformed roi: {exc}") from exc
    if not all(math.isfinite(x) for x in (cu, cv, w, h)) or w < 0 or h < 0:
        raise NoRoi("roi values must be finite with non-negative extent")
    return RoiBox(Pixel(cu, cv), (w, h))


def response_flag(response) -> bool:
    try:
        return _response_dict(response).get("flag") == "complete"
    except NoRoi:
        return False


def optimal_depth(roi: RoiBox, scored: Sequence[ScoredPoint]) -> ScoredPoint:
    """Most confident point projecting inside ``roi``; nearest to its center if none do."""
    if not scored:
        raise NoCandidates("no scored points")
    inside = [s for s in scored if roi.contains(s.pixel)]
    if inside:
        return select_reliable(inside)
    return min(scored, key=lambda s: (_pixel_dist(s.pixel, roi.center), s.point_index))


def converged(prev: Optional[RoiBox], cur: RoiBox, flag: bool, p: ConvergenceParams) -> bool:
    if prev is None:
        return False
    return _pixel_dist(prev.center, cur.center) < p.epsilon and bool(flag)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def run_interactive(task: str, frames: Iterable, backend, scored_fn: Callable[[object], Sequence[ScoredPoint]],
                    p: ConvergenceParams, template: PromptTemplate,
                    annotated: Optional[AnnotatedImage] = None) -> Tuple[ScoredPoint, List[dict]]:
    """Iterative ROI refinement against a VLM backend.

    Each round sends the prompt (with the current frame attached), reads the
    ROI, picks the most confident point inside it and re-renders the
    prompt. A new frame is pulled only when the response sets
    ``"capture": true``. Stops once the ROI center moves less than
    ``epsilon`` and the response is flagged complete; raises
    :class:`MaxIterationsExceeded` (carrying the last selection) otherwise.
    """
    it: Iterator = iter(frames)
    try:
        frame = next(it)
    except StopIteration:
        raise ValueError("run_interactive needs at least one frame") from None
    scored = scored_fn(frame)
    state = build_initial_prompt(task, template, annotated)
    transcript: List[dict] = []
    prev_roi: Optional[RoiBox] = None
    best: Optional[ScoredPoint] = None

    for _ in range(p.max_iter):
        image = encode_png(frame) if isinstance(frame, np.ndarray) and frame.ndim == 3 else None
        raw = backend.send_chat([ChatMessage("user", state.text, image=image)])
        roi = extract_roi(raw)
        best = optimal_depth(roi, scored)
        transcript.append({"n": state.iteration, "prompt": state.text, "response_raw": raw,
                           "roi": roi.to_dict(), "selected_point": best.to_dict()})
        if converged(prev_roi, roi, response_flag(raw), p):
            return best, transcript
        if _response_dict(raw).get("capture"):
            try:
                frame = next(it)
                scored = scored_fn(frame)
            except StopIteration:
                logger.warning("capture requested but the frame source is exhausted; reusing last frame")
        prev_roi = roi
        state = update_prompt(state, raw, roi)
    raise MaxIterationsExceeded(f"no convergence within {p.max_iter} iterations", best=best, transcript=transcript)

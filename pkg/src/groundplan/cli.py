"""Command-line entry point: ``groundplan <command> --config pipeline.json``.

Exit codes: 0 success, 2 configuration or input error, 3 model backend
error, 4 task failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import jsonutil
from .confidence import TaskKind, WeightProfile, score_cloud, weight_profile_for_task
from .constraints import ConstraintSet
from .errors import (BackendError, ConfigError, GroundPlanError, MaxIterationsExceeded, ParseError,
                     SchemaError)
from .evaluation import export_dataset, evaluate_task1, generate_corpus
from .gateway import (ChatMessage, ModelBackendConfig, PromptTemplate, load_template, make_backend,
                      parse_vlm_plan)
from .geometry import Pixel, load_calibration
from .io import read_cloud, read_depth, read_image, read_mask, write_image
from .preprocess import (DEFAULT_ANGLE_TOL, DEFAULT_INLIER_DIST, DEFAULT_UP, DEFAULT_VOXEL, PointCloud,
                         cone_cell_partition, downsample, filter_depth, remove_ground_cells)
from .simulator import SceneModel, builtin_goals, run_plan
from .supervision import LoopParams, Templates, run_supervision
from .synthesis import (AnnotatedImage, ConvergenceParams, Marker, annotate, build_initial_prompt,
                        coordinate_label, run_interactive, select_markers)

logger = logging.getLogger("groundplan")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_TASK = 0, 2, 3, 4
INPUT_PATHS = ("calibration", "cloud", "depth", "mask", "image", "scene", "plan")
DEFAULT_COMPOSITION = (240, 320, 1500, 1500)  # bridge, custom, augmented positive, augmented negative

_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TaskFailure(GroundPlanError):
    """The pipeline ran but the task was not accomplished."""


def interpolate_env(value: Any, env=None) -> Any:
    """Replace ``${NAME}`` in every string of a parsed config."""
    env = os.environ if env is None else env
    if isinstance(value, str):
        def sub(m):
            if m.group(1) not in env:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return env[m.group(1)]
        return _ENV.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    return value


@dataclass
class PipelineConfig:
    paths: Dict[str, Any] = field(default_factory=dict)
    vlm: Optional[ModelBackendConfig] = None
    slm: Optional[ModelBackendConfig] = None
    weights: WeightProfile = field(default_factory=WeightProfile)
    convergence: ConvergenceParams = field(default_factory=ConvergenceParams)
    loop: LoopParams = field(default_factory=LoopParams)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    seed: int = 0
    task: str = ""
    fuse: Dict[str, Any] = field(default_factory=dict)
    mask_names: Dict[int, str] = field(default_factory=dict)
    goal: Dict[str, Any] = field(default_factory=dict)
    eval: Dict[str, Any] = field(default_factory=dict)
    templates: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Dict[str, Any], base: Path = Path(".")) -> "PipelineConfig":
        d = interpolate_env(d)
        try:
            paths = {}
            for key, value in d.get("paths", {}).items():
                if isinstance(value, list):
                    paths[key] = [str(base / v) for v in value]
                else:
                    paths[key] = str(base / value)
            for key in INPUT_PATHS:
                if key in paths and not Path(paths[key]).exists():
                    raise ConfigError(f"paths.{key}: {paths[key]} does not exist")
            for key in paths.get("frames", []):
                if not Path(key).exists():
                    raise ConfigError(f"paths.frames: {key} does not exist")

            def backend(name):
                raw = d.get(name)
                if raw is None:
                    return None
                raw = dict(raw)
                if raw.get("script"):
                    raw["script"] = str(base / raw["script"])
                    if not Path(raw["script"]).exists():
                        raise ConfigError(f"{name}.script: {raw['script']} does not exist")
                return ModelBackendConfig.from_dict(raw)

            if "weights" in d:
                weights = WeightProfile(**d["weights"])
            else:
                weights = weight_profile_for_task(TaskKind(d.get("task_kind", "Balanced")))
            templates = {k: (v if "/" not in v and not v.endswith(".txt") else str(base / v))
                         for k, v in d.get("templates", {}).items()}
            return cls(
                paths=paths, vlm=backend("vlm"), slm=backend("slm"), weights=weights,
                convergence=ConvergenceParams(**d.get("convergence", {})),
                loop=LoopParams(**d.get("loop", {})),
                constraints=ConstraintSet.from_dict(d.get("constraints", {})),
                seed=int(d.get("seed", 0)), task=str(d.get("task", "")), fuse=dict(d.get("fuse", {})),
                mask_names={int(k): v for k, v in d.get("mask_names", {}).items()},
                goal=dict(d.get("goal", {})), eval=dict(d.get("eval", {})), templates=templates)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data, p.parent)

    def need(self, *keys: str) -> List[str]:
        missing = [k for k in keys if k not in self.paths]
        if missing:
            raise ConfigError("missing paths: " + ", ".join(missing))
        return [self.paths[k] for k in keys]

    def template(self, role: str, default: str) -> PromptTemplate:
        return load_template(self.templates.get(role, default))

    def backend(self, role: str):
        cfg = getattr(self, role)
        if cfg is None:
            raise ConfigError(f"no {role} backend configured")
        return make_backend(cfg)


def _clock():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        value = float(epoch)
        return lambda: value
    return time.time


def _emit(obj: Any, out: Optional[str]) -> None:
    if out:
        jsonutil.dump(obj, out)
    else:
        sys.stdout.write(jsonutil.dumps(obj, indent=2) + "\n")


# --------------------------------------------------------------------------- pipeline steps

def fuse(cfg: PipelineConfig):
    calib, cloud_path, depth_path, mask_path = cfg.need("calibration", "cloud", "depth", "mask")
    k, t = load_calibration(calib)
    cloud = read_cloud(cloud_path)
    f = cfg.fuse
    cloud = downsample(cloud, float(f.get("voxel", DEFAULT_VOXEL)))
    if f.get("remove_ground", True) and len(cloud):
        cells = cone_cell_partition(cloud, k, t, int(f.get("n_az", 8)), int(f.get("n_el", 4)))
        kept = remove_ground_cells(cloud, cells, angle_tol=float(f.get("angle_tol", DEFAULT_ANGLE_TOL)),
                                   inlier_dist=float(f.get("inlier_dist", DEFAULT_INLIER_DIST)),
                                   up=tuple(f.get("up", DEFAULT_UP)))
        cloud = PointCloud(cloud.points[kept])
    depth = filter_depth(read_depth(depth_path), int(f.get("median_window", 3)))
    mask = read_mask(mask_path)
    scored = score_cloud(cloud, mask, depth, None, k, t, cfg.weights, knn=int(f.get("knn", 16)))
    logger.info("scored %d points", len(scored))
    return scored, mask


def annotated_image(cfg: PipelineConfig):
    scored, mask = fuse(cfg)
    (image_path,) = cfg.need("image")
    image = read_image(image_path)
    sel = select_markers(mask, scored) if scored else []
    return annotate(image, sel, cfg.mask_names), scored


def _scene_markers(scene: SceneModel) -> AnnotatedImage:
    # Marker text straight from a scene file, when no sensor data is configured.
    marks = [Marker(coordinate_label(o.position), Pixel(0.0, 0.0), tuple(o.position), 1.0, i + 1, o.name)
             for i, o in enumerate(scene.objects) if o.position is not None]
    return AnnotatedImage(np.zeros((1, 1, 3), np.uint8), marks)


# --------------------------------------------------------------------------- commands

def cmd_fuse(cfg: PipelineConfig, args) -> int:
    scored, _ = fuse(cfg)
    _emit([s.to_dict() for s in scored], args.output)
    return EXIT_OK


def cmd_annotate(cfg: PipelineConfig, args) -> int:
    ann, _ = annotated_image(cfg)
    out = args.output or cfg.paths.get("annotated")
    if not out:
        raise ConfigError("annotate needs --output or paths.annotated")
    write_image(out, ann.image)
    _emit([m.to_dict() for m in ann.markers], args.markers)
    return EXIT_OK


def cmd_plan(cfg: PipelineConfig, args) -> int:
    vlm = cfg.backend("vlm")
    if args.strategy == "direct":
        if all(k in cfg.paths for k in ("calibration", "cloud", "depth", "mask", "image")):
            ann, _ = annotated_image(cfg)
        elif "scene" in cfg.paths:
            ann = _scene_markers(SceneModel.load(cfg.paths["scene"]))
        else:
            ann = None
        state = build_initial_prompt(cfg.task, cfg.template("vlm", "direct"), ann)
        raw = vlm.send_chat([ChatMessage("user", state.text)])
        transcript = [{"n": 1, "prompt": state.text, "response_raw": raw}]
        result: Dict[str, Any] = {}
    else:
        ann, scored = annotated_image(cfg)
        frames = [read_image(p) for p in cfg.paths.get("frames", [])] or [ann.image]
        try:
            best, transcript = run_interactive(cfg.task, frames, vlm, lambda frame: scored, cfg.convergence,
                                               cfg.template("vlm", "iterative"), ann)
        except MaxIterationsExceeded as exc:
            _write_transcript(args.transcript, exc.transcript)
            raise
        raw = transcript[-1]["response_raw"]
        result = {"selected_point": best.to_dict()}
    _write_transcript(args.transcript, transcript)
    try:
        result["plan"] = parse_vlm_plan(raw).to_dict()
    except (ParseError, SchemaError) as exc:
        raise TaskFailure(f"VLM response is not a valid plan: {exc}") from exc
    _emit(result["plan"] if args.strategy == "direct" else result, args.output)
    return EXIT_OK


def _write_transcript(path: Optional[str], transcript) -> None:
    if path:
        jsonutil.dump(transcript, path)


def cmd_supervise(cfg: PipelineConfig, args) -> int:
    (scene_path,) = cfg.need("scene")
    if not cfg.task.strip():
        raise ConfigError("supervise needs a task description")
    scene = SceneModel.load(scene_path)
    templates = Templates(vlm=cfg.template("vlm", "direct"), slm=cfg.template("slm", "slm"),
                          correction=cfg.template("correction", "correction"),
                          describe=cfg.template("describe", "describe"))
    slm = make_backend(cfg.slm) if cfg.slm is not None else None
    res = run_supervision(cfg.task, scene, cfg.backend("vlm"), slm, templates, cfg.constraints, cfg.loop,
                          archive_path=cfg.paths.get("archive"), clock=_clock())
    _write_transcript(args.transcript, res.transcript)
    _emit(res.archive.to_dict(), args.output)
    return EXIT_OK if res.archive.outcome == "success" else EXIT_TASK


def cmd_simulate(cfg: PipelineConfig, args) -> int:
    scene_path, plan_path = cfg.need("scene", "plan")
    scene = SceneModel.load(scene_path)
    try:
        plan = parse_vlm_plan(Path(plan_path).read_text(encoding="utf-8"))
    except (ParseError, SchemaError) as exc:
        raise ConfigError(f"{plan_path}: {exc}") from exc
    g = cfg.goal
    goal = builtin_goals(args.task, scene, g.get("target"), g.get("stand_target"), int(g.get("maps_to", 1)),
                         g.get("headphone", "headphone"), g.get("stand", "headphone_stand"),
                         tuple(g.get("hook_offset", (0.0, 0.0, 0.05))), float(g.get("tol", 0.05)))
    outcome = run_plan(scene, plan, goal, cfg.constraints)
    _emit(outcome.to_dict(), args.output)
    return EXIT_OK if outcome.success else EXIT_TASK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    if args.runs < 1:
        raise ConfigError("--runs must be at least 1")
    report, _ = evaluate_task1(args.runs, cfg.seed, bool(cfg.eval.get("reviewer", True)),
                               float(cfg.eval.get("fault_rate", 0.0)), cfg.constraints, cfg.loop)
    _emit(report.to_dict(), args.output)
    return EXIT_OK


def composition(count: Optional[int]):
    """Sample counts (bridge, custom, augmented positive, augmented negative) for ``count`` samples."""
    if count is None:
        return DEFAULT_COMPOSITION
    if count < 0:
        raise ConfigError("--count must be non-negative")
    total = sum(DEFAULT_COMPOSITION)
    bridge, custom, _, neg = (int(round(x * count / total)) for x in DEFAULT_COMPOSITION)
    return bridge, custom, count - bridge - custom - neg, neg


def cmd_augment(cfg: PipelineConfig, args) -> int:
    out = args.output or cfg.paths.get("dataset")
    if not out:
        raise ConfigError("augment needs --output or paths.dataset")
    samples = generate_corpus(cfg.seed, *composition(args.count), c=cfg.constraints)
    n = export_dataset(samples, out)
    sys.stdout.write(jsonutil.dumps({"written": n, "path": out}) + "\n")
    return EXIT_OK


COMMANDS = {"fuse": cmd_fuse, "annotate": cmd_annotate, "plan": cmd_plan, "supervise": cmd_supervise,
            "simulate": cmd_simulate, "eval": cmd_eval, "augment": cmd_augment}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groundplan", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("-o", "--output", help="output path (default: stdout)")
        return p

    add("fuse", "score fused camera/LiDAR points")
    add("annotate", "mark the most reliable point of every mask").add_argument(
        "--markers", help="marker JSON path (default: stdout)")
    p = add("plan", "query the VLM for a task plan")
    p.add_argument("--strategy", choices=("direct", "iterative"), default="direct")
    p.add_argument("--transcript", help="write the prompt/response transcript here")
    add("supervise", "run the supervised planning loop").add_argument("--transcript")
    add("simulate", "execute a plan in the kinematic simulator").add_argument(
        "--task", type=int, choices=(1, 2, 3, 4), required=True)
    add("eval", "task-1 evaluation over seeded scene perturbations").add_argument(
        "--runs", type=int, default=50)
    add("augment", "generate the reviewer dataset").add_argument("--count", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config)
        return COMMANDS[args.command](cfg, args)
    except BackendError as exc:
        logger.error("backend error: %s", exc)
        return EXIT_BACKEND
    except (TaskFailure, MaxIterationsExceeded) as exc:
        logger.error("task failed: %s", exc)
        return EXIT_TASK
    except (GroundPlanError, OSError, ValueError, KeyError, TypeError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

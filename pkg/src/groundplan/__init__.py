"""3D-grounded robot task planning.

Camera/LiDAR points are scored by an entropy-based confidence, the most
reliable ones are drawn onto the image as coordinate markers for a
vision-language model, and the model's plan is checked by a supervisor
before it reaches the (simulated) robot.
"""

from .confidence import ScoredPoint, WeightProfile, confidence_score, norm_entropy, score_cloud
from .constraints import ConstraintSet
from .errors import GroundPlanError
from .gateway import ScriptedBackend, VlmPlan, load_template, parse_slm_review, parse_vlm_plan
from .geometry import CameraIntrinsics, Pixel, RigidTransform, project_point
from .simulator import SceneModel, run_plan
from .supervision import LoopParams, run_supervision, validate_plan
from .synthesis import ConvergenceParams, annotate, run_interactive

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "ConstraintSet", "ConvergenceParams", "GroundPlanError", "LoopParams", "Pixel",
    "RigidTransform", "SceneModel", "ScoredPoint", "ScriptedBackend", "VlmPlan", "WeightProfile",
    "annotate", "confidence_score", "load_template", "norm_entropy", "parse_slm_review", "parse_vlm_plan",
    "project_point", "run_interactive", "run_plan", "run_supervision", "score_cloud", "validate_plan",
]

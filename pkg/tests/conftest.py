import json
from pathlib import Path

import numpy as np
import pytest

from groundplan.geometry import CameraIntrinsics, RigidTransform, rotation_about_axis

FIXTURES = Path(__file__).parent / "fixtures"


def reference_vlm_raw() -> str:
    # The reference output is stored without its outer braces.
    return "{" + (FIXTURES / "example_vlm_output.txt").read_text() + "}"


def reference_slm_raw() -> str:
    return (FIXTURES / "example_slm_output.txt").read_text()


def corrected_reference_raw() -> str:
    d = json.loads(reference_vlm_raw())
    d["task_steps"][2]["action"] = "move_to([0.5, 0.3, 0.2])"
    d["task_steps"][3]["action"] = "grasp(5)"
    d["task_steps"][4]["action"] = "move_to([0.4, 0.3, 0.5])"
    return json.dumps(d)


def random_transform(rng: np.random.Generator) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform.from_rt(rotation_about_axis(axis, rng.uniform(-np.pi, np.pi)), rng.normal(size=3))


@pytest.fixture
def cam():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def small_cam():
    return CameraIntrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)


@pytest.fixture
def vlm_raw():
    return reference_vlm_raw()


@pytest.fixture
def slm_raw():
    return reference_slm_raw()


def reference_scene():
    from groundplan.gateway import parse_vlm_plan
    from groundplan.simulator import SceneModel
    return SceneModel.from_plan(parse_vlm_plan(reference_vlm_raw()))


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

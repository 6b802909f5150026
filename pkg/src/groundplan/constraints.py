"""Robot operating limits shared by the plan validator and the simulator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import FrozenSet, Tuple

ACTION_ALIASES = {"moveTo": "move_to", "analyze": "analyse"}


@dataclass(frozen=True)
class ConstraintSet:
    x_bounds: Tuple[float, float] = (0.0, 1.0)
    y_bounds: Tuple[float, float] = (0.0, 1.0)
    z_bounds: Tuple[float, float] = (0.0, 1.0)
    max_grip_force: float = 10.0
    fragile_max_force: float = 5.0
    min_clearance: float = 0.1
    reach_tolerance: float = 0.05
    default_grip_force: float = 5.0
    path_step: float = 0.01
    home: Tuple[float, float, float] = (0.3, 0.2, 0.5)
    known_actions: FrozenSet[str] = field(
        default_factory=lambda: frozenset({"move_to", "grasp", "release", "rotate", "analyse"}))

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError("workspace bounds need min < max")
        if self.max_grip_force <= 0 or self.fragile_max_force <= 0:
            raise ValueError("force limits must be positive")
        if self.min_clearance < 0 or self.reach_tolerance <= 0 or self.path_step <= 0:
            raise ValueError("distances must be positive")
        if not self.in_workspace(self.home):
            raise ValueError("home position must lie inside the workspace")

    @property
    def bounds(self):
        return (self.x_bounds, self.y_bounds, self.z_bounds)

    def in_workspace(self, p) -> bool:
        return all(lo <= float(x) <= hi for x, (lo, hi) in zip(p, self.bounds))

    def force_limit(self, properties) -> float:
        if str((properties or {}).get("fragility", "")).lower() == "high":
            return min(self.fragile_max_force, self.max_grip_force)
        return self.max_grip_force

    def to_dict(self) -> dict:
        d = asdict(self)
        d["known_actions"] = sorted(self.known_actions)
        return d

    @classmethod
    def from_dict(cls, d) -> "ConstraintSet":
        kw = dict(d)
        for key in ("x_bounds", "y_bounds", "z_bounds", "home"):
            if key in kw:
                kw[key] = tuple(float(x) for x in kw[key])
        if "known_actions" in kw:
            kw["known_actions"] = frozenset(kw["known_actions"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ConstraintSet":
        return cls.from_dict(json.loads(Path(path).read_text()))

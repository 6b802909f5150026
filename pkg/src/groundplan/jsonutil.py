"""Deterministic JSON output: sorted keys and floats rounded to 9 significant digits."""

from __future__ import annotations

import json
import math
from typing import Any

import numpy as np


def _canon(obj: Any) -> Any:
    if isinstance(obj, (bool, type(None), str)):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialize non-finite float {x}")
        r = float(f"{x:.9g}")
        return 0.0 if r == 0 else r
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_canon(v) for v in obj]
    if hasattr(obj, "to_dict"):
        return _canon(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, indent=None) -> str:
    return json.dumps(_canon(obj), sort_keys=True, indent=indent, ensure_ascii=False)


def dump(obj: Any, path, indent=2) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj, indent=indent))
        fh.write("\n")

"""Canonical JSON emission.

All files the planner writes must be byte-identical across runs, so floats
are always rendered with 17 significant digits (enough for exact binary64
round trips) and profile documents use sorted keys.  Plan documents keep
their dicts' insertion order instead, which callers arrange to match the
documented key order.
"""

from __future__ import annotations

import math
from typing import Any


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    s = format(x, ".17g")
    # Keep the token parseable as a JSON number.
    return s


def _emit(obj: Any, out: list[str], sort_keys: bool) -> None:
    if obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append('"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"')
    elif isinstance(obj, dict):
        keys = sorted(obj) if sort_keys else list(obj)
        out.append("{")
        for i, k in enumerate(keys):
            if i:
                out.append(", ")
            _emit(str(k), out, sort_keys)
            out.append(": ")
            _emit(obj[k], out, sort_keys)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(", ")
            _emit(v, out, sort_keys)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_canonical(obj: Any, *, sort_keys: bool) -> str:
    """Render `obj` as a single-line canonical JSON document."""
    out: list[str] = []
    _emit(obj, out, sort_keys)
    out.append("\n")
    return "".join(out)

"""JSON serialization with fixed float formatting.

Floats are written with 17 significant digits so every value round-trips
bit-exactly; output bytes depend only on the payload, never on dict insertion
order or platform repr quirks.
"""

from __future__ import annotations

import json
import math

import numpy as np

__all__ = ["dumps", "dump", "load"]


def _format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite floats are not serializable")
    s = format(x, ".17g")
    # normalize "1" -> "1.0" so floats stay floats on reload
    if "e" not in s and "E" not in s and "." not in s:
        s += ".0"
    return s


def _emit(obj, parts: list, indent: int, level: int) -> None:
    pad = " " * (indent * (level + 1))
    closepad = " " * (indent * level)
    if obj is None or isinstance(obj, bool):
        parts.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts, indent, level)
    elif isinstance(obj, (list, tuple)):
        if not obj:
            parts.append("[]")
            return
        parts.append("[\n")
        for j, item in enumerate(obj):
            parts.append(pad)
            _emit(item, parts, indent, level + 1)
            parts.append(",\n" if j < len(obj) - 1 else "\n")
        parts.append(closepad + "]")
    elif isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        items = sorted(obj.items(), key=lambda kv: kv[0])
        for j, (key, value) in enumerate(items):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be strings, got {type(key)}")
            parts.append(pad + json.dumps(key) + ": ")
            _emit(value, parts, indent, level + 1)
            parts.append(",\n" if j < len(items) - 1 else "\n")
        parts.append(closepad + "}")
    else:
        raise TypeError(f"cannot serialize {type(obj)}")


def dumps(obj, indent: int = 2) -> str:
    parts: list = []
    _emit(obj, parts, indent, 0)
    parts.append("\n")
    return "".join(parts)


def dump(obj, path, indent: int = 2) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj, indent=indent))


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)

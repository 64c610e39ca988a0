"""JSON helpers with exact float round-tripping.

Floats are written with 17 significant digits, which is enough to recover any
IEEE-754 double bit-for-bit.  Output is deterministic (sorted keys where the
caller hands us dicts, fixed separators), so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any

import numpy as np


def format_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    text = format(x, ".17g")
    # keep floats recognisable as floats after a round trip through json
    if all(c not in text for c in ".en"):
        text += ".0"
    return text


def dumps(obj: Any) -> str:
    """Serialize ``obj`` to compact JSON with 17-digit floats."""
    if isinstance(obj, dict):
        parts = (json.dumps(str(k)) + ":" + dumps(v) for k, v in obj.items())
        return "{" + ",".join(parts) + "}"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()

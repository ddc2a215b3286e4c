"""Canonical JSON writer: sorted keys, 17 significant digits, NaN as null.

The stdlib encoder prints the shortest round-trip repr for floats, which is
fine for reading back but gives no control over the textual form; artifacts
must be byte-stable across runs, so the encoding is spelled out here.
"""
import json
import math
from pathlib import Path

import numpy as np


def format_float(x):
    if math.isnan(x) or math.isinf(x):
        return "null"
    s = "%.17g" % x
    if s == "-0":
        s = "0"
    return s


def _encode_finite(arr, out, indent, level):
    """Fast path for finite float arrays; same text as the generic encoder."""
    if arr.ndim == 1:
        out.append("[" + ",".join(["%.17g"] * len(arr)) % tuple(arr.tolist()) + "]")
        return
    if arr.ndim == 2:
        row = "[" + ",".join(["%.17g"] * arr.shape[1]) + "]"
        if indent:
            pad = "\n" + " " * (indent * (level + 1))
            body = pad + ("," + pad).join([row] * len(arr)) + "\n" + " " * (indent * level)
        else:
            body = ",".join([row] * len(arr))
        out.append(("[" + body + "]") % tuple(arr.ravel().tolist()) if len(arr) else "[]")
        return
    if not indent:
        out.append("[")
        for i, row in enumerate(arr):
            if i:
                out.append(",")
            _encode_finite(row, out, 0, 0)
        out.append("]")
        return
    pad = "\n" + " " * (indent * (level + 1))
    out.append("[")
    for i, row in enumerate(arr):
        if i:
            out.append(",")
        out.append(pad)
        _encode_finite(row, out, indent, level + 1)
    out.append("\n" + " " * (indent * level) + "]")


def _encode(obj, out, indent, level):
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append({None: "null", True: "true", False: "false"}[None if obj is None else bool(obj)])
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f" and obj.ndim >= 1 and obj.size and np.all(np.isfinite(obj)):
            _encode_finite(obj + 0.0, out, indent, level)  # + 0.0 turns -0 into 0
        elif obj.dtype.kind == "f" and obj.ndim == 1:
            out.append("[" + ",".join(map(format_float, obj.tolist())) + "]")
        elif obj.dtype.kind in "iu" and obj.ndim == 1:
            out.append("[" + ",".join(map(str, obj.tolist())) + "]")
        else:
            _encode(obj.tolist(), out, indent, level)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        pad = "\n" + " " * (indent * (level + 1)) if indent else ""
        end = "\n" + " " * (indent * level) if indent else ""
        out.append("{")
        for i, key in enumerate(sorted(obj, key=str)):
            if i:
                out.append(",")
            out.append(pad)
            out.append(json.dumps(str(key)))
            out.append(": " if indent else ":")
            _encode(obj[key], out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        # numeric leaves stay on one line to keep files compact
        flat = all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj)
        if flat and all(type(v) is float for v in obj):
            out.append("[" + ",".join(map(format_float, obj)) + "]")
            return
        if not obj or flat or not indent:
            out.append("[")
            for i, v in enumerate(obj):
                if i:
                    out.append(",")
                _encode(v, out, 0, 0)
            out.append("]")
            return
        pad = "\n" + " " * (indent * (level + 1))
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            out.append(pad)
            _encode(v, out, indent, level + 1)
        out.append("\n" + " " * (indent * level) + "]")
    elif hasattr(obj, "to_dict"):
        _encode(obj.to_dict(), out, indent, level)
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent=1):
    out = []
    _encode(obj, out, indent, 0)
    return "".join(out) + "\n"


def dump(obj, path, indent=1):
    Path(path).write_text(dumps(obj, indent), encoding="ascii")


def load(path):
    return json.loads(Path(path).read_text(encoding="ascii"))


def as_float_array(values, shape=None):
    """Inverse of the writer's NaN -> null mapping for numeric arrays."""
    try:
        arr = np.array(values, dtype=float)
    except TypeError:  # nulls present
        arr = np.array(_nan_fill(values), dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def _nan_fill(values):
    if isinstance(values, list):
        return [_nan_fill(v) for v in values]
    return np.nan if values is None else values

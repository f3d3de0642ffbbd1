"""Small serialisation helpers shared by the file outputs."""

import json
import math

import numpy as np

__all__ = ["fmt_float", "to_json", "write_json", "write_rows"]


def fmt_float(x):
    return "%.17g" % x


def to_json(obj, indent=2, _level=0):
    """JSON text with every float written to 17 significant digits.

    Non-finite floats become ``null``.  Key order is preserved so identical
    inputs always give identical bytes.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return fmt_float(x) if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(to_json(v) for v in obj) + "]"
        items = [pad + to_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(obj, path):
    with open(path, "w") as fh:
        fh.write(to_json(obj) + "\n")


def write_rows(path, header, columns, fmts):
    """Write equal-length columns as CSV; ``fmts`` are printf formats per column."""
    cols = [np.asarray(c).reshape(-1) for c in columns]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        if cols and cols[0].size:
            np.savetxt(fh, np.column_stack(cols), fmt=",".join(fmts))

"""Versioned JSON serialization for parameter arrays with exact round-trip.

Schema: {"version": 1, "kind": ..., "shapes": {name: [rows, cols]},
"data": {name: [decimal strings]}}.  Values are written with `repr`, which
round-trips IEEE-754 doubles exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def arrays_to_doc(kind, arrays):
    """Build the JSON document (as a dict) for a {name: 2-D array} mapping."""
    return {
        "version": FORMAT_VERSION,
        "kind": kind,
        "shapes": {name: list(arr.shape) for name, arr in arrays.items()},
        "data": {name: [repr(float(v)) for v in arr.ravel()] for name, arr in arrays.items()},
    }


def doc_to_arrays(doc, kind=None):
    """Inverse of :func:`arrays_to_doc`; validates version and kind."""
    if not isinstance(doc, dict):
        raise DataError("parameter document must be a JSON object")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported parameter document version {doc.get('version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise DataError(f"expected a {kind!r} document, got {doc.get('kind')!r}")
    arrays = {}
    for name, shape in doc["shapes"].items():
        flat = np.array([float(s) for s in doc["data"][name]], dtype=np.float64)
        if flat.size != shape[0] * shape[1]:
            raise DataError(f"array {name!r}: data length does not match shape {shape}")
        arrays[name] = flat.reshape(shape)
    return arrays


def save_arrays(path, kind, arrays):
    with open(path, "w") as fh:
        json.dump(arrays_to_doc(kind, arrays), fh)


def load_arrays(path, kind=None):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    return doc_to_arrays(doc, kind=kind)

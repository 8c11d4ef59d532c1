"""Versioned text format for fitted detectors.

Layout::

    rejectkit-detector 1
    variant <rbfnet|svm|knn|kde>
    param <name> <value>          (zero or more)
    array <name> <dim> [<dim>]    followed by one line per row (1-D: one line)
    ...
    end
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError, UnsupportedVersionError
from .kde import KDEModel
from .knn import KNNModel
from .rbfnet import RBFNetModel
from .svm import SVMRBFModel

MAGIC = "rejectkit-detector"
VERSION = 1


def _fmt(values):
    return " ".join(repr(float(v)) for v in np.ravel(values))


def to_records(model):
    if isinstance(model, RBFNetModel):
        params = {"convention": model.convention.value}
        arrays = {
            "prototypes": model.prototypes,
            "bandwidths": model.bandwidths,
            "out_weights": model.out_weights,
            "out_bias": model.out_bias,
        }
    elif isinstance(model, SVMRBFModel):
        params = {"convention": model.convention.value, "gamma": repr(model.gamma), "C": repr(model.C)}
        arrays = {
            "support_vectors": model.support_vectors,
            "dual_coefs": model.dual_coefs,
            "bias": model.bias,
        }
    elif isinstance(model, KNNModel):
        params = {"k": str(model.k), "classes": str(model.classes)}
        arrays = {"stored_points": model.stored_points, "stored_labels": model.stored_labels}
    elif isinstance(model, KDEModel):
        params = {
            "bandwidth": repr(model.bandwidth),
            "offset": repr(model.offset),
            "scale": repr(model.scale),
            "classes": str(model.n_classes),
        }
        arrays = {f"class_points_{c}": p for c, p in enumerate(model.per_class_points)}
    else:
        raise TypeError(f"unsupported detector type {type(model).__name__}")
    return model.variant, params, arrays


def dumps_detector(model) -> str:
    variant, params, arrays = to_records(model)
    lines = [f"{MAGIC} {VERSION}", f"variant {variant}"]
    lines += [f"param {k} {v}" for k, v in params.items()]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        lines.append(f"array {name} " + " ".join(str(s) for s in arr.shape))
        if arr.ndim == 2:
            lines.extend(_fmt(row) for row in arr)
        else:
            lines.append(_fmt(arr))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_detector(model, path):
    Path(path).write_text(dumps_detector(model))


def loads_detector(text: str):
    lines = text.split("\n")
    offsets = np.cumsum([0] + [len(l.encode()) + 1 for l in lines])
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines) or (pos == len(lines) - 1 and lines[pos] == ""):
            raise ParseError(f"unexpected end of file while reading {what}", int(offsets[min(pos, len(lines) - 1)]))
        pos += 1
        return lines[pos - 1], int(offsets[pos - 1])

    head, off = take("header")
    parts = head.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ParseError("not a detector file", off)
    if parts[1] != str(VERSION):
        raise UnsupportedVersionError(f"unsupported detector version {parts[1]}", off)
    line, off = take("variant")
    if not line.startswith("variant "):
        raise ParseError("missing variant line", off)
    variant = line.split()[1]
    params, arrays = {}, {}
    while True:
        line, off = take("record")
        if line.strip() == "end":
            break
        parts = line.split()
        if parts[:1] == ["param"] and len(parts) == 3:
            params[parts[1]] = parts[2]
        elif parts[:1] == ["array"] and len(parts) in (3, 4):
            try:
                shape = tuple(int(s) for s in parts[2:])
            except ValueError:
                raise ParseError("bad array shape", off) from None
            rows = shape[0] if len(shape) == 2 else 1
            width = shape[1] if len(shape) == 2 else shape[0]
            data = []
            for _ in range(rows):
                row, roff = take(f"array {parts[1]}")
                try:
                    vals = [float(v) for v in row.split()]
                except ValueError:
                    raise ParseError("non-numeric value", roff) from None
                if len(vals) != width:
                    raise ParseError(f"expected {width} values, found {len(vals)}", roff)
                data.append(vals)
            arrays[parts[1]] = np.asarray(data, dtype=np.float64).reshape(shape)
        else:
            raise ParseError(f"unrecognised record {line!r}", off)
    try:
        return _build(variant, params, arrays)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"incomplete {variant} detector: {exc}") from None


def _build(variant, params, arrays):
    if variant == "rbfnet":
        return RBFNetModel(arrays["prototypes"], arrays["bandwidths"], arrays["out_weights"],
                           arrays["out_bias"], params["convention"])
    if variant == "svm":
        return SVMRBFModel(arrays["support_vectors"], arrays["dual_coefs"], arrays["bias"],
                           float(params["gamma"]), float(params["C"]), params["convention"])
    if variant == "knn":
        return KNNModel(int(params["k"]), arrays["stored_points"],
                        arrays["stored_labels"].astype(np.int64), int(params["classes"]))
    if variant == "kde":
        c = int(params["classes"])
        pts = [arrays[f"class_points_{k}"] for k in range(c)]
        return KDEModel(float(params["bandwidth"]), pts, float(params["offset"]), float(params["scale"]))
    raise ParseError(f"unknown detector variant {variant!r}")


def load_detector(path):
    return loads_detector(Path(path).read_text())

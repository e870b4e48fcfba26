"""Lossless JSON round trip for trained models and their knot triples.

Floats go through ``json``'s shortest-repr encoding, which parses back to the
identical double, so a reloaded model reproduces predictions bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .baselines import DarekModel
from .bounds import KnotTriple
from .errors import ModelFileError
from .netcore import KdarekModel, SnrMlp, SplineBlock

SCHEMA = "kdarek/v1"


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def _spline_to_dict(s: SplineBlock):
    return {"n_in": s.n_in, "n_out": s.n_out, "order": s.order, "stride": s.stride, "grids": _arr(s.grids),
            "coeffs": _arr(s.coeffs)}


def _spline_from_dict(d):
    return SplineBlock(d["n_in"], d["n_out"], d["order"], np.array(d["grids"]), stride=d["stride"],
                       coeffs=np.array(d["coeffs"]))


def model_to_dict(model):
    if isinstance(model, KdarekModel):
        return {
            "kind": "kdarek",
            "mlps": [{"widths": m.widths, "caps": m.caps, "weights": [_arr(w) for w in m.weights],
                      "biases": [_arr(b) for b in m.biases]} for m in model.mlps],
            "spline": _spline_to_dict(model.spline),
            "knot_inputs": _arr(model.knot_inputs),
            "knot_targets": _arr(model.knot_targets),
        }
    if isinstance(model, DarekModel):
        return {
            "kind": "darek",
            "layer1": _spline_to_dict(model.layer1),
            "layer2": _spline_to_dict(model.layer2),
            "knot_inputs": _arr(model.knot_inputs),
            "knot_targets": _arr(model.knot_targets),
        }
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_dict(d):
    kind = d.get("kind")
    targets = None if d.get("knot_targets") is None else np.array(d["knot_targets"])
    if kind == "kdarek":
        mlps = [SnrMlp(m["widths"], m["caps"], weights=[np.array(w) for w in m["weights"]],
                       biases=[np.array(b) for b in m["biases"]]) for m in d["mlps"]]
        return KdarekModel(mlps, _spline_from_dict(d["spline"]), np.array(d["knot_inputs"]), targets)
    if kind == "darek":
        return DarekModel(_spline_from_dict(d["layer1"]), _spline_from_dict(d["layer2"]), np.array(d["knot_inputs"]),
                          targets)
    raise ModelFileError(f"unknown model kind {kind!r}")


def triple_to_dict(t: KnotTriple):
    return {"T": _arr(t.T), "Y": _arr(t.Y), "indices": _arr(t.indices), "F": _arr(t.F), "K": _arr(t.K),
            "perms": _arr(t.perms), "E": _arr(t.E)}


def triple_from_dict(d):
    def get(key, dtype=float):
        return None if d.get(key) is None else np.array(d[key], dtype=dtype)

    return KnotTriple(T=get("T"), Y=get("Y"), indices=get("indices", int), F=get("F"), K=get("K"),
                      perms=get("perms", int), E=get("E"))


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_model(path, model, triple: KnotTriple, meta=None):
    doc = {"schema": SCHEMA, "model": model_to_dict(model), "triple": triple_to_dict(triple), "meta": meta or {}}
    Path(path).write_text(dumps(doc), encoding="utf-8", newline="\n")


def load_model(path):
    """``(model, triple, meta)`` from a file written by :func:`save_model`."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ModelFileError(f"model file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ModelFileError(f"{path}:{e.lineno}:{e.colno}: corrupt model file ({e.msg})") from e
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise ModelFileError(f"{path}: expected schema {SCHEMA!r}")
    try:
        return model_from_dict(doc["model"]), triple_from_dict(doc["triple"]), doc.get("meta", {})
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"{path}: malformed model document ({e})") from e

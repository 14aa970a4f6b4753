"""Text document format for instances and built NLPs.

Documents are JSON with one ``format`` discriminator key.  Matrices are
encoded sparse (``{"shape": [r, c], "triplets": [[i, j, value], ...]}``) when
less than 60% filled, dense otherwise.  Floats are emitted with ``repr``
semantics, so write -> read round-trips are bit-exact.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from .model import (
    BilevelProblem,
    ConstraintBlock,
    ModelError,
    Monomial,
    ScalarFunc,
    UpperSet,
)

__all__ = [
    "instance_to_doc",
    "doc_to_instance",
    "dump_instance",
    "load_instance",
    "nlp_to_doc",
    "doc_to_nlp",
    "dump_nlp",
    "load_nlp",
]

_SPARSE_CUTOFF = 0.6


def _encode_matrix(mat: np.ndarray | None) -> dict | None:
    if mat is None:
        return None
    mat = np.asarray(mat, dtype=float)
    nz = np.nonzero(mat)
    if mat.size and len(nz[0]) / mat.size < _SPARSE_CUTOFF:
        triplets = [[int(i), int(j), mat[i, j]] for i, j in zip(*nz)]
        return {"shape": list(mat.shape), "triplets": triplets}
    return {"shape": list(mat.shape), "dense": mat.tolist()}


def _decode_matrix(doc: dict | None) -> np.ndarray | None:
    if doc is None:
        return None
    shape = tuple(doc["shape"])
    if "dense" in doc:
        return np.asarray(doc["dense"], dtype=float).reshape(shape)
    mat = np.zeros(shape)
    for i, j, v in doc["triplets"]:
        mat[int(i), int(j)] = float(v)
    return mat


def _encode_func(f: ScalarFunc) -> dict:
    return {
        "qxx": _encode_matrix(f.qxx),
        "qxy": _encode_matrix(f.qxy),
        "qyy": _encode_matrix(f.qyy),
        "cx": f.cx.tolist(),
        "cy": f.cy.tolist(),
        "c0": f.c0,
        "monomials": [[t.block, t.index, t.degree, t.coeff] for t in f.monomials],
    }


def _decode_func(doc: dict, n: int, m: int) -> ScalarFunc:
    return ScalarFunc(
        n,
        m,
        qxx=_decode_matrix(doc.get("qxx")),
        qxy=_decode_matrix(doc.get("qxy")),
        qyy=_decode_matrix(doc.get("qyy")),
        cx=doc["cx"],
        cy=doc["cy"],
        c0=doc["c0"],
        monomials=[Monomial(b, int(i), int(d), float(c)) for b, i, d, c in doc["monomials"]],
    )


def instance_to_doc(problem: BilevelProblem, meta: dict | None = None) -> dict:
    doc = {
        "format": "bilevel-instance",
        "n": problem.n,
        "m": problem.m,
        "p": problem.p,
        "q": problem.q,
        "l": problem.l,
        "convex_lower": problem.convex_lower,
        "upper_objective": _encode_func(problem.upper_objective),
        "lower_objective": _encode_func(problem.lower_objective),
        "lower_inequalities": [_encode_func(f) for f in problem.lower.inequalities],
        "lower_equalities": [_encode_func(f) for f in problem.lower.equalities],
        "upper_set": {
            "a1": _encode_matrix(problem.upper.a1),
            "b1": problem.upper.b1.tolist(),
            "lb": None if problem.upper.lb is None else problem.upper.lb.tolist(),
            "ub": None if problem.upper.ub is None else problem.upper.ub.tolist(),
        },
        "group": None,
        "seed": None,
    }
    if meta:
        doc.update(meta)
    return doc


def doc_to_instance(doc: dict) -> tuple[BilevelProblem, dict]:
    if doc.get("format") != "bilevel-instance":
        raise ModelError(f"not a bilevel-instance document: {doc.get('format')!r}")
    n, m = int(doc["n"]), int(doc["m"])
    us = doc["upper_set"]
    upper = UpperSet(
        _decode_matrix(us["a1"]),
        us["b1"],
        lb=us.get("lb"),
        ub=us.get("ub"),
    )
    problem = BilevelProblem(
        n=n,
        m=m,
        upper_objective=_decode_func(doc["upper_objective"], n, m),
        lower_objective=_decode_func(doc["lower_objective"], n, m),
        lower=ConstraintBlock(
            [_decode_func(d, n, m) for d in doc["lower_inequalities"]],
            [_decode_func(d, n, m) for d in doc["lower_equalities"]],
        ),
        upper=upper,
        convex_lower=bool(doc.get("convex_lower", True)),
    )
    meta = {k: doc[k] for k in ("group", "seed") if doc.get(k) is not None}
    return problem, meta


def dump_instance(problem: BilevelProblem, path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_doc(problem, meta), fh, indent=1)
        fh.write("\n")


def load_instance(path) -> tuple[BilevelProblem, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return doc_to_instance(json.load(fh))


def nlp_to_doc(nlp) -> dict:
    """Serialize a built NLP as its source instance plus build recipe.

    The row list (tag and sense per row, in documented order) is stored
    explicitly so readers can consume the constraint system without
    rebuilding, while the instance + recipe guarantee bit-exact rebuilds.
    """
    return {
        "format": "single-level-nlp",
        "kind": nlp.kind.name,
        "t": nlp.t,
        "layout": {
            "n": nlp.layout.n,
            "m": nlp.layout.m,
            "p": nlp.layout.p,
            "q": nlp.layout.q,
            "has_z": nlp.layout.has_z,
        },
        "rows": [{"tag": tag, "sense": sense} for tag, sense in zip(nlp.tags, nlp.senses)],
        "problem": instance_to_doc(nlp.problem),
    }


def doc_to_nlp(doc: dict):
    from .reformulate import ReformulationKind, build

    if doc.get("format") != "single-level-nlp":
        raise ModelError(f"not a single-level-nlp document: {doc.get('format')!r}")
    problem, _ = doc_to_instance(doc["problem"])
    nlp = build(problem, ReformulationKind[doc["kind"]], t=doc.get("t"))
    stored = [(r["tag"], r["sense"]) for r in doc["rows"]]
    rebuilt = list(zip(nlp.tags, nlp.senses))
    if stored != rebuilt:
        raise ModelError("stored row metadata does not match the rebuilt NLP")
    return nlp


def dump_nlp(nlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(nlp_to_doc(nlp), fh, indent=1)
        fh.write("\n")


def load_nlp(path):
    with open(path, "r", encoding="utf-8") as fh:
        return doc_to_nlp(json.load(fh))


def load_point(path) -> dict[str, Any]:
    """Read a point file: JSON with ``point`` and optional ``direction``."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "point" not in doc:
        raise ModelError("point file must contain a 'point' array")
    out = {"point": np.asarray(doc["point"], dtype=float)}
    if doc.get("direction") is not None:
        out["direction"] = np.asarray(doc["direction"], dtype=float)
    if doc.get("kind") is not None:
        out["kind"] = str(doc["kind"])
    return out

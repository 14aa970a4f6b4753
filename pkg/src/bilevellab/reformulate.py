"""Builders for the seven single-level reformulations and the lower-level duals.

Each reformulation is a smooth NLP over the named blocks ``x, y, z, u, v``
(the KKT-based kind has no ``z``).  Constraint rows keep one fixed, documented
order so multiplier vectors are comparable across kinds:

    upper rows, lower-level rows in y (inequalities then equalities),
    gap rows, lower-level rows in z, stationarity rows, sign bounds.

Every row carries a provenance tag; analysis code addresses rows by tag.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import BilevelProblem, DimensionError, ScalarFunc, StackedFuncs

__all__ = [
    "ReformulationError",
    "ReformulationKind",
    "DualKind",
    "Layout",
    "SingleLevelNlp",
    "DualProblem",
    "build",
    "build_dual",
    "embed_mpcc_point",
    "feasibility_report",
    "parse_kind_spec",
    "DUALITY_KINDS",
]


class ReformulationError(ValueError):
    """Invalid reformulation request (bad kind/parameter combination)."""


class ReformulationKind(enum.Enum):
    MPCC = "MPCC"
    WDP = "WDP"
    MDP = "MDP"
    eMDP = "eMDP"
    TWDP = "TWDP"
    TMDP = "TMDP"
    eTMDP = "eTMDP"

    @property
    def uses_z(self) -> bool:
        return self is not ReformulationKind.MPCC


DUALITY_KINDS = (
    ReformulationKind.WDP,
    ReformulationKind.MDP,
    ReformulationKind.eMDP,
    ReformulationKind.TWDP,
    ReformulationKind.TMDP,
    ReformulationKind.eTMDP,
)


class DualKind(enum.Enum):
    TWD = "TWD"
    TMD = "TMD"
    eTMD = "eTMD"


def parse_kind_spec(spec: str) -> tuple[ReformulationKind, float | None]:
    """Parse ``NAME`` or ``NAME@t`` as used on the command line."""
    name, _, t_part = spec.partition("@")
    try:
        kind = ReformulationKind[name]
    except KeyError:
        raise ReformulationError(f"unknown reformulation kind {name!r}") from None
    if not t_part:
        return kind, None
    try:
        t = float(t_part)
    except ValueError:
        raise ReformulationError(f"bad relaxation parameter {t_part!r}") from None
    _check_t(t)
    return kind, t


def _check_t(t) -> float | None:
    if t is None:
        return None
    t = float(t)
    if not np.isfinite(t) or t < 0:
        raise ReformulationError(f"relaxation parameter must be finite and >= 0, got {t}")
    return t


@dataclass(frozen=True)
class Layout:
    """Variable blocks and their offsets in the stacked vector."""

    n: int
    m: int
    p: int
    q: int
    has_z: bool

    @property
    def dim(self) -> int:
        return self.n + self.m * (2 if self.has_z else 1) + self.p + self.q

    @cached_property
    def offsets(self) -> dict[str, int]:
        off = {"x": 0, "y": self.n}
        cursor = self.n + self.m
        if self.has_z:
            off["z"] = cursor
            cursor += self.m
        off["u"] = cursor
        off["v"] = cursor + self.p
        return off

    def sl(self, block: str) -> slice:
        size = {"x": self.n, "y": self.m, "z": self.m, "u": self.p, "v": self.q}[block]
        start = self.offsets[block]
        return slice(start, start + size)

    def split(self, w: np.ndarray):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise DimensionError(f"point has shape {w.shape}, expected ({self.dim},)")
        z = w[self.sl("z")] if self.has_z else None
        return w[self.sl("x")], w[self.sl("y")], z, w[self.sl("u")], w[self.sl("v")]

    def pack(self, x, y, z, u, v) -> np.ndarray:
        parts = [np.asarray(x, float), np.asarray(y, float)]
        if self.has_z:
            parts.append(np.asarray(z, float))
        parts.extend([np.asarray(u, float), np.asarray(v, float)])
        w = np.concatenate(parts)
        if w.shape != (self.dim,):
            raise DimensionError("packed point has the wrong total dimension")
        return w


class _Ctx:
    """Per-point evaluation cache shared by all row blocks."""

    __slots__ = ("problem", "layout", "w", "x", "y", "z", "u", "v", "_memo")

    def __init__(self, problem: BilevelProblem, layout: Layout, w: np.ndarray):
        self.problem = problem
        self.layout = layout
        self.w = w
        self.x, self.y, self.z, self.u, self.v = layout.split(w)
        self._memo: dict[str, object] = {}

    def _at(self, where: str) -> np.ndarray:
        return self.y if where == "y" else self.z

    def memo(self, key: str, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def g_vals(self, where: str) -> np.ndarray:
        return self.memo(f"g@{where}", lambda: self.problem.g_values(self.x, self._at(where)))

    def h_vals(self, where: str) -> np.ndarray:
        return self.memo(f"h@{where}", lambda: self.problem.h_values(self.x, self._at(where)))

    def g_jac(self, where: str):
        return self.memo(f"Jg@{where}", lambda: self.problem.g_jac(self.x, self._at(where)))

    def h_jac(self, where: str):
        return self.memo(f"Jh@{where}", lambda: self.problem.h_jac(self.x, self._at(where)))

    def f_val(self, where: str) -> float:
        return self.memo(
            f"f@{where}", lambda: self.problem.lower_objective.value(self.x, self._at(where))
        )

    def f_grad_x(self, where: str) -> np.ndarray:
        return self.memo(
            f"fx@{where}", lambda: self.problem.lower_objective.grad_x(self.x, self._at(where))
        )

    def f_grad_y(self, where: str) -> np.ndarray:
        return self.memo(
            f"fy@{where}", lambda: self.problem.lower_objective.grad_y(self.x, self._at(where))
        )

    def stat_vals(self, where: str) -> np.ndarray:
        def compute():
            grad = self.f_grad_y(where).copy()
            if self.problem.p:
                grad = grad + self.g_jac(where)[1].T @ self.u
            if self.problem.q:
                grad = grad + self.h_jac(where)[1].T @ self.v
            return grad

        return self.memo(f"stat@{where}", compute)


class _Block:
    sense: str  # "ineq" or "eq"
    tags: list[str]

    def values(self, ctx: _Ctx) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def jacobian(self, ctx: _Ctx) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.tags)


class _AffineBlock(_Block):
    """Rows ``A w + b`` over the full layout vector."""

    def __init__(self, a: np.ndarray, b: np.ndarray, sense: str, tags: list[str]):
        self.a = a
        self.b = b
        self.sense = sense
        self.tags = tags

    def values(self, ctx: _Ctx) -> np.ndarray:
        return self.a @ ctx.w + self.b

    def jacobian(self, ctx: _Ctx) -> np.ndarray:
        return self.a


class _LowerRows(_Block):
    """g or h rows of the lower level evaluated at (x, y) or (x, z)."""

    def __init__(self, which: str, where: str, sense: str, tag_prefix: str, count: int):
        self.which = which
        self.where = where
        self.sense = sense
        self.tags = [f"{tag_prefix}[{i}]" for i in range(count)]

    def values(self, ctx: _Ctx) -> np.ndarray:
        return ctx.g_vals(self.where) if self.which == "g" else ctx.h_vals(self.where)

    def jacobian(self, ctx: _Ctx) -> np.ndarray:
        jx, jw = (ctx.g_jac if self.which == "g" else ctx.h_jac)(self.where)
        jac = np.zeros((len(self.tags), ctx.layout.dim))
        jac[:, ctx.layout.sl("x")] = jx
        jac[:, ctx.layout.sl(self.where)] = jw
        return jac


class _GapRow(_Block):
    """``f(x,y) - f(x,z) - [u'g(x,z)] - [v'h(x,z)] - t <= 0``."""

    def __init__(self, with_ug: bool, with_vh: bool, t: float, tag: str):
        self.with_ug = with_ug
        self.with_vh = with_vh
        self.t = t
        self.sense = "ineq"
        self.tags = [tag]

    def values(self, ctx: _Ctx) -> np.ndarray:
        val = ctx.f_val("y") - ctx.f_val("z") - self.t
        if self.with_ug and ctx.problem.p:
            val -= ctx.u @ ctx.g_vals("z")
        if self.with_vh and ctx.problem.q:
            val -= ctx.v @ ctx.h_vals("z")
        return np.array([val])

    def jacobian(self, ctx: _Ctx) -> np.ndarray:
        lay = ctx.layout
        row = np.zeros(lay.dim)
        dx = ctx.f_grad_x("y") - ctx.f_grad_x("z")
        dz = -ctx.f_grad_y("z")
        if self.with_ug and ctx.problem.p:
            gx, gz = ctx.g_jac("z")
            dx -= gx.T @ ctx.u
            dz -= gz.T @ ctx.u
            row[lay.sl("u")] = -ctx.g_vals("z")
        if self.with_vh and ctx.problem.q:
            hx, hz = ctx.h_jac("z")
            dx -= hx.T @ ctx.v
            dz -= hz.T @ ctx.v
            row[lay.sl("v")] = -ctx.h_vals("z")
        row[lay.sl("x")] = dx
        row[lay.sl("y")] = ctx.f_grad_y("y")
        row[lay.sl("z")] = dz
        return row.reshape(1, -1)


class _AggregateRow(_Block):
    """``sign * (u'g + [v'h]) + shift`` at y or z, one row."""

    def __init__(self, sign: float, with_h: bool, where: str, shift: float, sense: str, tag: str):
        self.sign = sign
        self.with_h = with_h
        self.where = where
        self.shift = shift
        self.sense = sense
        self.tags = [tag]

    def values(self, ctx: _Ctx) -> np.ndarray:
        val = self.shift
        if ctx.problem.p:
            val += self.sign * (ctx.u @ ctx.g_vals(self.where))
        if self.with_h and ctx.problem.q:
            val += self.sign * (ctx.v @ ctx.h_vals(self.where))
        return np.array([val])

    def jacobian(self, ctx: _Ctx) -> np.ndarray:
        lay = ctx.layout
        row = np.zeros(lay.dim)
        dx = np.zeros(lay.n)
        dw = np.zeros(lay.m)
        if ctx.problem.p:
            gx, gw = ctx.g_jac(self.where)
            dx += gx.T @ ctx.u
            dw += gw.T @ ctx.u
            row[lay.sl("u")] = self.sign * ctx.g_vals(self.where)
        if self.with_h and ctx.problem.q:
            hx, hw = ctx.h_jac(self.where)
            dx += hx.T @ ctx.v
            dw += hw.T @ ctx.v
            row[lay.sl("v")] = self.sign * ctx.h_vals(self.where)
        row[lay.sl("x")] = self.sign * dx
        row[lay.sl(self.where)] += self.sign * dw
        return row.reshape(1, -1)


class _HadamardRows(_Block):
    """Componentwise multiplier-weighted rows at z.

    ``which == "g"``: ``-u_i g_i(x,z) <= 0``;  ``which == "h"``:
    ``v_k h_k(x,z) = 0``.
    """

    def __init__(self, which: str, count: int, tag_prefix: str):
        self.which = which
        self.sense = "ineq" if which == "g" else "eq"
        self.tags = [f"{tag_prefix}[{i}]" for i in range(count)]

    def values(self, ctx: _Ctx) -> np.ndarray:
        if self.which == "g":
            return -ctx.u * ctx.g_vals("z")
        return ctx.v * ctx.h_vals("z")

    def jacobian(self, ctx: _Ctx) -> np.ndarray:
        lay = ctx.layout
        k = len(self.tags)
        jac = np.zeros((k, lay.dim))
        if self.which == "g":
            gx, gz = ctx.g_jac("z")
            jac[:, lay.sl("x")] = -(ctx.u[:, None] * gx)
            jac[:, lay.sl("z")] = -(ctx.u[:, None] * gz)
            jac[:, lay.sl("u")] = np.diag(-ctx.g_vals("z"))
        else:
            hx, hz = ctx.h_jac("z")
            jac[:, lay.sl("x")] = ctx.v[:, None] * hx
            jac[:, lay.sl("z")] = ctx.v[:, None] * hz
            jac[:, lay.sl("v")] = np.diag(ctx.h_vals("z"))
        return jac


class _StationarityRows(_Block):
    """Rows of the Lagrangian z-gradient (y-gradient for the KKT-based kind)."""

    def __init__(self, where: str, count: int):
        self.where = where
        self.sense = "eq"
        self.tags = [f"stat[{j}]" for j in range(count)]

    def values(self, ctx: _Ctx) -> np.ndarray:
        return ctx.stat_vals(self.where)

    def jacobian(self, ctx: _Ctx) -> np.ndarray:
        lay = ctx.layout
        prob = ctx.problem
        point = ctx.y if self.where == "y" else ctx.z
        jac = np.zeros((lay.m, lay.dim))
        f = prob.lower_objective
        d_x = f.hess_xy().T.copy()
        d_w = f.hess_yy(ctx.x, point)
        if prob.p:
            d_x += prob._ineq_stack.weighted_hess_yx(ctx.u)
            d_w = d_w + prob._ineq_stack.weighted_hess_yy(ctx.x, point, ctx.u)
            jac[:, lay.sl("u")] = ctx.g_jac(self.where)[1].T
        if prob.q:
            d_x += prob._eq_stack.weighted_hess_yx(ctx.v)
            d_w = d_w + prob._eq_stack.weighted_hess_yy(ctx.x, point, ctx.v)
            jac[:, lay.sl("v")] = ctx.h_jac(self.where)[1].T
        jac[:, lay.sl("x")] = d_x
        jac[:, lay.sl(self.where)] += d_w
        return jac


class SingleLevelNlp:
    """A built reformulation: objective F(x, y) plus ordered constraint rows."""

    def __init__(self, problem: BilevelProblem, kind: ReformulationKind,
                 t: float | None, blocks: list[_Block]):
        self.problem = problem
        self.kind = kind
        self.t = t
        self.layout = Layout(problem.n, problem.m, problem.p, problem.q, kind.uses_z)
        self.blocks = blocks
        self.tags: list[str] = []
        self.senses: list[str] = []
        for blk in blocks:
            self.tags.extend(blk.tags)
            self.senses.extend([blk.sense] * len(blk))
        self._is_eq = np.array([s == "eq" for s in self.senses])
        order = np.arange(len(self.senses))
        self._ineq_rows = order[~self._is_eq]
        self._eq_rows = order[self._is_eq]

    # -- introspection ---------------------------------------------------

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def n_rows(self) -> int:
        return len(self.tags)

    @property
    def n_ineq(self) -> int:
        return int(self._ineq_rows.size)

    @property
    def n_eq(self) -> int:
        return int(self._eq_rows.size)

    def rows_by_prefix(self, prefix: str) -> np.ndarray:
        """Row indices whose tag is ``prefix`` or ``prefix[...]``."""
        return np.array(
            [i for i, tag in enumerate(self.tags)
             if tag == prefix or tag.startswith(prefix + "[")],
            dtype=int,
        )

    # -- evaluation --------------------------------------------------------

    def eval_objective(self, w) -> tuple[float, np.ndarray]:
        ctx = _Ctx(self.problem, self.layout, np.asarray(w, dtype=float))
        f = self.problem.upper_objective
        val = f.value(ctx.x, ctx.y)
        grad = np.zeros(self.layout.dim)
        grad[self.layout.sl("x")] = f.grad_x(ctx.x, ctx.y)
        grad[self.layout.sl("y")] = f.grad_y(ctx.x, ctx.y)
        return val, grad

    def row_values(self, w) -> np.ndarray:
        ctx = _Ctx(self.problem, self.layout, np.asarray(w, dtype=float))
        return np.concatenate([blk.values(ctx) for blk in self.blocks])

    def row_jacobian(self, w) -> np.ndarray:
        ctx = _Ctx(self.problem, self.layout, np.asarray(w, dtype=float))
        return np.vstack([blk.jacobian(ctx) for blk in self.blocks])

    def eval_constraints(self, w):
        ctx = _Ctx(self.problem, self.layout, np.asarray(w, dtype=float))
        vals = np.concatenate([blk.values(ctx) for blk in self.blocks])
        jac = np.vstack([blk.jacobian(ctx) for blk in self.blocks])
        return (
            vals[self._ineq_rows],
            jac[self._ineq_rows],
            vals[self._eq_rows],
            jac[self._eq_rows],
        )

    def eval_constraint_values(self, w):
        vals = self.row_values(w)
        return vals[self._ineq_rows], vals[self._eq_rows]

    def residuals(self, w) -> np.ndarray:
        """Per-row violation: ``max(value, 0)`` for <=, ``|value|`` for =."""
        vals = self.row_values(w)
        out = np.abs(vals)
        out[~self._is_eq] = np.maximum(vals[~self._is_eq], 0.0)
        return out

    def max_violation(self, w) -> float:
        return float(np.max(self.residuals(w), initial=0.0))

    def weave_multipliers(self, lam_in: np.ndarray, lam_eq: np.ndarray) -> np.ndarray:
        mults = np.zeros(self.n_rows)
        mults[self._ineq_rows] = lam_in
        mults[self._eq_rows] = lam_eq
        return mults

    def split_multipliers(self, row_mults: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        row_mults = np.asarray(row_mults, dtype=float)
        return row_mults[self._ineq_rows], row_mults[self._eq_rows]

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        t = "" if self.t is None else f"(t={self.t})"
        return f"SingleLevelNlp({self.kind.value}{t}, rows={self.n_rows}, dim={self.dim})"


def _upper_block(problem: BilevelProblem, layout: Layout) -> _AffineBlock:
    rows_a, rows_b = problem.upper.rows()
    a = np.zeros((rows_a.shape[0], layout.dim))
    a[:, layout.sl("x")] = rows_a
    tags = [f"upper[{i}]" for i in range(rows_a.shape[0])]
    return _AffineBlock(a, -rows_b, "ineq", tags)


def _bound_block(layout: Layout) -> _AffineBlock:
    a = np.zeros((layout.p, layout.dim))
    a[:, layout.sl("u")] = -np.eye(layout.p)
    tags = [f"u_nonneg[{i}]" for i in range(layout.p)]
    return _AffineBlock(a, np.zeros(layout.p), "ineq", tags)


def build(problem: BilevelProblem, kind: ReformulationKind, t: float | None = None) -> SingleLevelNlp:
    """Build the single-level NLP for ``kind``; ``t`` selects the relaxed variant."""
    if not isinstance(kind, ReformulationKind):
        raise ReformulationError(f"kind must be a ReformulationKind, got {kind!r}")
    t = _check_t(t)
    layout = Layout(problem.n, problem.m, problem.p, problem.q, kind.uses_z)
    p, q, m = problem.p, problem.q, problem.m
    tval = 0.0 if t is None else t

    blocks: list[_Block] = [_upper_block(problem, layout)]
    blocks.append(_LowerRows("g", "y", "ineq", "g_y", p))
    blocks.append(_LowerRows("h", "y", "eq", "h_y", q))

    K = ReformulationKind
    if kind is K.MPCC:
        if p and t is None:
            blocks.append(_AggregateRow(1.0, False, "y", 0.0, "eq", "mpcc_comp"))
        elif p:
            blocks.append(_AggregateRow(1.0, False, "y", 0.0, "ineq", "mpcc_comp_hi"))
            blocks.append(_AggregateRow(-1.0, False, "y", -tval, "ineq", "mpcc_comp_lo"))
        blocks.append(_StationarityRows("y", m))
    elif kind is K.WDP:
        blocks.append(_GapRow(True, True, tval, "gap"))
        blocks.append(_StationarityRows("z", m))
    elif kind is K.MDP:
        blocks.append(_GapRow(False, False, tval, "gap_f"))
        if p or q:
            blocks.append(_AggregateRow(-1.0, True, "z", 0.0, "ineq", "agg_gh"))
        blocks.append(_StationarityRows("z", m))
    elif kind is K.eMDP:
        blocks.append(_GapRow(False, False, tval, "gap_f"))
        blocks.append(_HadamardRows("g", p, "comp_g"))
        blocks.append(_HadamardRows("h", q, "comp_h"))
        blocks.append(_StationarityRows("z", m))
    elif kind is K.TWDP:
        blocks.append(_GapRow(True, False, tval, "gap"))
        blocks.append(_LowerRows("h", "z", "eq", "h_z", q))
        blocks.append(_StationarityRows("z", m))
    elif kind is K.TMDP:
        blocks.append(_GapRow(False, False, tval, "gap_f"))
        if p:
            blocks.append(_AggregateRow(-1.0, False, "z", 0.0, "ineq", "agg_g"))
        blocks.append(_LowerRows("h", "z", "eq", "h_z", q))
        blocks.append(_StationarityRows("z", m))
    elif kind is K.eTMDP:
        blocks.append(_GapRow(False, False, tval, "gap_f"))
        blocks.append(_HadamardRows("g", p, "comp_g"))
        blocks.append(_LowerRows("h", "z", "eq", "h_z", q))
        blocks.append(_StationarityRows("z", m))

    blocks.append(_bound_block(layout))
    blocks = [blk for blk in blocks if len(blk)]
    return SingleLevelNlp(problem, kind, t, blocks)


def embed_mpcc_point(problem: BilevelProblem, w_mpcc) -> np.ndarray:
    """Lift an MPCC point ``(x, y, u, v)`` to ``(x, y, z=y, u, v)``."""
    w = np.asarray(w_mpcc, dtype=float).reshape(-1)
    n, m, p, q = problem.n, problem.m, problem.p, problem.q
    if w.shape != (n + m + p + q,):
        raise DimensionError(
            f"MPCC point has shape {w.shape}, expected ({n + m + p + q},)"
        )
    x, y, uv = w[:n], w[n : n + m], w[n + m :]
    return np.concatenate([x, y, y, uv])


def feasibility_report(nlp: SingleLevelNlp, w, tol: float = 1e-9):
    """(max violation, list of violated (tag, residual)) for a candidate point."""
    resid = nlp.residuals(w)
    worst = float(np.max(resid, initial=0.0))
    violated = [
        (nlp.tags[i], float(resid[i])) for i in np.where(resid > tol)[0]
    ]
    return worst, violated


class DualProblem:
    """One of the three lower-level dual programs at a fixed upper point.

    Variables are ``(z, u, v)``; the objective is maximized.  Constraint rows,
    in order: Lagrangian stationarity in z, h(x, z) = 0, the kind-specific
    multiplier-sign rows, and u >= 0.
    """

    def __init__(self, problem: BilevelProblem, x, kind: DualKind):
        if not isinstance(kind, DualKind):
            raise ReformulationError(f"kind must be a DualKind, got {kind!r}")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (problem.n,):
            raise DimensionError(f"x has shape {x.shape}, expected ({problem.n},)")
        if not problem.upper.contains(x, tol=1e-9):
            raise ReformulationError("x is not a member of the upper set")
        self.problem = problem
        self.kind = kind
        self.x = x
        self.m, self.p, self.q = problem.m, problem.p, problem.q
        self.f = problem.lower_objective.fix_x(x)
        self.g_stack = StackedFuncs(
            [func.fix_x(x) for func in problem.lower.inequalities], 0, problem.m
        )
        self.h_stack = StackedFuncs(
            [func.fix_x(x) for func in problem.lower.equalities], 0, problem.m
        )
        self.dim = self.m + self.p + self.q
        self._zero = np.zeros(0)

    def split(self, wd):
        wd = np.asarray(wd, dtype=float).reshape(-1)
        if wd.shape != (self.dim,):
            raise DimensionError(f"dual point has shape {wd.shape}, expected ({self.dim},)")
        return wd[: self.m], wd[self.m : self.m + self.p], wd[self.m + self.p :]

    def objective(self, wd) -> float:
        """Dual objective, in the max sense."""
        z, u, _ = self.split(wd)
        val = self.f.value(self._zero, z)
        if self.kind is DualKind.TWD and self.p:
            val += float(u @ self.g_stack.values(self._zero, z))
        return val

    def objective_grad(self, wd) -> np.ndarray:
        z, u, _ = self.split(wd)
        grad = np.zeros(self.dim)
        grad[: self.m] = self.f.grad_y(self._zero, z)
        if self.kind is DualKind.TWD and self.p:
            grad[: self.m] += self.g_stack.jac_y(self._zero, z).T @ u
            grad[self.m : self.m + self.p] = self.g_stack.values(self._zero, z)
        return grad

    # Minimization adapter for the SQP solver ------------------------------

    def eval_objective(self, wd):
        return -self.objective(wd), -self.objective_grad(wd)

    def _stat(self, z, u, v):
        grad = self.f.grad_y(self._zero, z).copy()
        if self.p:
            grad += self.g_stack.jac_y(self._zero, z).T @ u
        if self.q:
            grad += self.h_stack.jac_y(self._zero, z).T @ v
        return grad

    def eval_constraints(self, wd):
        z, u, v = self.split(wd)
        gvals = self.g_stack.values(self._zero, z) if self.p else np.zeros(0)
        hvals = self.h_stack.values(self._zero, z) if self.q else np.zeros(0)
        jg = self.g_stack.jac_y(self._zero, z) if self.p else np.zeros((0, self.m))
        jh = self.h_stack.jac_y(self._zero, z) if self.q else np.zeros((0, self.m))

        eq_rows = [self._stat(z, u, v)]
        stat_jac = np.zeros((self.m, self.dim))
        stat_jac[:, : self.m] = (
            self.f.hess_yy(self._zero, z)
            + self.g_stack.weighted_hess_yy(self._zero, z, u)
            + self.h_stack.weighted_hess_yy(self._zero, z, v)
        )
        stat_jac[:, self.m : self.m + self.p] = jg.T
        stat_jac[:, self.m + self.p :] = jh.T
        eq_jacs = [stat_jac]
        if self.q:
            eq_rows.append(hvals)
            h_jac = np.zeros((self.q, self.dim))
            h_jac[:, : self.m] = jh
            eq_jacs.append(h_jac)

        in_rows = []
        in_jacs = []
        if self.kind is DualKind.TMD and self.p:
            in_rows.append(np.array([-(u @ gvals)]))
            row = np.zeros((1, self.dim))
            row[0, : self.m] = -(jg.T @ u)
            row[0, self.m : self.m + self.p] = -gvals
            in_jacs.append(row)
        elif self.kind is DualKind.eTMD and self.p:
            in_rows.append(-u * gvals)
            jac = np.zeros((self.p, self.dim))
            jac[:, : self.m] = -(u[:, None] * jg)
            jac[:, self.m : self.m + self.p] = np.diag(-gvals)
            in_jacs.append(jac)
        if self.p:
            in_rows.append(-u)
            jac = np.zeros((self.p, self.dim))
            jac[:, self.m : self.m + self.p] = -np.eye(self.p)
            in_jacs.append(jac)

        ci = np.concatenate(in_rows) if in_rows else np.zeros(0)
        ji = np.vstack(in_jacs) if in_jacs else np.zeros((0, self.dim))
        ce = np.concatenate(eq_rows)
        je = np.vstack(eq_jacs)
        return ci, ji, ce, je

    def eval_constraint_values(self, wd):
        ci, _, ce, _ = self.eval_constraints(wd)
        return ci, ce

    def max_violation(self, wd) -> float:
        ci, ce = self.eval_constraint_values(wd)
        worst = float(np.max(np.maximum(ci, 0.0), initial=0.0)) if ci.size else 0.0
        if ce.size:
            worst = max(worst, float(np.max(np.abs(ce), initial=0.0)))
        return worst


def build_dual(problem: BilevelProblem, x, kind: DualKind) -> DualProblem:
    """The dual program of the lower level at ``x`` (TWD, TMD, or eTMD)."""
    return DualProblem(problem, x, kind)

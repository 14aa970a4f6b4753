"""Structured bilevel-program data: objectives, constraint blocks, and the
upper-level polyhedron.

Every function is affine or quadratic over two named variable blocks
``x`` (dimension ``n``) and ``y`` (dimension ``m``), optionally extended by
single-variable monomial terms of degree up to three so that the shipped
cubic demo problems are representable exactly.  Values and all derivative
blocks are analytic; nothing here is differentiated numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "ModelError",
    "DimensionError",
    "Monomial",
    "ScalarFunc",
    "StackedFuncs",
    "ConstraintBlock",
    "UpperSet",
    "BilevelProblem",
    "lagrangian",
]

# Relative eigenvalue floor used by the convexity checks.
_PSD_FLOOR = 1e-9


class ModelError(ValueError):
    """Problem data is inconsistent or violates a construction invariant."""


class DimensionError(ModelError):
    """An argument's shape does not match the declared block dimensions."""


def _as_vector(v, size: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise DimensionError(f"{name}: expected shape ({size},), got {arr.shape}")
    return arr


def _as_matrix(mat, shape: tuple[int, int], name: str) -> np.ndarray:
    arr = np.asarray(mat, dtype=float)
    if arr.shape != shape:
        raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Monomial:
    """A term ``coeff * w[index] ** degree`` on one variable of one block."""

    block: str
    index: int
    degree: int
    coeff: float

    def __post_init__(self):
        if self.block not in ("x", "y"):
            raise ModelError(f"monomial block must be 'x' or 'y', got {self.block!r}")
        if not 1 <= self.degree <= 3:
            raise ModelError(f"monomial degree must be in 1..3, got {self.degree}")


class ScalarFunc:
    """One scalar function ``(x, y) -> R`` with analytic derivative blocks.

    The base form is ``1/2 x'Qxx x + x'Qxy y + 1/2 y'Qyy y + cx'x + cy'y + c0``
    plus the optional monomial terms.  Quadratic matrices are symmetrized at
    construction, so evaluation never sees an asymmetric matrix.
    """

    __slots__ = ("n", "m", "qxx", "qxy", "qyy", "cx", "cy", "c0", "monomials")

    def __init__(
        self,
        n: int,
        m: int,
        *,
        qxx=None,
        qxy=None,
        qyy=None,
        cx=None,
        cy=None,
        c0: float = 0.0,
        monomials: Iterable[Monomial] = (),
    ):
        self.n = int(n)
        self.m = int(m)
        self.qxx = None if qxx is None else self._sym(_as_matrix(qxx, (n, n), "qxx"))
        self.qxy = None if qxy is None else _as_matrix(qxy, (n, m), "qxy")
        self.qyy = None if qyy is None else self._sym(_as_matrix(qyy, (m, m), "qyy"))
        self.cx = np.zeros(n) if cx is None else _as_vector(cx, n, "cx")
        self.cy = np.zeros(m) if cy is None else _as_vector(cy, m, "cy")
        self.c0 = float(c0)
        mono = tuple(monomials)
        for t in mono:
            dim = self.n if t.block == "x" else self.m
            if not 0 <= t.index < dim:
                raise DimensionError(
                    f"monomial index {t.index} out of range for block "
                    f"{t.block!r} of dimension {dim}"
                )
        self.monomials = mono

    @staticmethod
    def _sym(mat: np.ndarray) -> np.ndarray:
        return 0.5 * (mat + mat.T)

    @property
    def kind(self) -> str:
        """``affine``, ``quadratic``, or ``polynomial`` (cubic terms present)."""
        if any(t.degree >= 3 for t in self.monomials):
            return "polynomial"
        has_quad = (
            any(q is not None and np.any(q) for q in (self.qxx, self.qxy, self.qyy))
            or any(t.degree == 2 for t in self.monomials)
        )
        return "quadratic" if has_quad else "affine"

    @property
    def is_affine(self) -> bool:
        return self.kind == "affine"

    def is_affine_in_y(self) -> bool:
        """True when the function is affine in ``y`` for every fixed ``x``."""
        if self.qyy is not None and np.any(self.qyy):
            return False
        return not any(t.block == "y" and t.degree >= 2 for t in self.monomials)

    # -- evaluation ----------------------------------------------------

    def _check_point(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        return _as_vector(x, self.n, "x"), _as_vector(y, self.m, "y")

    def value(self, x, y) -> float:
        x, y = self._check_point(x, y)
        val = self.c0 + self.cx @ x + self.cy @ y
        if self.qxx is not None:
            val += 0.5 * x @ self.qxx @ x
        if self.qxy is not None:
            val += x @ self.qxy @ y
        if self.qyy is not None:
            val += 0.5 * y @ self.qyy @ y
        for t in self.monomials:
            w = x[t.index] if t.block == "x" else y[t.index]
            val += t.coeff * w**t.degree
        return float(val)

    def grad_x(self, x, y) -> np.ndarray:
        x, y = self._check_point(x, y)
        g = self.cx.copy()
        if self.qxx is not None:
            g += self.qxx @ x
        if self.qxy is not None:
            g += self.qxy @ y
        for t in self.monomials:
            if t.block == "x":
                g[t.index] += t.coeff * t.degree * x[t.index] ** (t.degree - 1)
        return g

    def grad_y(self, x, y) -> np.ndarray:
        x, y = self._check_point(x, y)
        g = self.cy.copy()
        if self.qxy is not None:
            g += self.qxy.T @ x
        if self.qyy is not None:
            g += self.qyy @ y
        for t in self.monomials:
            if t.block == "y":
                g[t.index] += t.coeff * t.degree * y[t.index] ** (t.degree - 1)
        return g

    def hess_xx(self, x, y) -> np.ndarray:
        x, _ = self._check_point(x, y)
        h = np.zeros((self.n, self.n)) if self.qxx is None else self.qxx.copy()
        for t in self.monomials:
            if t.block == "x" and t.degree >= 2:
                h[t.index, t.index] += (
                    t.coeff * t.degree * (t.degree - 1) * x[t.index] ** (t.degree - 2)
                )
        return h

    def hess_xy(self) -> np.ndarray:
        """Mixed block; constant because monomials involve one variable."""
        return np.zeros((self.n, self.m)) if self.qxy is None else self.qxy.copy()

    def hess_yy(self, x, y) -> np.ndarray:
        _, y = self._check_point(x, y)
        h = np.zeros((self.m, self.m)) if self.qyy is None else self.qyy.copy()
        for t in self.monomials:
            if t.block == "y" and t.degree >= 2:
                h[t.index, t.index] += (
                    t.coeff * t.degree * (t.degree - 1) * y[t.index] ** (t.degree - 2)
                )
        return h

    def has_nonlinear_part(self) -> bool:
        if any(q is not None and np.any(q) for q in (self.qxx, self.qxy, self.qyy)):
            return True
        return any(t.degree >= 2 for t in self.monomials)

    # Nonlinear remainders (value/gradients minus the stacked linear part);
    # used by StackedFuncs so affine rows stay on the matrix fast path.

    def _nl_value(self, x: np.ndarray, y: np.ndarray) -> float:
        val = 0.0
        if self.qxx is not None:
            val += 0.5 * x @ self.qxx @ x
        if self.qxy is not None:
            val += x @ self.qxy @ y
        if self.qyy is not None:
            val += 0.5 * y @ self.qyy @ y
        for t in self.monomials:
            if t.degree >= 2:
                w = x[t.index] if t.block == "x" else y[t.index]
                val += t.coeff * w**t.degree
        return float(val)

    def _nl_grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n)
        if self.qxx is not None:
            g += self.qxx @ x
        if self.qxy is not None:
            g += self.qxy @ y
        for t in self.monomials:
            if t.block == "x" and t.degree >= 2:
                g[t.index] += t.coeff * t.degree * x[t.index] ** (t.degree - 1)
        return g

    def _nl_grad_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        g = np.zeros(self.m)
        if self.qxy is not None:
            g += self.qxy.T @ x
        if self.qyy is not None:
            g += self.qyy @ y
        for t in self.monomials:
            if t.block == "y" and t.degree >= 2:
                g[t.index] += t.coeff * t.degree * y[t.index] ** (t.degree - 1)
        return g

    def fix_x(self, x) -> "ScalarFunc":
        """Freeze the ``x`` block, returning a function of ``y`` alone (n=0)."""
        x = _as_vector(x, self.n, "x")
        c0 = self.c0 + self.cx @ x
        if self.qxx is not None:
            c0 += 0.5 * x @ self.qxx @ x
        cy = self.cy.copy()
        if self.qxy is not None:
            cy = cy + self.qxy.T @ x
        mono = []
        for t in self.monomials:
            if t.block == "x":
                c0 += t.coeff * x[t.index] ** t.degree
            else:
                mono.append(t)
        return ScalarFunc(
            0,
            self.m,
            qyy=None if self.qyy is None else self.qyy,
            cy=cy,
            c0=float(c0),
            monomials=mono,
        )

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ScalarFunc(n={self.n}, m={self.m}, kind={self.kind!r})"


class StackedFuncs:
    """A fixed list of ScalarFuncs evaluated jointly.

    Linear parts of all rows are stacked into matrices once; rows with a
    quadratic or monomial remainder are tracked separately and scattered back
    into their original positions, so row order is preserved.
    """

    def __init__(self, funcs: Sequence[ScalarFunc], n: int, m: int):
        self.funcs = tuple(funcs)
        self.n = n
        self.m = m
        k = len(self.funcs)
        self.k = k
        self.ax = np.zeros((k, n))
        self.ay = np.zeros((k, m))
        self.const = np.zeros(k)
        self.extras: list[tuple[int, ScalarFunc]] = []
        for i, f in enumerate(self.funcs):
            if f.n != n or f.m != m:
                raise DimensionError("stacked functions must share block dimensions")
            self.ax[i] = f.cx
            self.ay[i] = f.cy
            self.const[i] = f.c0
            if f.has_nonlinear_part():
                self.extras.append((i, f))
            else:
                # degree-1 monomials fold into the linear part
                for t in f.monomials:
                    if t.block == "x":
                        self.ax[i, t.index] += t.coeff
                    else:
                        self.ay[i, t.index] += t.coeff
        # Degree-1 monomials of nonlinear rows still belong to the linear part.
        for i, f in self.extras:
            for t in f.monomials:
                if t.degree == 1:
                    if t.block == "x":
                        self.ax[i, t.index] += t.coeff
                    else:
                        self.ay[i, t.index] += t.coeff

    @property
    def all_affine(self) -> bool:
        return not self.extras

    def values(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = self.ax @ x + self.ay @ y + self.const
        for i, f in self.extras:
            out[i] += f._nl_value(x, y)
        return out

    def jac_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        jac = self.ax.copy()
        for i, f in self.extras:
            jac[i] += f._nl_grad_x(x, y)
        return jac

    def jac_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        jac = self.ay.copy()
        for i, f in self.extras:
            jac[i] += f._nl_grad_y(x, y)
        return jac

    def weighted_hess_yy(self, x, y, weights: np.ndarray) -> np.ndarray:
        """``sum_i weights[i] * hess_yy(func_i)`` without touching affine rows."""
        h = np.zeros((self.m, self.m))
        for i, f in self.extras:
            if weights[i] != 0.0:
                h += weights[i] * f.hess_yy(x, y)
        return h

    def weighted_hess_yx(self, weights: np.ndarray) -> np.ndarray:
        h = np.zeros((self.m, self.n))
        for i, f in self.extras:
            if weights[i] != 0.0 and f.qxy is not None:
                h += weights[i] * f.qxy.T
        return h


@dataclass(frozen=True)
class ConstraintBlock:
    """Lower-level constraints: inequalities ``<= 0`` and equalities ``= 0``."""

    inequalities: tuple[ScalarFunc, ...]
    equalities: tuple[ScalarFunc, ...]

    def __init__(self, inequalities=(), equalities=()):
        object.__setattr__(self, "inequalities", tuple(inequalities))
        object.__setattr__(self, "equalities", tuple(equalities))

    @property
    def p(self) -> int:
        return len(self.inequalities)

    @property
    def q(self) -> int:
        return len(self.equalities)


class UpperSet:
    """The polyhedron ``X = {x : A1 x <= b1}`` with optional box bounds on x.

    Nonemptiness is certified at construction by a feasibility LP; building an
    empty set raises :class:`ModelError`.
    """

    def __init__(self, a1, b1, *, lb=None, ub=None):
        a1 = np.asarray(a1, dtype=float)
        if a1.ndim != 2:
            raise DimensionError("a1 must be a 2-D matrix")
        self.l, self.n = a1.shape
        self.a1 = a1
        self.b1 = _as_vector(b1, self.l, "b1")
        self.lb = None if lb is None else _as_vector(lb, self.n, "lb")
        self.ub = None if ub is None else _as_vector(ub, self.n, "ub")
        rows_a, rows_b = self.rows()
        res = linprog(
            np.zeros(self.n),
            A_ub=rows_a if rows_a.size else None,
            b_ub=rows_b if rows_b.size else None,
            bounds=[(None, None)] * self.n,
            method="highs",
        )
        if res.status == 2:
            raise ModelError("upper set is empty: feasibility LP has no solution")
        if not res.success and res.status != 3:  # unbounded feasible is fine
            raise ModelError(f"upper set feasibility LP failed: {res.message}")
        self._witness = np.zeros(self.n) if res.x is None else np.asarray(res.x)

    def rows(self) -> tuple[np.ndarray, np.ndarray]:
        """All inequality rows ``A x <= b`` with box bounds folded in."""
        blocks_a = [self.a1]
        blocks_b = [self.b1]
        eye = np.eye(self.n)
        if self.ub is not None:
            blocks_a.append(eye)
            blocks_b.append(self.ub)
        if self.lb is not None:
            blocks_a.append(-eye)
            blocks_b.append(-self.lb)
        return np.vstack(blocks_a), np.concatenate(blocks_b)

    @property
    def n_rows(self) -> int:
        a, _ = self.rows()
        return a.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        a, b = self.rows()
        x = _as_vector(x, self.n, "x")
        return bool(np.all(a @ x - b <= tol))

    def violation(self, x) -> float:
        a, b = self.rows()
        x = _as_vector(x, self.n, "x")
        return float(np.max(np.maximum(a @ x - b, 0.0), initial=0.0))

    def feasible_point(self) -> np.ndarray:
        """A point of X found by the certification LP."""
        return self._witness.copy()


@dataclass(frozen=True)
class BilevelProblem:
    """An upper objective over ``x in X`` and ``y`` solving the lower problem.

    ``lower`` holds the lower-level inequalities (``<= 0``) and equalities of
    the problem ``min_y f(x, y)``.  When ``convex_lower`` is set, the quadratic
    y-blocks of ``f`` and every inequality must be positive semidefinite and
    every equality affine in ``y``; this is verified at construction.
    """

    n: int
    m: int
    upper_objective: ScalarFunc
    lower_objective: ScalarFunc
    lower: ConstraintBlock
    upper: UpperSet
    convex_lower: bool = True
    _ineq_stack: StackedFuncs = field(repr=False, compare=False, default=None)
    _eq_stack: StackedFuncs = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        for name, func in (("upper", self.upper_objective), ("lower", self.lower_objective)):
            if (func.n, func.m) != (self.n, self.m):
                raise DimensionError(f"{name} objective has wrong block dimensions")
        for func in self.lower.inequalities + self.lower.equalities:
            if (func.n, func.m) != (self.n, self.m):
                raise DimensionError("lower constraint has wrong block dimensions")
        if self.upper.n != self.n:
            raise DimensionError("upper set dimension differs from n")
        if self.convex_lower:
            self._check_convexity()
        object.__setattr__(
            self, "_ineq_stack", StackedFuncs(self.lower.inequalities, self.n, self.m)
        )
        object.__setattr__(
            self, "_eq_stack", StackedFuncs(self.lower.equalities, self.n, self.m)
        )

    def _check_convexity(self):
        def psd(mat: np.ndarray, what: str):
            if mat is None or not np.any(mat):
                return
            eigs = np.linalg.eigvalsh(mat)
            floor = -_PSD_FLOOR * max(1.0, float(np.linalg.norm(mat, 2)))
            if eigs.min() < floor:
                raise ModelError(
                    f"convex lower level declared but {what} has eigenvalue "
                    f"{eigs.min():.3e}"
                )

        psd(self.lower_objective.qyy, "the lower objective's y-block")
        for i, func in enumerate(self.lower.inequalities):
            psd(func.qyy, f"lower inequality {i}'s y-block")
        for k, func in enumerate(self.lower.equalities):
            if not func.is_affine_in_y():
                raise ModelError(
                    f"convex lower level declared but equality {k} is not affine in y"
                )

    @property
    def p(self) -> int:
        return self.lower.p

    @property
    def q(self) -> int:
        return self.lower.q

    @property
    def l(self) -> int:
        return self.upper.l

    # -- batched lower-level evaluation ---------------------------------

    def g_values(self, x, y) -> np.ndarray:
        return self._ineq_stack.values(np.asarray(x, float), np.asarray(y, float))

    def h_values(self, x, y) -> np.ndarray:
        return self._eq_stack.values(np.asarray(x, float), np.asarray(y, float))

    def g_jac(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return self._ineq_stack.jac_x(x, y), self._ineq_stack.jac_y(x, y)

    def h_jac(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return self._eq_stack.jac_x(x, y), self._eq_stack.jac_y(x, y)

    def lower_is_linear(self) -> bool:
        """True when the lower level is an LP in y for every fixed x."""
        return (
            self.lower_objective.is_affine_in_y()
            and self._ineq_stack.all_affine
            and self._eq_stack.all_affine
        )

    def lower_is_quadratic_program(self) -> bool:
        """True when the lower level is a QP in y (quadratic f, affine rows)."""
        return (
            not any(t.block == "y" and t.degree >= 2 for t in self.lower_objective.monomials)
            and self._ineq_stack.all_affine
            and self._eq_stack.all_affine
        )


def lagrangian(problem: BilevelProblem, x, z, u, v) -> tuple[float, np.ndarray]:
    """Lower-level Lagrangian ``f + u'g + v'h`` at ``(x, z)`` and its z-gradient.

    Multiplier signs are not checked; this is evaluation only.
    """
    x = _as_vector(x, problem.n, "x")
    z = _as_vector(z, problem.m, "z")
    u = _as_vector(u, problem.p, "u")
    v = _as_vector(v, problem.q, "v")
    f = problem.lower_objective
    val = f.value(x, z)
    grad = f.grad_y(x, z)
    if problem.p:
        val += u @ problem.g_values(x, z)
        grad += problem._ineq_stack.jac_y(x, z).T @ u
    if problem.q:
        val += v @ problem.h_values(x, z)
        grad += problem._eq_stack.jac_y(x, z).T @ v
    return float(val), grad

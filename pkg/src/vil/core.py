"""Parametric variational inequality problems over polyhedral sets.

A problem is a map ``F(z, lam)`` together with a feasible region
``omega(lam) = {z : A z <= b, M z = q}``. Solvers and differentiation
routines only touch problems through the helpers in this module.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .errors import (
    EvaluationError,
    InfeasibleError,
    InputError,
    SamplingError,
    SolverError,
    UnboundedError,
)

__all__ = [
    "PolyhedralSet",
    "VIProblem",
    "MonotonicityReport",
    "evaluate_F",
    "jacobian_F",
    "probe_monotonicity",
    "independent_rows",
]


def independent_rows(M, tol=1e-10):
    """Indices of a maximal linearly independent subset of the rows of ``M``."""
    M = np.atleast_2d(M)
    if M.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = scipy.linalg.qr(M.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(piv[:rank])


def _as_matrix(X, n, name):
    if X is None:
        return np.zeros((0, n))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.size else np.zeros((0, n))
    if X.shape[1] != n:
        raise InputError(f"{name} has {X.shape[1]} columns, expected {n}")
    return X


@dataclass(frozen=True, eq=False)
class PolyhedralSet:
    """The polytope ``{z : A z <= b, M z = q}``.

    Construction runs two LPs: one that finds a relatively interior point
    (maximizing the smallest normalized slack) and one on the recession cone.
    Empty sets raise :class:`InfeasibleError`, unbounded ones
    :class:`UnboundedError`.

    ``eq_rows`` indexes a linearly independent subset of the equality rows;
    every internal linear solve uses only those rows, and the duals of the
    dropped rows are reported as zero.
    """

    A: np.ndarray
    b: np.ndarray
    M: np.ndarray
    q: np.ndarray
    interior_point: np.ndarray = field(init=False, repr=False)
    eq_rows: np.ndarray = field(init=False, repr=False)
    projector: Optional[Callable] = field(init=False, repr=False, default=None)

    def __init__(self, A=None, b=None, M=None, q=None, *, dim=None, _trusted=None):
        if dim is None:
            for X in (A, M):
                if X is not None and np.asarray(X).ndim == 2:
                    dim = np.asarray(X).shape[1]
                    break
        if dim is None:
            raise InputError("cannot infer dimension; pass dim=")
        A = _as_matrix(A, dim, "A")
        M = _as_matrix(M, dim, "M")
        b = np.zeros(0) if b is None else np.asarray(b, dtype=float).reshape(-1)
        q = np.zeros(0) if q is None else np.asarray(q, dtype=float).reshape(-1)
        if b.shape[0] != A.shape[0]:
            raise InputError(f"b has length {b.shape[0]}, A has {A.shape[0]} rows")
        if q.shape[0] != M.shape[0]:
            raise InputError(f"q has length {q.shape[0]}, M has {M.shape[0]} rows")
        for name, X in (("A", A), ("b", b), ("M", M), ("q", q)):
            if not np.all(np.isfinite(X)):
                raise InputError(f"{name} contains non-finite entries")
            X.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "projector", None)
        if _trusted is not None:
            # structure known to be nonempty, bounded, with independent rows
            rows, point, proj = _trusted
            object.__setattr__(self, "projector", proj)
        else:
            rows = independent_rows(M)
            point = self._probe()
        rows.setflags(write=False)
        object.__setattr__(self, "eq_rows", rows)
        point.setflags(write=False)
        object.__setattr__(self, "interior_point", point)

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def n_ineq(self):
        return self.A.shape[0]

    @property
    def n_eq(self):
        return self.M.shape[0]

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = lo.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]), dim=n)

    @classmethod
    def simplex(cls, n, total=1.0):
        return cls(-np.eye(n), np.zeros(n), np.ones((1, n)), [total])

    @classmethod
    def simplex_product(cls, groups, totals):
        """``{z >= 0, sum(z[g]) = t for each group g}`` with disjoint groups covering every coordinate.

        Skips the construction LPs and projects by sorting.
        """
        groups = [np.asarray(g, dtype=int) for g in groups]
        totals = np.asarray(totals, dtype=float).reshape(-1)
        n = int(sum(g.size for g in groups))
        cover = np.sort(np.concatenate(groups)) if groups else np.zeros(0, int)
        if len(groups) != totals.size or not np.array_equal(cover, np.arange(n)):
            raise InputError("groups must partition the coordinates, one total per group")
        if any(g.size == 0 for g in groups) or np.any(totals < 0):
            raise InputError("groups must be nonempty and totals nonnegative")
        M = np.zeros((len(groups), n))
        point = np.zeros(n)
        for i, g in enumerate(groups):
            M[i, g] = 1.0
            point[g] = totals[i] / g.size

        def proj(y):
            z = np.empty(n)
            nu = np.empty(len(groups))
            for i, g in enumerate(groups):
                theta = _simplex_threshold(y[g], totals[i])
                z[g] = np.maximum(y[g] - theta, 0.0)
                nu[i] = theta
            mu = np.maximum(z - y + nu @ M, 0.0)
            mu[z > 0] = 0.0
            return z, mu, nu

        return cls(-np.eye(n), np.zeros(n), M, totals, dim=n,
                   _trusted=(np.arange(len(groups)), point, proj))

    def _probe(self):
        A, b, M, q = self.A, self.b, self.M, self.q
        n = self.dim
        norms = np.linalg.norm(A, axis=1)
        norms[norms == 0.0] = 1.0
        c = np.zeros(n + 1)
        c[-1] = -1.0
        res = linprog(
            c,
            A_ub=np.hstack([A, norms[:, None]]) if A.shape[0] else None,
            b_ub=b if A.shape[0] else None,
            A_eq=np.hstack([M, np.zeros((M.shape[0], 1))]) if M.shape[0] else None,
            b_eq=q if M.shape[0] else None,
            bounds=[(None, None)] * n + [(None, 1.0)],
            method="highs",
        )
        if res.status == 2:
            raise InfeasibleError("polyhedral set is empty")
        if res.status != 0:
            # z free and t capped: an unbounded LP means the set is unbounded
            if res.status == 3:
                raise UnboundedError("polyhedral set is unbounded")
            raise SolverError(f"feasibility LP failed: {res.message}")
        t = res.x[-1]
        if t < -1e-9:
            raise InfeasibleError(f"polyhedral set is empty (max slack {t:.3e})")
        point = res.x[:n]

        # bounded iff [A; M] has full column rank and no recession direction
        # strictly decreases some inequality
        stacked = np.vstack([A, M])
        if stacked.shape[0] < n or np.linalg.matrix_rank(stacked) < n:
            raise UnboundedError("polyhedral set is unbounded (rank-deficient constraints)")
        if A.shape[0]:
            obj = A.sum(axis=0)
            rec = linprog(
                obj,
                A_ub=np.vstack([A, -obj[None, :]]),
                b_ub=np.concatenate([np.zeros(A.shape[0]), [1.0]]),
                A_eq=M if M.shape[0] else None,
                b_eq=np.zeros(M.shape[0]) if M.shape[0] else None,
                bounds=[(None, None)] * n,
                method="highs",
            )
            if rec.status != 0:
                raise SolverError(f"recession-cone LP failed: {rec.message}")
            if -rec.fun > 1e-9:
                raise UnboundedError("polyhedral set is unbounded")
        return point

    def contains(self, z, tol=1e-8):
        z = np.asarray(z, dtype=float)
        ok = True
        if self.n_ineq:
            ok &= bool(np.all(self.A @ z - self.b <= tol))
        if self.n_eq:
            ok &= bool(np.all(np.abs(self.M @ z - self.q) <= tol))
        return ok

    def violation(self, z):
        """Largest constraint violation at ``z`` (0 when feasible)."""
        z = np.asarray(z, dtype=float)
        v = 0.0
        if self.n_ineq:
            v = max(v, float(np.max(self.A @ z - self.b, initial=0.0)))
        if self.n_eq:
            v = max(v, float(np.max(np.abs(self.M @ z - self.q), initial=0.0)))
        return v


def _simplex_threshold(v, total):
    """theta with sum(max(v - theta, 0)) = total (total > 0); max(v) when total = 0."""
    if total <= 0.0:
        return float(np.max(v))
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, u.size + 1)
    rho = int(np.flatnonzero(u - css / k > 0)[-1])
    return float(css[rho] / (rho + 1))


SetBuilder = Union[PolyhedralSet, Callable[[np.ndarray], PolyhedralSet]]


@dataclass(frozen=True, eq=False)
class VIProblem:
    """A parametric VI ``find z in omega(lam) with <F(z, lam), z' - z> >= 0``.

    ``omega`` is either a fixed :class:`PolyhedralSet` or a callable of
    ``lam``. ``omega_sensitivities(lam)`` may return a dict with any of
    ``dA`` (n_ineq, n, m), ``db`` (n_ineq, m), ``dM`` (n_eq, n, m) and
    ``dq`` (n_eq, m); missing entries are zero.

    ``lmo(c, pset)`` optionally returns a minimizer of ``<c, v>`` over
    ``pset``; when absent an LP is solved.

    All callables must be pure.
    """

    dim: int
    F: Callable
    omega: SetBuilder
    n_params: int = 0
    dF_dz: Optional[Callable] = None
    dF_dlam: Optional[Callable] = None
    omega_sensitivities: Optional[Callable] = None
    lam_lo: Optional[np.ndarray] = None
    lam_hi: Optional[np.ndarray] = None
    lmo: Optional[Callable] = None
    name: str = "vi"

    def set_at(self, lam) -> PolyhedralSet:
        if isinstance(self.omega, PolyhedralSet):
            return self.omega
        pset = self.omega(np.asarray(lam, dtype=float))
        if pset.dim != self.dim:
            raise InputError(f"omega returned a set of dim {pset.dim}, expected {self.dim}")
        return pset

    def check_lam(self, lam, tol=1e-12):
        lam = np.asarray(lam, dtype=float).reshape(-1)
        if lam.shape[0] != self.n_params:
            raise InputError(f"lam has length {lam.shape[0]}, expected {self.n_params}")
        if self.lam_lo is not None and np.any(lam < np.asarray(self.lam_lo) - tol):
            i = int(np.argmax(np.asarray(self.lam_lo) - lam))
            raise InputError(f"lam[{i}] = {lam[i]} below its lower bound")
        if self.lam_hi is not None and np.any(lam > np.asarray(self.lam_hi) + tol):
            i = int(np.argmax(lam - np.asarray(self.lam_hi)))
            raise InputError(f"lam[{i}] = {lam[i]} above its upper bound")
        return lam


def _check_z(problem, z):
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != problem.dim:
        raise InputError(f"z has length {z.shape[0]}, expected {problem.dim}")
    return z


def _finite_or_raise(v, what):
    bad = ~np.isfinite(v)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise EvaluationError(f"{what} is non-finite at index {tuple(int(i) for i in idx)}")


def evaluate_F(problem: VIProblem, z, lam) -> np.ndarray:
    z = _check_z(problem, z)
    lam = problem.check_lam(lam)
    out = np.asarray(problem.F(z, lam), dtype=float).reshape(-1)
    if out.shape[0] != problem.dim:
        raise EvaluationError(f"F returned length {out.shape[0]}, expected {problem.dim}")
    _finite_or_raise(out, "F")
    if os.environ.get("VIL_DEBUG"):
        again = np.asarray(problem.F(z.copy(), lam.copy()), dtype=float).reshape(-1)
        if not np.array_equal(out, again):
            raise EvaluationError("F is not pure: repeated evaluation differs")
    return out


def _central_difference(fun, x, n_out):
    x = np.asarray(x, dtype=float)
    J = np.empty((n_out, x.size))
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return J


def jacobian_F(problem: VIProblem, z, lam, wrt="z") -> np.ndarray:
    """Jacobian of ``F`` with respect to ``z`` or ``lam``.

    Falls back to central differences with step ``1e-6 * (1 + |x_i|)`` when
    the problem does not supply the analytic derivative.
    """
    z = _check_z(problem, z)
    lam = problem.check_lam(lam)
    n, m = problem.dim, problem.n_params
    if wrt == "z":
        if problem.dF_dz is not None:
            J = np.asarray(problem.dF_dz(z, lam), dtype=float).reshape(n, n)
        else:
            J = _central_difference(lambda v: np.asarray(problem.F(v, lam), dtype=float), z, n)
    elif wrt in ("lam", "lambda"):
        if m == 0:
            return np.zeros((n, 0))
        if problem.dF_dlam is not None:
            J = np.asarray(problem.dF_dlam(z, lam), dtype=float).reshape(n, m)
        else:
            J = _central_difference(lambda v: np.asarray(problem.F(z, v), dtype=float), lam, n)
    else:
        raise InputError(f"wrt must be 'z' or 'lam', got {wrt!r}")
    _finite_or_raise(J, f"Jacobian wrt {wrt}")
    return J


@dataclass(frozen=True)
class MonotonicityReport:
    min_sym_eig: float
    cocoercivity_estimate: float
    n_probes: int
    verdict: str  # strongly-monotone-evidence | monotone-evidence | indefinite


def sample_feasible(pset: PolyhedralSet, n_points, rng, max_attempts=None):
    """Feasible points obtained by projecting Gaussian draws onto ``pset``."""
    from .projection import project  # local import: projection depends on this module

    center = np.asarray(pset.interior_point)
    scale = 1.0 + float(np.max(np.abs(center), initial=0.0))
    max_attempts = max_attempts or 10 * n_points
    points = []
    attempts = 0
    while len(points) < n_points:
        if attempts >= max_attempts:
            raise SamplingError(f"sampled {len(points)}/{n_points} points in {attempts} attempts")
        attempts += 1
        y = center + scale * rng.standard_normal(pset.dim)
        try:
            res = project(pset, y)
        except Exception:
            continue
        points.append(res.z_star)
    return points


def probe_monotonicity(problem: VIProblem, lam, n_probes=20, seed=0, tol=1e-9) -> MonotonicityReport:
    """Empirical evidence about monotonicity of ``F(., lam)`` on ``omega(lam)``.

    Evaluates the smallest eigenvalue of the symmetrized Jacobian at
    ``n_probes`` sampled feasible points and a co-coercivity estimate
    ``min <dF, dz> / |dF|^2`` over consecutive probe pairs. Advisory only.
    """
    if n_probes < 1:
        raise InputError("n_probes must be >= 1")
    lam = problem.check_lam(lam)
    rng = np.random.default_rng(seed)
    pset = problem.set_at(lam)
    points = sample_feasible(pset, n_probes, rng)
    min_eig = np.inf
    values = []
    for z in points:
        J = jacobian_F(problem, z, lam, wrt="z")
        min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (J + J.T))[0]))
        values.append(evaluate_F(problem, z, lam))
    coco = np.inf
    for (z1, f1), (z2, f2) in zip(zip(points, values), zip(points[1:], values[1:])):
        dF = f1 - f2
        nrm = float(dF @ dF)
        if nrm > 1e-14:
            coco = min(coco, float(dF @ (z1 - z2)) / nrm)
    if min_eig > tol:
        verdict = "strongly-monotone-evidence"
    elif min_eig < -tol:
        verdict = "indefinite"
    else:
        verdict = "monotone-evidence"
    return MonotonicityReport(min_eig, coco, n_probes, verdict)

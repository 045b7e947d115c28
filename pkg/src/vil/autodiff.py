"""Backward propagation through the VI layer.

Three ways to get ``dz*/dlam``:

* :func:`grad_implicit` solves ``(I - dh/dz) X = dh/dlam`` at the solution,
* :func:`grad_explicit` pushes the Jacobian through the stored projection
  iterations (or through repeated projection layers appended at ``z*``),
* :func:`grad_fd` differences full forward solves.

``h(z) = P(z - r F(z, lam))`` is the projection fixed-point map, so
``dh/dz = G (I - r dF/dz)`` and ``dh/dlam = dP/dlam - r G dF/dlam`` with
``G = dP/dy`` from the projection KKT system. Every mode also accepts a
cotangent ``c`` and then returns ``c^T dz*/dlam`` without forming the full
Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .core import VIProblem, evaluate_F, jacobian_F
from .errors import DegeneracyError, InputError, SolverError
from .projection import KKTDerivative, ProjectionResult, project
from .solvers import SolverOptions, SolveTrace, solve_pn

__all__ = [
    "GradientRequest",
    "EquilibriumGradient",
    "LocalMaps",
    "grad_implicit",
    "grad_explicit",
    "grad_explicit_tail",
    "grad_fd",
    "equilibrium_gradient",
    "IMPLICIT_COND_LIMIT",
    "AUTO_COND_LIMIT",
]

log = logging.getLogger(__name__)

IMPLICIT_COND_LIMIT = 1e12
AUTO_COND_LIMIT = 1e10
MODES = ("explicit", "implicit", "finite-difference", "auto")


@dataclass(frozen=True)
class GradientRequest:
    """What to differentiate and how.

    ``unroll_tail`` limits explicit mode to the trailing iterations of a
    projection trace; for traces with Newton steps it is the number of
    projection layers appended at ``z*`` (default: until the recursion
    settles to ``tail_tol``). ``fd_one_sided`` switches finite differences
    to a forward difference with relative step ``fd_step`` (0.05 gives a
    +5% perturbation). ``damping`` opts in to Tikhonov-damped projection
    derivatives at weakly active constraints.
    """

    mode: str = "auto"
    cotangent: Optional[np.ndarray] = None
    fd_step: float = 1e-5
    unroll_tail: Optional[int] = None
    fd_one_sided: bool = False
    damping: bool = False
    tail_tol: float = 1e-13
    max_tail: int = 50000

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.fd_step > 0:
            raise InputError("fd_step must be positive")
        if self.unroll_tail is not None and self.unroll_tail < 1:
            raise InputError("unroll_tail must be at least 1")


@dataclass
class EquilibriumGradient:
    """``value`` is ``dz*/dlam`` (n, m), or ``c^T dz*/dlam`` (m,) in cotangent mode."""

    value: np.ndarray
    mode_used: str
    condition_estimate: float = float("nan")
    degeneracy_flag: bool = False
    layers: int = 0
    notes: List[str] = field(default_factory=list)

    @property
    def is_cotangent(self):
        return self.value.ndim == 1

    @property
    def dz_dlam(self):
        if self.is_cotangent:
            raise AttributeError("cotangent-mode gradient holds no full Jacobian")
        return self.value

    @property
    def dL_dlam(self):
        if not self.is_cotangent:
            raise AttributeError("full-Jacobian gradient; use dz_dlam")
        return self.value


class LocalMaps:
    """Derivatives of the fixed-point map ``h`` at one point ``z``.

    ``res`` must be the projection of ``y = z - r F(z)``.
    """

    def __init__(self, problem: VIProblem, lam, z, r, res: ProjectionResult, pset=None, damping=False):
        self.problem = problem
        self.lam = lam
        self.r = float(r)
        pset = pset or problem.set_at(lam)
        self.pset = pset
        try:
            self.kkt = KKTDerivative(pset, res, damping=False)
            self.degenerate = False
        except DegeneracyError:
            if not damping:
                raise
            self.kkt = KKTDerivative(pset, res, damping=True)
            self.degenerate = True
        n, m = problem.dim, problem.n_params
        self.n, self.m = n, m
        self.Jz = jacobian_F(problem, z, lam, "z")
        self.Jl = jacobian_F(problem, z, lam, "lam")
        sens = problem.omega_sensitivities(lam) if problem.omega_sensitivities is not None else None
        if sens and m:
            self.R_set = self.kkt.rhs(
                dA=sens.get("dA"), db=sens.get("db"), dM=sens.get("dM"), dq=sens.get("dq"), m=m
            )
        else:
            self.R_set = None
        self._G = None

    @property
    def G(self):
        if self._G is None:
            self._G = self.kkt.dz_dy()
        return self._G

    def dh_dz(self):
        return self.G - self.r * self.G @ self.Jz

    def dh_dlam(self):
        out = -self.r * self.G @ self.Jl
        if self.R_set is not None:
            out = out + self.kkt.jvp(self.R_set)
        return out

    def vjp(self, c):
        """``(c^T dh/dz, c^T dh/dlam)`` via one transposed KKT solve."""
        w = self.kkt.adjoint(c)
        gy = w[: self.n]
        vz = gy - self.r * (gy @ self.Jz)
        vl = -self.r * (gy @ self.Jl)
        if self.R_set is not None:
            vl = vl + w @ self.R_set
        return vz, vl


def _recover_r(problem, lam, z, res, r):
    if r is not None:
        return float(r)
    Fz = evaluate_F(problem, z, lam)
    ff = float(Fz @ Fz)
    if ff == 0.0:
        return 1.0
    return float((np.asarray(z) - np.asarray(res.y)) @ Fz / ff)


def _cotangent(req, n):
    if req.cotangent is None:
        return None
    c = np.asarray(req.cotangent, dtype=float).reshape(-1)
    if c.size != n:
        raise InputError(f"cotangent has length {c.size}, expected {n}")
    return c


def grad_implicit(problem: VIProblem, lam, z_star, res: Optional[ProjectionResult] = None,
                  req: Optional[GradientRequest] = None, *, r=None) -> EquilibriumGradient:
    """Implicit differentiation of the fixed-point equation at ``z_star``.

    ``res`` is the projection of ``z* - r F(z*)``; when omitted it is
    recomputed with ``r`` (default 1). Any ``r > 0`` gives the same answer.
    Raises :class:`DegeneracyError` when ``I - dh/dz`` is (numerically)
    singular; explicit mode is the fallback.
    """
    req = req or GradientRequest(mode="implicit")
    lam = problem.check_lam(lam)
    z = np.asarray(z_star, dtype=float).reshape(-1)
    pset = problem.set_at(lam)
    if res is None:
        r = 1.0 if r is None else float(r)
        res = project(pset, z - r * evaluate_F(problem, z, lam), x0=z)
    else:
        r = _recover_r(problem, lam, z, res, r)
    maps = LocalMaps(problem, lam, z, r, res, pset, damping=req.damping)
    n = problem.dim
    Amat = np.eye(n) - maps.dh_dz()
    cond = float(np.linalg.cond(Amat))
    if not np.isfinite(cond) or cond > IMPLICIT_COND_LIMIT:
        raise DegeneracyError(
            f"I - dh/dz is ill-conditioned (cond {cond:.2e}); use explicit mode",
            active_mask=np.array(res.active_mask),
            condition=cond,
        )
    c = _cotangent(req, n)
    if c is None:
        value = np.linalg.solve(Amat, maps.dh_dlam())
    else:
        w = np.linalg.solve(Amat.T, c)
        value = maps.vjp(w)[1]
    return EquilibriumGradient(value, "implicit", cond, maps.degenerate, 1)


def _tail_step(problem, lam, trace, pset, z):
    """Step size for projection layers appended at the solution."""
    J = jacobian_F(problem, z, lam, "z")
    nrm = float(np.linalg.norm(J, 2))
    r_cap = 1.0 / nrm if nrm > 0 else 1.0
    proj = [rec.r for rec in trace.records if rec.phase == "projection"]
    return min(proj[-1], r_cap) if proj else r_cap


def grad_explicit(problem: VIProblem, lam, trace: SolveTrace,
                  req: Optional[GradientRequest] = None) -> EquilibriumGradient:
    """Differentiate through projection iterations, starting from ``dz0/dlam = 0``.

    A pure projection trace is replayed layer by layer from its stored
    iterates. When the trace contains Newton steps, projection layers are
    appended at ``z*`` instead, which converges to the same limit.
    """
    req = req or GradientRequest(mode="explicit")
    if trace.dim_changed:
        raise InputError("trace changed dimension during the solve; explicit replay is impossible")
    problem = trace.problem or problem
    lam = problem.check_lam(lam)
    pset = problem.set_at(lam)
    n, m = problem.dim, problem.n_params
    c = _cotangent(req, n)
    notes: List[str] = []
    degenerate = False
    has_newton = any(rec.phase == "newton" for rec in trace.records)

    if not has_newton and trace.records:
        recs = trace.records
        if req.unroll_tail is not None:
            recs = recs[-req.unroll_tail:]
        layers = []
        for rec in recs:
            try:
                layers.append(LocalMaps(problem, lam, rec.z_in, rec.r, rec.res, pset, damping=req.damping))
            except DegeneracyError as exc:
                raise DegeneracyError(
                    f"degenerate projection at iteration {rec.iter}: {exc}",
                    active_mask=exc.active_mask, condition=exc.condition,
                ) from exc
            if layers[-1].degenerate:
                degenerate = True
                notes.append(f"iteration {rec.iter}: damped projection derivative")
        if c is None:
            Jk = np.zeros((n, m))
            for L in layers:
                Jk = L.dh_dz() @ Jk + L.dh_dlam()
            value = Jk
        else:
            w = c.copy()
            value = np.zeros(m)
            for L in reversed(layers):
                vz, vl = L.vjp(w)
                value += vl
                w = vz
        return EquilibriumGradient(value, "explicit", float("nan"), degenerate, len(layers), notes)

    return grad_explicit_tail(problem, lam, trace.z_star, req, r=_tail_step(problem, lam, trace, pset, trace.z_star))


def grad_explicit_tail(problem: VIProblem, lam, z_star, req: Optional[GradientRequest] = None, *,
                       r=None) -> EquilibriumGradient:
    """Explicit mode without a stored trajectory: projection layers appended at ``z_star``.

    ``r`` defaults to ``1 / ||dF/dz(z*)||_2``. Needs no trace, so it also
    works after solves whose dimension changed (column generation).
    """
    req = req or GradientRequest(mode="explicit")
    lam = problem.check_lam(lam)
    pset = problem.set_at(lam)
    n, m = problem.dim, problem.n_params
    c = _cotangent(req, n)
    notes: List[str] = []
    z = np.asarray(z_star, dtype=float)
    if r is None:
        nrm = float(np.linalg.norm(jacobian_F(problem, z, lam, "z"), 2))
        r = 1.0 / nrm if nrm > 0 else 1.0
    r_tail = float(r)
    res = project(pset, z - r_tail * evaluate_F(problem, z, lam), x0=z)
    L = LocalMaps(problem, lam, z, r_tail, res, pset, damping=req.damping)
    degenerate = L.degenerate
    if degenerate:
        notes.append("damped projection derivative at z*")
    limit = req.unroll_tail if req.unroll_tail is not None else req.max_tail
    adaptive = req.unroll_tail is None
    k = 0
    if c is None:
        Hz, Hl = L.dh_dz(), L.dh_dlam()
        Jk = np.zeros((n, m))
        while k < limit:
            J_next = Hz @ Jk + Hl
            k += 1
            delta = np.max(np.abs(J_next - Jk), initial=0.0)
            Jk = J_next
            if adaptive and delta <= req.tail_tol * (1.0 + np.max(np.abs(Jk), initial=0.0)):
                break
        value = Jk
    else:
        # one shared linearization: form the transposed maps once
        HzT, HlT = L.dh_dz().T, L.dh_dlam().T
        bound = float(np.max(np.abs(HlT).sum(axis=1), initial=0.0))
        w = c.copy()
        value = np.zeros(m)
        while k < limit:
            value = value + HlT @ w
            w = HzT @ w
            k += 1
            # the next increment is at most bound * |w|_inf
            scale = 1.0 + np.max(np.abs(value), initial=0.0)
            if adaptive and bound * np.max(np.abs(w), initial=0.0) <= req.tail_tol * scale:
                break
    if adaptive and k >= limit:
        notes.append(f"appended recursion hit {limit} layers before settling")
        log.warning(notes[-1])
    notes.append(f"{k} projection layers appended at z* with r = {r_tail:.4g}")
    return EquilibriumGradient(value, "explicit", float("nan"), degenerate, k, notes)




def _default_solver(problem, opts):
    def solve(lam):
        z, tr = solve_pn(problem, lam, opts)
        if tr.status != "converged":
            raise SolverError(f"forward solve stopped with status {tr.status}")
        return z

    return solve


def grad_fd(problem: VIProblem, lam, opts: Optional[SolverOptions], req: Optional[GradientRequest] = None, *,
            solve: Optional[Callable] = None, objective: Optional[Callable] = None) -> EquilibriumGradient:
    """Finite differences of full forward solves, one lam coordinate at a time.

    ``solve(lam) -> z`` replaces the default projection-Newton solve (which
    requires ``opts.eps_newton <= 1e-8``). With ``objective(z, lam)`` the
    scalar objective is differenced instead of ``z``. Central differences
    use step ``fd_step * (1 + |lam_i|)``; the one-sided mode uses
    ``fd_step * |lam_i|``.
    """
    req = req or GradientRequest(mode="finite-difference")
    lam = problem.check_lam(lam)
    if solve is None:
        if opts is None or opts.eps_newton > 1e-8:
            raise InputError("finite differences need a forward gap tolerance of at most 1e-8")
        solve = _default_solver(problem, opts)
    n, m = problem.dim, problem.n_params
    c = _cotangent(req, n)
    lo = np.full(m, -np.inf) if problem.lam_lo is None else np.asarray(problem.lam_lo, dtype=float)
    hi = np.full(m, np.inf) if problem.lam_hi is None else np.asarray(problem.lam_hi, dtype=float)

    def value_at(l, i):
        try:
            z = np.asarray(solve(l), dtype=float)
        except Exception as exc:
            raise type(exc)(f"forward solve failed at lam coordinate {i}: {exc}") from exc
        if objective is not None:
            return np.atleast_1d(float(objective(z, l)))
        return z if c is None else np.atleast_1d(float(c @ z))

    cols = []
    base = None
    for i in range(m):
        if req.fd_one_sided:
            h = req.fd_step * (abs(lam[i]) if lam[i] != 0 else 1.0)
            if lam[i] + h > hi[i]:
                h = -h
            if base is None:
                base = value_at(lam, i)
            lp = lam.copy()
            lp[i] += h
            cols.append((value_at(lp, i) - base) / h)
            continue
        h = req.fd_step * (1.0 + abs(lam[i]))
        up, dn = lam.copy(), lam.copy()
        up[i] = min(lam[i] + h, hi[i])
        dn[i] = max(lam[i] - h, lo[i])
        if up[i] == dn[i]:
            raise InputError(f"lam coordinate {i} has an empty box")
        cols.append((value_at(up, i) - value_at(dn, i)) / (up[i] - dn[i]))
    if m == 0:
        width = 1 if (objective is not None or c is not None) else n
        value = np.zeros((width, 0))
    else:
        value = np.column_stack(cols)
    if objective is not None or c is not None:
        value = value.reshape(-1)
    return EquilibriumGradient(value, "finite-difference", float("nan"), False, 0)


def equilibrium_gradient(problem: VIProblem, lam, trace: SolveTrace,
                         req: Optional[GradientRequest] = None, opts: Optional[SolverOptions] = None,
                         **fd_kw) -> EquilibriumGradient:
    """Dispatch on ``req.mode``.

    ``auto`` uses implicit differentiation when ``cond(I - dh/dz) < 1e10``
    and falls back to explicit otherwise, recording why.
    """
    req = req or GradientRequest()
    if req.mode == "implicit":
        return grad_implicit(problem, lam, trace.z_star, trace.final_res, req, r=trace.final_r)
    if req.mode == "explicit":
        return grad_explicit(problem, lam, trace, req)
    if req.mode == "finite-difference":
        return grad_fd(problem, lam, opts, req, **fd_kw)
    try:
        g = grad_implicit(problem, lam, trace.z_star, trace.final_res, req, r=trace.final_r)
        if g.condition_estimate < AUTO_COND_LIMIT:
            return g
        why = f"implicit condition estimate {g.condition_estimate:.2e} above {AUTO_COND_LIMIT:g}"
    except DegeneracyError as exc:
        why = f"implicit mode degenerate: {exc}"
    g = grad_explicit(problem, lam, trace, req)
    g.notes.insert(0, why)
    g.degeneracy_flag = True
    return g

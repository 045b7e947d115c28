"""Forward solvers: gap function, adaptive projection method, projection-Newton.

Both solvers share one driver. The projection phase iterates
``z <- P(z - r F(z))`` and shrinks ``r`` whenever the gap stalls; the Newton
phase solves ``(I - dP/dy (I - r dF/dz)) d = z - P(z - r F(z))`` and grows
``r`` when progress is slow.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .core import PolyhedralSet, VIProblem, evaluate_F, jacobian_F
from .errors import DegeneracyError, InputError, SingularityError, SolverError
from .projection import KKTDerivative, ProjectionResult, project

__all__ = [
    "SolverOptions",
    "SolveRecord",
    "SolveTrace",
    "gap",
    "project_step",
    "newton_direction",
    "solve_projection",
    "solve_pn",
]

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "phase", "gap", "r", "step_norm", "eta")


@dataclass(frozen=True)
class SolverOptions:
    """Step-size and tolerance controls.

    ``eps_proj`` (gap at which the Newton phase takes over) has no default:
    its scale depends on the problem. ``eps_newton`` is the final gap target
    for both solvers. If adaptive shrinking pushes the projection step
    below ``r_stall``, projection-Newton starts its Newton phase early.
    """

    eps_proj: float
    eps_newton: float = 1e-3
    r0: float = 0.5
    delta_proj: float = 1e-3
    delta_newton: float = 0.2
    alpha_down: float = 0.8
    alpha_up: float = 2.0
    max_iter: int = 150
    eta_seed: float = 1e-8
    eta_max: float = 1e-2
    proj_tol: float = 1e-9
    r_stall: float = 1e-10

    def __post_init__(self):
        if self.r0 <= 0:
            raise InputError("r0 must be positive")
        if not 0 < self.delta_proj < 1 or not 0 < self.delta_newton < 1:
            raise InputError("ratio thresholds must lie in (0, 1)")
        if not 0 < self.alpha_down < 1 or self.alpha_up <= 1:
            raise InputError("alpha_down must lie in (0, 1) and alpha_up exceed 1")
        if self.r_stall < 0:
            raise InputError("r_stall must be nonnegative")
        if self.max_iter < 0:
            raise InputError("max_iter must be nonnegative")

    def replace(self, **kw):
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class SolveRecord:
    iter: int
    phase: str
    gap: float
    r: float
    step_norm: float
    eta: float
    z_in: Optional[np.ndarray] = field(default=None, repr=False)
    res: Optional[ProjectionResult] = field(default=None, repr=False)


@dataclass
class SolveTrace:
    records: List[SolveRecord]
    z_star: np.ndarray
    final_res: Optional[ProjectionResult]
    final_r: float
    status: str
    gap0: float
    best_index: int
    notes: List[str] = field(default_factory=list)
    dim_changed: bool = False
    problem: Optional[VIProblem] = field(default=None, repr=False)

    @property
    def gaps(self):
        return np.array([r.gap for r in self.records])

    @property
    def final_gap(self):
        return self.records[self.best_index - 1].gap if self.best_index else self.gap0

    def rows(self):
        return [tuple(getattr(rec, c) for c in TRACE_COLUMNS) for rec in self.records]

    def to_csv(self, fh=None):
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.rows():
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3])),
                        repr(float(row[4])), repr(float(row[5]))])
        return out.getvalue() if fh is None else None


def _lp_minimize(c, pset: PolyhedralSet):
    res = linprog(
        c,
        A_ub=pset.A if pset.n_ineq else None,
        b_ub=pset.b if pset.n_ineq else None,
        A_eq=pset.M if pset.n_eq else None,
        b_eq=pset.q if pset.n_eq else None,
        bounds=[(None, None)] * pset.dim,
        method="highs",
    )
    if res.status != 0:
        raise SolverError(f"gap LP failed: {res.message}")
    return res.x


def gap(problem: VIProblem, lam, z, pset: Optional[PolyhedralSet] = None) -> float:
    """``max_v <F(z), z - v>`` over the feasible set; zero exactly at solutions."""
    pset = pset or problem.set_at(lam)
    z = np.asarray(z, dtype=float)
    viol = pset.violation(z)
    if viol > 1e-6 * (1.0 + np.linalg.norm(z)):
        raise InputError(f"gap evaluated at an infeasible point (violation {viol:.2e})")
    Fz = evaluate_F(problem, z, lam)
    v = problem.lmo(Fz, pset) if problem.lmo is not None else _lp_minimize(Fz, pset)
    return float(Fz @ (z - v))


def project_step(problem: VIProblem, lam, z, r, pset=None, warm=None, tol=1e-9):
    """One fixed-point step ``P(z - r F(z))``; returns the point and its projection result."""
    if r <= 0:
        raise InputError("step size r must be positive")
    pset = pset or problem.set_at(lam)
    z = np.asarray(z, dtype=float)
    y = z - r * evaluate_F(problem, z, lam)
    res = project(pset, y, tol=tol, x0=z, warm_start=warm)
    return np.array(res.z_star), res


def _checked_solve(H, e, rcond_min=1e-12):
    # singular factors are caught by the rcond test below
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu = scipy.linalg.lu_factor(H, check_finite=False)
    rcond, _ = scipy.linalg.lapack.dgecon(lu[0], np.linalg.norm(H, 1), norm="1")
    if not np.isfinite(rcond) or rcond < rcond_min:
        return None
    return scipy.linalg.lu_solve(lu, e, check_finite=False)


def newton_direction(problem: VIProblem, lam, z, r, eta_seed=1e-8, pset=None, eta_max=1e-2, tol=1e-9):
    """Newton direction for the fixed-point residual ``e(z) = z - P(z - r F(z))``.

    Returns ``(d, eta, res)`` where ``res`` is the projection result at
    ``y = z - r F(z)``. Singular systems (or weakly active projection
    constraints) are regularized with ``eta * I``, ``eta = eta_seed * 10^j``.
    """
    pset = pset or problem.set_at(lam)
    z = np.asarray(z, dtype=float)
    n = z.size
    y = z - r * evaluate_F(problem, z, lam)
    res = project(pset, y, tol=tol, x0=z)
    e = z - res.z_star
    if not np.any(e):
        return np.zeros(n), 0.0, res
    J = jacobian_F(problem, z, lam, "z")
    degenerate = False
    try:
        G = KKTDerivative(pset, res).dz_dy()
    except DegeneracyError:
        G = KKTDerivative(pset, res, damping=True).dz_dy()
        degenerate = True
    H = np.eye(n) - G @ (np.eye(n) - r * J)
    eta = 0.0
    if not degenerate:
        d = _checked_solve(H, e)
        if d is not None:
            return d, 0.0, res
    j = 0
    while True:
        eta = eta_seed * 10.0 ** j
        if eta > eta_max:
            raise SingularityError(f"Newton matrix singular up to eta = {eta_max:g}")
        d = _checked_solve(H + eta * np.eye(n), e)
        if d is not None:
            return d, eta, res
        j += 1


def _newton_update(pset, z, d, tol, fallback_start):
    """``z - d`` when feasible; otherwise the step is cut at the first blocking
    inequality and cleaned by projection."""
    z_new = z - d
    scale = 1.0 + np.linalg.norm(z_new)
    if pset.violation(z_new) <= 1e-10 * scale:
        return z_new
    if pset.n_ineq:
        Ad = pset.A @ d
        slack = np.maximum(pset.b - pset.A @ z, 0.0)
        blocking = Ad < -1e-14 * (1.0 + np.linalg.norm(d))
        if np.any(blocking):
            alpha = float(np.min(slack[blocking] / -Ad[blocking]))
            if 1e-12 <= alpha < 1.0:
                z_new = z - alpha * d
                if pset.violation(z_new) <= 1e-10 * scale:
                    return z_new
    return np.array(project(pset, z_new, tol=tol, x0=fallback_start).z_star)


def _run(problem, lam, opts: SolverOptions, z0, use_newton, gap_fn, refresh):
    lam = problem.check_lam(lam)
    pset = problem.set_at(lam)
    gap_fn = gap_fn or (lambda prob, l, z, ps: gap(prob, l, z, ps))
    if z0 is None:
        z = np.array(project(pset, np.zeros(problem.dim)).z_star)
    else:
        z = np.asarray(z0, dtype=float).reshape(-1).copy()
        if pset.violation(z) > 1e-8 * (1.0 + np.linalg.norm(z)):
            raise InputError("z0 is infeasible")
    m = gap_fn(problem, lam, z, pset)
    gap0 = m
    r = opts.r0
    phase = "projection"
    target = opts.eps_proj if use_newton else opts.eps_newton
    records: List[SolveRecord] = []
    notes: List[str] = []
    best_gap, best_z, best_index = m, z.copy(), 0
    phase1_exit = None
    r_exit = r
    status = "iteration-limit"
    warm = None
    dim_changed = False
    k = 0
    while True:
        if phase == "projection" and m <= target:
            if not use_newton:
                status = "converged"
                break
            phase = "newton"
            phase1_exit = m
            r_exit = r
            continue
        if phase == "newton" and m <= opts.eps_newton:
            status = "converged"
            break
        if k >= opts.max_iter:
            break
        if refresh is not None:
            new_problem, z_new = refresh(problem, z)
            if new_problem is not problem:
                dim_changed = dim_changed or new_problem.dim != problem.dim
                problem, z = new_problem, np.asarray(z_new, dtype=float)
                pset = problem.set_at(lam)
                warm = None
        z_in = z
        if phase == "projection":
            z, res = project_step(problem, lam, z_in, r, pset, warm, tol=opts.proj_tol)
            warm = res.active_mask
            eta = 0.0
        else:
            d, eta, res = newton_direction(problem, lam, z_in, r, opts.eta_seed, pset, opts.eta_max, opts.proj_tol)
            z = _newton_update(pset, z_in, d, opts.proj_tol, res.z_star)
        m_new = gap_fn(problem, lam, z, pset)
        k += 1
        records.append(SolveRecord(k, phase, m_new, r, float(np.linalg.norm(z - z_in)), eta, z_in, res))
        ratio = m_new / m if m > 0 else 0.0
        if m_new < best_gap or dim_changed:
            best_gap, best_z, best_index = m_new, z.copy(), k
        if phase == "projection":
            if ratio >= 1.0 - opts.delta_proj:
                r *= opts.alpha_down
            if use_newton and r < opts.r_stall and m_new > opts.eps_newton:
                # the step has collapsed without reaching eps_proj: let Newton try from here
                notes.append(f"iteration {k}: projection stalled at gap {m_new:.3e}; Newton phase starts early")
                log.info(notes[-1])
                phase = "newton"
                phase1_exit = m_new
                r = r_exit = opts.r0
        else:
            if phase1_exit is not None and m_new > 10.0 * max(phase1_exit, opts.eps_newton):
                notes.append(f"iteration {k}: Newton phase diverged (gap {m_new:.3e}); back to projection")
                log.info(notes[-1])
                if not dim_changed:
                    z = best_z.copy()
                    m_new = best_gap
                phase = "projection"
                target = 0.1 * phase1_exit
                r = r_exit * opts.alpha_down
                m = m_new
                continue
            if ratio >= 1.0 - opts.delta_newton:
                r *= opts.alpha_up
        m = m_new

    z_star = z if (status == "converged" or dim_changed) else best_z
    if status == "converged" or dim_changed:
        best_index = k
    y = z_star - r * evaluate_F(problem, z_star, lam)
    final_res = project(pset, y, tol=opts.proj_tol, x0=z_star)
    trace = SolveTrace(records, z_star, final_res, r, status, gap0, best_index, notes, dim_changed, problem)
    return z_star, trace


def solve_projection(problem: VIProblem, lam, opts: SolverOptions, z0=None, *,
                     gap_fn: Optional[Callable] = None, refresh: Optional[Callable] = None):
    """Adaptive-step projection method; stops at ``gap <= opts.eps_newton``."""
    return _run(problem, lam, opts, z0, False, gap_fn, refresh)


def solve_pn(problem: VIProblem, lam, opts: SolverOptions, z0=None, *,
             gap_fn: Optional[Callable] = None, refresh: Optional[Callable] = None):
    """Projection-Newton method.

    Runs projection steps until ``gap <= eps_proj``, then Newton steps until
    ``gap <= eps_newton``. ``gap_fn(problem, lam, z, pset)`` overrides the
    merit function, and ``refresh(problem, z) -> (problem, z)`` may replace
    the problem before each iteration (used for column generation).
    """
    return _run(problem, lam, opts, z0, True, gap_fn, refresh)

"""Euclidean projection onto a polyhedral set and its derivative.

The projection ``argmin 1/2 |z - y|^2 s.t. A z <= b, M z = q`` is solved
with a primal active-set method. Because the Hessian is the identity, each
equality-constrained subproblem is a least-squares projection onto the
null space of the working constraints, and exact multipliers fall out of
the same solve.

Derivatives come from the linearized KKT system

    [ I          A^T      M^T ] [dz ]   [ dy - dA^T mu - dM^T nu        ]
    [ diag(mu)A  diag(s)  0   ] [dmu] = [ -diag(mu) dA z + diag(mu) db  ]
    [ M          0        0   ] [dnu]   [ -dM z + dq                    ]

with ``s = A z - b``. Both ``mu`` occurrences use the optimal multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.linalg import LinAlgWarning

import warnings

from .core import PolyhedralSet
from .errors import ConvergenceError, DegeneracyError, InputError

__all__ = [
    "ProjectionResult",
    "project",
    "KKTDerivative",
    "differentiate_projection",
    "TOL_ACTIVE",
]

TOL_ACTIVE = 1e-7
TIKHONOV = 1e-10


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    y: np.ndarray
    z_star: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    kkt_residual: float
    active_mask: np.ndarray
    iterations: int = 0


def _orthonormal_add(basis, row, tol=1e-9):
    """Append ``row`` to an orthonormal row basis if it is independent."""
    nrm = np.linalg.norm(row)
    if nrm == 0.0:
        return basis, False
    r = row.copy()
    if basis.shape[0]:
        r -= basis.T @ (basis @ r)
        r -= basis.T @ (basis @ r)
    rn = np.linalg.norm(r)
    if rn <= tol * nrm:
        return basis, False
    return np.vstack([basis, r / rn]), True


def _solve_normal(C, rhs):
    G = C @ C.T
    try:
        cf = scipy.linalg.cho_factor(G, check_finite=False)
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(G, rhs, rcond=None)[0]


def project(
    pset: PolyhedralSet,
    y,
    tol=1e-8,
    *,
    x0=None,
    warm_start: Optional[np.ndarray] = None,
    max_iter: Optional[int] = None,
) -> ProjectionResult:
    """Project ``y`` onto ``pset``.

    ``x0`` is an optional feasible starting point and ``warm_start`` an
    optional boolean mask of constraints to try as the initial working set
    (only those active at the start point are used). Duals are never warm
    started.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    n = pset.dim
    if y.shape[0] != n:
        raise InputError(f"y has length {y.shape[0]}, expected {n}")
    if tol <= 0:
        raise InputError("tol must be positive")
    A, b = pset.A, pset.b
    rows = pset.eq_rows
    Me = pset.M[rows]
    qe = pset.q[rows]
    p_ineq = A.shape[0]
    n_eq = Me.shape[0]
    scale = 1.0 + np.linalg.norm(y)

    if pset.projector is not None:
        z, mu, nu = pset.projector(y)
        active = (A @ z - b) > -TOL_ACTIVE
        stat = z - y + A.T @ mu + pset.M.T @ nu
        resid = max(float(np.max(np.abs(stat), initial=0.0)), pset.violation(z))
        for arr in (z, mu, nu, active):
            arr.setflags(write=False)
        return ProjectionResult(y.copy(), z, mu, nu, resid, active, 1)

    x = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.shape[0] == n and pset.violation(x0) <= 1e-10 * (1.0 + np.linalg.norm(x0)):
            x = x0.copy()
    if x is None:
        x = np.array(pset.interior_point, dtype=float)

    basis = np.zeros((0, n))
    for i in range(n_eq):
        basis, _ = _orthonormal_add(basis, Me[i])
    working = []
    if p_ineq:
        slack = A @ x - b
        cand = np.abs(slack) <= TOL_ACTIVE
        if warm_start is not None:
            cand &= np.asarray(warm_start, dtype=bool)
        else:
            cand &= np.abs(slack) <= 1e-12 * scale
        for i in np.flatnonzero(cand):
            basis, added = _orthonormal_add(basis, A[i])
            if added:
                working.append(int(i))
    # keep working constraints exactly tight
    in_w = np.zeros(p_ineq, dtype=bool)
    in_w[working] = True

    max_iter = max_iter or 20 * (n + p_ineq) + 50
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        W = np.flatnonzero(in_w)
        C = np.vstack([Me, A[W]]) if W.size else Me
        g = x - y
        if C.shape[0]:
            lam = _solve_normal(C, C @ g)
            p = -(g - C.T @ lam)
        else:
            lam = np.zeros(0)
            p = -g
        if np.linalg.norm(p) <= 1e-11 * (1.0 + np.linalg.norm(g)):
            mu_w = -lam[n_eq:]
            if mu_w.size == 0 or mu_w.min() >= -1e-10 * (1.0 + np.linalg.norm(g)):
                converged = True
                break
            in_w[W[int(np.argmin(mu_w))]] = False
            continue
        alpha = 1.0
        block = -1
        if p_ineq:
            Ap = A @ p
            slack = b - A @ x
            mask = (~in_w) & (Ap > 1e-14 * np.linalg.norm(p) * (1.0 + np.abs(A).sum(axis=1)))
            if np.any(mask):
                idx = np.flatnonzero(mask)
                ratios = np.maximum(slack[idx], 0.0) / Ap[idx]
                j = int(np.argmin(ratios))
                if ratios[j] < 1.0:
                    alpha = float(ratios[j])
                    block = int(idx[j])
        x = x + alpha * p
        if block >= 0:
            in_w[block] = True

    if not converged:
        raise ConvergenceError(
            f"active-set projection did not converge in {max_iter} iterations",
            best=x,
            residual=float(np.linalg.norm(x - y)),
        )

    # polish: recompute the point and multipliers directly from the final working set
    W = np.flatnonzero(in_w)
    C = np.vstack([Me, A[W]]) if W.size else Me
    if C.shape[0]:
        d = np.concatenate([qe, b[W]])
        lam = _solve_normal(C, C @ y - d)
        z = y - C.T @ lam
        if pset.violation(z) > pset.violation(x) + 1e-9 * scale:
            z = x
            lam = -_solve_normal(C, C @ (z - y))
    else:
        lam = np.zeros(0)
        z = y.copy()

    mu = np.zeros(p_ineq)
    mu[W] = np.maximum(lam[n_eq:], 0.0)
    nu = np.zeros(pset.n_eq)
    nu[rows] = lam[:n_eq]
    stat = z - y + A.T @ mu + pset.M.T @ nu
    resid = float(np.max(np.abs(stat), initial=0.0))
    resid = max(resid, pset.violation(z))
    if p_ineq:
        resid = max(resid, float(np.max(np.abs(mu * (A @ z - b)), initial=0.0)))
        active = (A @ z - b) > -TOL_ACTIVE
    else:
        active = np.zeros(0, dtype=bool)
    if resid > max(tol, 1e-9) * scale:
        raise ConvergenceError(
            f"projection KKT residual {resid:.3e} exceeds tolerance", best=z, residual=resid
        )
    for arr in (z, mu, nu, active):
        arr.setflags(write=False)
    return ProjectionResult(y.copy(), z, mu, nu, resid, active, it)


class KKTDerivative:
    """Factorized linearized KKT system at a projection solution.

    ``jvp(rhs)`` solves the system for one or more right-hand sides and
    ``vjp(c)`` solves the transposed system against a cotangent on ``dz``.
    Rows of the complementarity block are rescaled by ``1/(mu_i + |s_i|)``;
    this leaves the solution unchanged.
    """

    def __init__(self, pset: PolyhedralSet, res: ProjectionResult, damping=False):
        A = pset.A
        rows = pset.eq_rows
        Me = pset.M[rows]
        n, p, k = pset.dim, A.shape[0], Me.shape[0]
        self.n, self.p, self.k = n, p, k
        self.pset = pset
        self.res = res
        mu = np.array(res.mu)
        mu_tol = 1e-10 * max(1.0, float(np.max(mu, initial=0.0)))
        mu[mu <= mu_tol] = 0.0
        s = A @ res.z_star - pset.b if p else np.zeros(0)
        s[np.abs(s) <= TOL_ACTIVE] = 0.0
        self.mu = mu
        self.nu_red = np.array(res.nu)[rows]
        degenerate = (mu == 0.0) & (s == 0.0)
        self.degenerate = degenerate
        if np.any(degenerate) and not damping:
            raise DegeneracyError(
                f"{int(degenerate.sum())} weakly active constraint(s) at the projection point",
                active_mask=np.array(res.active_mask),
            )
        denom = mu + np.abs(s)
        denom[denom == 0.0] = 1.0
        self.row_scale = np.concatenate([np.ones(n), 1.0 / denom, np.ones(k)])
        N = n + p + k
        K = np.zeros((N, N))
        K[:n, :n] = np.eye(n)
        K[:n, n:n + p] = A.T
        K[:n, n + p:] = Me.T
        K[n:n + p, :n] = (mu / denom)[:, None] * A
        K[n:n + p, n:n + p] = np.diag(s / denom)
        K[n + p:, :n] = Me
        self.K = K
        self.damping = damping
        self.condition = np.inf
        if damping:
            self._lu = None
            # Tikhonov-damped least squares
            KtK = K.T @ K + TIKHONOV * np.eye(N)
            self._cho = scipy.linalg.cho_factor(KtK)
            self.condition = float(np.linalg.cond(K)) if N <= 600 else np.inf
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LinAlgWarning)
                lu = scipy.linalg.lu_factor(K, check_finite=False)
            anorm = np.linalg.norm(K, 1)
            rcond, _ = scipy.linalg.lapack.dgecon(lu[0], anorm, norm="1")
            self.condition = 1.0 / rcond if rcond > 0 else np.inf
            if rcond < 1e-14 or not np.isfinite(rcond):
                raise DegeneracyError(
                    f"singular projection KKT matrix (rcond {rcond:.2e})",
                    active_mask=np.array(res.active_mask),
                    condition=self.condition,
                )
            self._lu = lu

    def _solve(self, rhs, trans=False):
        if self._lu is not None:
            return scipy.linalg.lu_solve(self._lu, rhs, trans=1 if trans else 0, check_finite=False)
        if trans:
            # (K^T)^+ ~ K (K^T K + eps I)^-1 with the damped factorization
            return self.K @ scipy.linalg.cho_solve(self._cho, rhs)
        return scipy.linalg.cho_solve(self._cho, self.K.T @ rhs)

    def rhs(self, dy=None, dA=None, db=None, dM=None, dq=None, m=None):
        """Unscaled right-hand side (N, m) for the given parameter differentials."""
        n, p, k = self.n, self.p, self.k
        z = np.asarray(self.res.z_star)
        seeds = [x for x in (dy, dA, db, dM, dq) if x is not None]
        if m is None:
            if not seeds:
                raise InputError("no differential seeds given")
            m = np.asarray(seeds[0]).shape[-1]
        R = np.zeros((n + p + k, m))
        if dy is not None:
            R[:n] += np.asarray(dy, dtype=float).reshape(n, m)
        if dA is not None:
            dA = np.asarray(dA, dtype=float).reshape(p, n, m)
            R[:n] -= np.einsum("ijk,i->jk", dA, self.mu)
            R[n:n + p] -= self.mu[:, None] * np.einsum("ijk,j->ik", dA, z)
        if db is not None:
            R[n:n + p] += self.mu[:, None] * np.asarray(db, dtype=float).reshape(p, m)
        rows = self.pset.eq_rows
        if dM is not None:
            dM = np.asarray(dM, dtype=float).reshape(self.pset.n_eq, n, m)[rows]
            R[:n] -= np.einsum("ijk,i->jk", dM, self.nu_red)
            R[n + p:] -= np.einsum("ijk,j->ik", dM, z)
        if dq is not None:
            R[n + p:] += np.asarray(dq, dtype=float).reshape(self.pset.n_eq, m)[rows]
        return R

    def jvp(self, R):
        """``dz`` (n, m) for an unscaled right-hand side ``R``."""
        sol = self._solve(self.row_scale[:, None] * R)
        return sol[: self.n]

    def adjoint(self, c):
        """Adjoint vector ``w`` with ``c^T dz = w^T R`` for every right-hand side R."""
        c = np.asarray(c, dtype=float).reshape(-1)
        e = np.zeros(self.K.shape[0])
        e[: self.n] = c
        w = self._solve(e, trans=True)
        return self.row_scale * w

    def vjp(self, c, R):
        return self.adjoint(c) @ R

    def dz_dy(self):
        """Full Jacobian of the projection point with respect to ``y``."""
        n = self.n
        return self.jvp(np.vstack([np.eye(n), np.zeros((self.p + self.k, n))]))

    def vjp_y(self, c):
        """``c^T dz/dy``."""
        return self.adjoint(c)[: self.n]


def differentiate_projection(
    pset: PolyhedralSet,
    res: ProjectionResult,
    dy=None,
    dA=None,
    db=None,
    dM=None,
    dq=None,
    cotangent=None,
    damping=False,
):
    """Differentiate the projection point through its KKT system.

    Seeds carry a trailing parameter axis of length ``m``: ``dy`` (n, m),
    ``dA`` (n_ineq, n, m), ``db`` (n_ineq, m), ``dM`` (n_eq, n, m),
    ``dq`` (n_eq, m). Passing only ``dy = I`` gives ``dz/dy``.

    Without ``cotangent`` returns ``dz`` of shape (n, m). With a cotangent
    vector ``c`` returns ``c^T dz`` of length m via one transposed solve.
    Weakly active constraints raise :class:`DegeneracyError` unless
    ``damping`` is set, in which case a Tikhonov-damped least-squares
    solution is returned.
    """
    kkt = KKTDerivative(pset, res, damping=damping)
    R = kkt.rhs(dy, dA, db, dM, dq)
    if cotangent is None:
        return kkt.jvp(R)
    return kkt.vjp(cotangent, R)

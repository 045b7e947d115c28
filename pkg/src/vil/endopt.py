"""End-to-end optimization through routing equilibria.

Learning fits behavior parameters (gamma, tau, riding capacities) to
observed edge flows by SGD. Intervention designs tolls that minimize total
travel time under a crowding budget. Both use one pipeline: solve the
equilibrium, evaluate a scalar objective of the edge flows, and pull its
flow gradient back through the VI with a cotangent.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import (
    AUTO_COND_LIMIT,
    GradientRequest,
    grad_explicit,
    grad_explicit_tail,
    grad_fd,
    grad_implicit,
)
from .errors import ConvergenceError, DegeneracyError, InputError
from .routing.costs import BehaviorParams, CostModel
from .routing.equilibrium import EquilibriumState, assemble_vi, metrics, solve_equilibrium
from .routing.network import DRIVING, RIDING, DemandMatrix, Network, generate_demands
from .solvers import SolverOptions, solve_projection

log = logging.getLogger(__name__)

GRAD_MODES = ("auto", "implicit", "explicit", "fd")


# ------------------------------------------------------------------ objectives

def travel_time(cm: CostModel, x, lam):
    """TT = sum t_e(x_e) x_e, with its flow gradient and direct λ gradient."""
    t = cm.time(x, lam)
    return float(t @ x), t + x * cm.dtime_dx(x, lam), x @ cm.dtime_dlam(x, lam)


def crowding_cost(cm: CostModel, x, lam):
    b = cm.crowding(x, lam)
    return float(b @ x), b + x * cm.dcrowding_dx(x, lam), x @ cm.dcrowding_dlam(x, lam)


def squared_loss(observed_edges, target):
    idx = np.asarray(observed_edges, dtype=int)
    target = np.asarray(target, dtype=float)

    def loss(cm, x, lam):
        r = x[idx] - target
        g = np.zeros_like(x)
        g[idx] = 2.0 * r
        return float(r @ r), g, np.zeros(cm.n_params)

    return loss


@dataclass
class PipelineResult:
    value: float
    grad: np.ndarray
    mode_used: str
    state: EquilibriumState
    fallback: bool = False
    notes: List[str] = field(default_factory=list)


def _solve_or_raise(net, behavior, demand, opts, **kw):
    st = solve_equilibrium(net, behavior, demand, opts, **kw)
    if not st.converged:
        raise ConvergenceError(f"equilibrium solve stopped with status {st.status} (gap {st.wardrop_gap:.3e})",
                               best=st.edge_flows, residual=st.wardrop_gap)
    return st


def _replay_trace(state: EquilibriumState, opts: SolverOptions):
    """Projection-method trajectory on the terminal path set from its all-or-nothing start."""
    ps = state.paths
    f0 = np.zeros(len(ps))
    for w, js in enumerate(ps.per_od()):
        if js:
            f0[js[0]] = state.demand[w]
    _, tr = solve_projection(state.problem, state.lam, opts, f0)
    return tr


def loss_and_grad(net: Network, behavior: BehaviorParams, demand, opts: SolverOptions, objective: Callable, *,
                  params: Sequence[str], lam, tolls=None, mode: str = "auto", warm=None,
                  fd_step: float = 1e-5, fd_opts: Optional[SolverOptions] = None,
                  replay_opts: Optional[SolverOptions] = None, damping: bool = True) -> PipelineResult:
    """Value and λ-gradient of ``objective(cost_model, x*(λ), λ)``.

    ``objective`` returns ``(value, d/dx, direct d/dλ)``. The flow gradient
    becomes the cotangent of the VI layer. ``implicit`` differentiates the
    edge form for single-origin networks and the path form otherwise;
    ``explicit`` appends projection layers at the solution, or replays a
    projection trajectory on the terminal path set when ``replay_opts`` is
    given; ``fd`` differences warm-started full solves. ``auto`` tries
    implicit and falls back to explicit, flagging the fallback.
    """
    if mode not in GRAD_MODES:
        raise InputError(f"mode must be one of {GRAD_MODES}, got {mode!r}")
    lam = np.asarray(lam, dtype=float).reshape(-1)
    state = _solve_or_raise(net, behavior, demand, opts, params=params, lam=lam, tolls=tolls, warm=warm)
    cm = state.cost_model
    x = state.edge_flows
    val, gx, gl = objective(cm, x, lam)
    notes: List[str] = []

    if mode == "fd":
        fo = fd_opts or opts.replace(eps_newton=min(opts.eps_newton, 1e-10), max_iter=max(opts.max_iter, 500))

        def solve(l):
            return _solve_or_raise(net, behavior, demand, fo, params=params, lam=l, tolls=tolls,
                                   warm=state).edge_flows

        g = grad_fd(state.problem, lam, None, GradientRequest(mode="finite-difference", fd_step=fd_step),
                    solve=solve, objective=lambda xx, l: objective(cm, xx, l)[0])
        return PipelineResult(val, g.value, "fd", state)

    def implicit():
        origins = {a for a, _ in net.od_pairs}
        req = GradientRequest(mode="implicit", damping=damping)
        if len(origins) == 1:
            prob = assemble_vi(net, behavior, state.demand, "edge", cost_model=cm)
            g = grad_implicit(prob, lam, x, None, replace(req, cotangent=gx), r=1.0)
        else:
            prob = state.problem
            g = grad_implicit(prob, lam, state.path_flows, None,
                              replace(req, cotangent=prob.paths.Delta.T @ gx), r=1.0)
        return g

    def explicit():
        c = state.paths.Delta.T @ gx
        req = GradientRequest(mode="explicit", cotangent=c, damping=damping)
        if replay_opts is not None:
            tr = _replay_trace(state, replay_opts)
            return grad_explicit(tr.problem, lam, tr, req)
        return grad_explicit_tail(state.problem, lam, state.path_flows, req)

    fallback = False
    if mode == "implicit":
        g = implicit()
    elif mode == "explicit":
        g = explicit()
    else:
        try:
            g = implicit()
            if not g.condition_estimate < AUTO_COND_LIMIT:
                raise DegeneracyError(f"condition estimate {g.condition_estimate:.2e}")
        except DegeneracyError as exc:
            notes.append(f"implicit unavailable ({exc}); explicit fallback")
            fallback = True
            g = explicit()
    notes.extend(g.notes)
    return PipelineResult(val, g.dL_dlam + gl, g.mode_used, state, fallback or g.degeneracy_flag, notes)


# --------------------------------------------------------------------- learning

INIT_1 = {"gamma": 0.2, "tau": 1.5, "q_cap": 10.0}
INIT_2 = {"gamma": 1.5, "tau": 0.2, "q_cap": 30.0}
PRESETS = {
    "a": (INIT_1, 1e-3),
    "b": (INIT_1, 1e-4),
    "c": (INIT_2, 1e-3),
    "d": (INIT_2, 1e-4),
}
Q_CAP_FLOOR = 1e-3


@dataclass
class LearningSpec:
    """What to learn and how; see :meth:`preset` for the four reference settings."""

    learnable: tuple = ("gamma", "tau", "q_cap")
    init: Dict[str, float] = field(default_factory=lambda: dict(INIT_1))
    lr: Dict[str, float] = field(default_factory=lambda: {"gamma": 1e-3, "tau": 1e-4, "q_cap": 1e-4})
    n_periods: int = 8
    n_train: int = 6
    observed: Optional[Sequence[int]] = None
    rounding: Optional[float] = 0.1
    epochs: int = 50
    seed: int = 0
    demand_low: float = 5.0
    demand_high: float = 10.0
    grad_mode: str = "auto"
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(eps_proj=10.0, eps_newton=1e-8, max_iter=500))
    truth: BehaviorParams = field(default_factory=BehaviorParams)
    divergence_factor: float = 1e6

    def __post_init__(self):
        bad = set(self.learnable) - {"gamma", "tau", "q_cap"}
        if bad:
            raise InputError(f"unknown learnable parameters {sorted(bad)}")
        if any(self.lr.get(k, 0.0) < 0 for k in self.learnable):
            raise InputError("learning rates must be nonnegative")
        if not 0 < self.n_train < self.n_periods:
            raise InputError("need 0 < n_train < n_periods so train and test are both nonempty")
        if any(not v >= 0 for v in self.init.values()) or any(
                not v > 0 for k, v in self.init.items() if k.startswith("q_cap")):
            raise InputError("initial values must lie in their physical boxes")
        if self.rounding is not None and self.rounding <= 0:
            raise InputError("rounding granularity must be positive")
        if self.grad_mode not in GRAD_MODES:
            raise InputError(f"grad_mode must be one of {GRAD_MODES}")
        if self.epochs < 0:
            raise InputError("epochs must be nonnegative")

    @classmethod
    def preset(cls, name: str, **kw):
        if name not in PRESETS:
            raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        init, lr_gamma = PRESETS[name]
        return cls(init=dict(init), lr={"gamma": lr_gamma, "tau": 1e-4, "q_cap": 1e-4}, **kw)


@dataclass
class TrainTrace:
    param_names: List[str]
    rows: List[dict]
    final: np.ndarray
    status: str = "completed"
    fallbacks: int = 0
    notes: List[str] = field(default_factory=list)

    @property
    def train_losses(self):
        return np.array([r["train_loss"] for r in self.rows])

    @property
    def test_losses(self):
        return np.array([r["test_loss"] for r in self.rows])

    def final_params(self):
        return dict(zip(self.param_names, map(float, self.final)))

    def to_csv(self, fh=None):
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_loss", *self.param_names])
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["test_loss"]), *map(repr, r["params"])])
        return out.getvalue() if fh is None else None


class LearningProblem:
    """Observations, parameter layout and per-period warm starts for one spec."""

    def __init__(self, net: Network, spec: LearningSpec, demands: Optional[List[DemandMatrix]] = None,
                 observations: Optional[np.ndarray] = None):
        self.net = net
        self.spec = spec
        riding = [k for k, e in enumerate(net.edges) if e.kind == RIDING]
        names = []
        for p in spec.learnable:
            names.extend(f"q_cap:{k}" for k in riding) if p == "q_cap" else names.append(p)
        self.names = names
        self.truth_model = CostModel(net, spec.truth, names)
        self.truth = self.truth_model.defaults()
        self.lo = np.array([Q_CAP_FLOOR if n.startswith("q_cap") else 0.0 for n in names])
        self.lr = np.array([spec.lr.get(n.split(":")[0], 0.0) for n in names])
        try:
            self.lam0 = np.array([spec.init.get(n, spec.init.get(n.split(":")[0])) for n in names], dtype=float)
        except TypeError:
            raise InputError(f"init must give a value for each of {spec.learnable}") from None
        if spec.observed is None:
            self.observed = [k for k, e in enumerate(net.edges) if e.kind in (DRIVING, RIDING)]
        else:
            self.observed = list(spec.observed)
        self.demands = demands or generate_demands(len(net.od_pairs), spec.n_periods, spec.demand_low,
                                                   spec.demand_high, seed=spec.seed)
        if len(self.demands) != spec.n_periods:
            raise InputError(f"expected {spec.n_periods} demand periods")
        self.obs = observations if observations is not None else self._observe()
        self.warm: Dict[int, EquilibriumState] = {}
        self.fallbacks = 0

    def _observe(self):
        rows = []
        for dm in self.demands:
            st = _solve_or_raise(self.net, self.spec.truth, dm, self.spec.solver, params=self.names, lam=self.truth)
            x = st.edge_flows[self.observed]
            if self.spec.rounding:
                x = np.round(x / self.spec.rounding) * self.spec.rounding
            rows.append(x)
        return np.array(rows)

    def loss_and_grad(self, lam, period, mode=None):
        res = loss_and_grad(self.net, self.spec.truth, self.demands[period], self.spec.solver,
                            squared_loss(self.observed, self.obs[period]), params=self.names, lam=lam,
                            mode=mode or self.spec.grad_mode, warm=self.warm.get(period))
        self.warm[period] = res.state
        self.fallbacks += int(res.fallback)
        return res.value, res.grad, res

    def loss(self, lam, period):
        st = _solve_or_raise(self.net, self.spec.truth, self.demands[period], self.spec.solver,
                             params=self.names, lam=lam, warm=self.warm.get(period))
        self.warm[period] = st
        r = st.edge_flows[self.observed] - self.obs[period]
        return float(r @ r)

    def mean_loss(self, lam, periods):
        return float(np.mean([self.loss(lam, p) for p in periods]))

    def project(self, lam):
        return np.maximum(lam, self.lo)


def learn(spec: LearningSpec, net: Network, *, problem: Optional[LearningProblem] = None,
          callback: Optional[Callable] = None) -> TrainTrace:
    """SGD with one period per step, periods shuffled each epoch by a seeded generator.

    Row 0 of the trace holds the losses at the initial parameters.
    """
    lp = problem or LearningProblem(net, spec)
    rng = np.random.default_rng(spec.seed)
    train = list(range(spec.n_train))
    test = list(range(spec.n_train, spec.n_periods))
    lam = lp.project(lp.lam0.copy())
    tr0, te0 = lp.mean_loss(lam, train), lp.mean_loss(lam, test)
    rows = [{"epoch": 0, "train_loss": tr0, "test_loss": te0, "params": lam.tolist()}]
    status = "completed"
    notes: List[str] = []
    for epoch in range(1, spec.epochs + 1):
        for p in rng.permutation(train):
            _, g, _ = lp.loss_and_grad(lam, int(p))
            lam = lp.project(lam - lp.lr * g)
        tr, te = lp.mean_loss(lam, train), lp.mean_loss(lam, test)
        rows.append({"epoch": epoch, "train_loss": tr, "test_loss": te, "params": lam.tolist()})
        if callback is not None:
            callback(rows[-1])
        if not np.isfinite(tr) or tr > spec.divergence_factor * max(tr0, 1e-300):
            status = "diverged"
            notes.append(f"epoch {epoch}: training loss {tr:.3e} exceeds {spec.divergence_factor:g} x initial; aborted")
            log.warning(notes[-1])
            break
    if lp.fallbacks:
        notes.append(f"{lp.fallbacks} gradient evaluations fell back to explicit mode")
    return TrainTrace(lp.names, rows, lam, status, lp.fallbacks, notes)


# ----------------------------------------------------------------- intervention

@dataclass
class InterventionSpec:
    """Tolls on ``edges`` (default: every driving edge) within ``[toll_lo, toll_hi]``.

    ``capacity_edges`` adds capacities ``s_e`` as design variables, boxed to
    ``[s_lo_factor, s_hi_factor]`` times their current value.
    """

    edges: Optional[Sequence[int]] = None
    toll_lo: float = 0.0
    toll_hi: float = 10.0
    capacity_edges: Sequence[int] = ()
    s_lo_factor: float = 1.0
    s_hi_factor: float = 2.0
    budget_fraction: float = 0.15
    rho0: float = 1.0
    rho_factor: float = 10.0
    rho_max: float = 1e8
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    max_outer: int = 8
    max_inner: int = 40
    tol: float = 1e-6
    constraint_tol: float = 1e-3
    grad_mode: str = "auto"
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(eps_proj=10.0, eps_newton=1e-8, max_iter=500))

    def __post_init__(self):
        if self.toll_hi < self.toll_lo:
            raise InputError("toll bounds are inconsistent")
        if not 0 < self.s_lo_factor <= self.s_hi_factor:
            raise InputError("capacity bounds are inconsistent")
        if not self.budget_fraction > -1:
            raise InputError("budget_fraction must exceed -1")
        if not 0 < self.c1 < 1 or not 0 < self.backtrack < 1 or self.max_backtracks < 1:
            raise InputError("Armijo parameters out of range")
        if self.rho0 <= 0 or self.rho_factor <= 1:
            raise InputError("penalty schedule must start positive and grow")
        if self.grad_mode not in GRAD_MODES:
            raise InputError(f"grad_mode must be one of {GRAD_MODES}")


@dataclass
class InterventionResult:
    names: List[str]
    design: np.ndarray
    before: dict
    after: dict
    truth_before: Optional[dict]
    truth_after: Optional[dict]
    status: str
    trace: List[dict]
    bound: float

    @staticmethod
    def _pct(a, b):
        return 100.0 * (b - a) / a if a else 0.0

    def summary(self):
        out = {
            "tt_reduction_pct": -self._pct(self.before["total_travel_time"], self.after["total_travel_time"]),
            "crowding_increase_pct": self._pct(self.before["total_crowding_cost"], self.after["total_crowding_cost"]),
            "design": {k: float(v) for k, v in zip(self.names, self.design)},
            "status": self.status,
        }
        if self.truth_after is not None:
            out["truth_tt_reduction_pct"] = -self._pct(self.truth_before["total_travel_time"],
                                                       self.truth_after["total_travel_time"])
            out["truth_crowding_increase_pct"] = self._pct(self.truth_before["total_crowding_cost"],
                                                           self.truth_after["total_crowding_cost"])
        return out

    def trace_csv(self, fh=None):
        cols = ["iter", "outer", "rho", "prev_objective", "objective", "tt", "crowding", "step", "backtracks",
                "armijo_rhs"]
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        for r in self.trace:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in cols])
        return out.getvalue() if fh is None else None


def design_tolls(spec: InterventionSpec, net: Network, behavior: BehaviorParams, demand,
                 truth: Optional[BehaviorParams] = None, init=None) -> InterventionResult:
    """Minimize ``TT + rho * max(0, crowding - bound)^2`` over tolls by projected steepest descent.

    ``bound = (1 + budget_fraction) * baseline crowding`` under ``behavior``.
    Each step backtracks until the projected Armijo condition
    ``J(new) <= J + c1 * g.(new - old)`` holds; ``rho`` grows by
    ``rho_factor`` whenever an outer round ends with the bound violated.
    With ``truth`` given, the baseline and the final design are re-solved
    under it and reported separately.
    """
    edges = list(spec.edges) if spec.edges is not None else [k for k, e in enumerate(net.edges) if e.kind == DRIVING]
    caps = list(spec.capacity_edges)
    params = [f"toll:{k}" for k in edges] + [f"s:{k}" for k in caps]
    opts = spec.solver
    s0 = np.array([net.edges[k].params.s for k in caps], dtype=float)
    if not np.all(np.isfinite(s0)):
        raise InputError("capacity design needs edges with finite capacity")
    lam0 = np.concatenate([np.zeros(len(edges)), s0])
    lo = np.concatenate([np.full(len(edges), spec.toll_lo), s0 * spec.s_lo_factor])
    hi = np.concatenate([np.full(len(edges), spec.toll_hi), s0 * spec.s_hi_factor])
    box = lambda v: np.clip(v, lo, hi)
    design = box(lam0.copy() if init is None else np.asarray(init, dtype=float))

    base = _solve_or_raise(net, behavior, demand, opts, params=params, lam=lam0)
    before = metrics(base)
    bound = (1.0 + spec.budget_fraction) * before["total_crowding_cost"]
    warm = {"state": base}

    def combined(cm, x, l):
        tt, gt, lt = travel_time(cm, x, l)
        cr, gc, lc = crowding_cost(cm, x, l)
        v = max(0.0, cr - bound)
        return tt + rho * v * v, gt + 2 * rho * v * gc, lt + 2 * rho * v * lc

    def evaluate(lam, with_grad):
        if with_grad:
            res = loss_and_grad(net, behavior, demand, opts, combined, params=params, lam=lam,
                                mode=spec.grad_mode, warm=warm["state"])
            st, grad = res.state, res.grad
        else:
            st = _solve_or_raise(net, behavior, demand, opts, params=params, lam=lam, warm=warm["state"])
            grad = None
        warm["state"] = st
        tt = travel_time(st.cost_model, st.edge_flows, lam)[0]
        cr = crowding_cost(st.cost_model, st.edge_flows, lam)[0]
        v = max(0.0, cr - bound)
        return tt + rho * v * v, grad, tt, cr, st

    rho = spec.rho0
    trace: List[dict] = []
    it = 0
    status = "outer-limit"
    for outer in range(spec.max_outer):
        J, g, tt, cr, state = evaluate(design, True)
        inner = "iteration-limit"
        step = 1.0
        for _ in range(spec.max_inner):
            pg = box(design - g) - design
            if np.max(np.abs(pg), initial=0.0) <= spec.tol * (1.0 + np.max(np.abs(design), initial=0.0)):
                inner = "converged"
                break
            alpha = min(2.0 * step, 1e3)
            accepted = False
            for nb in range(spec.max_backtracks + 1):
                trial = box(design - alpha * g)
                rhs = spec.c1 * float(g @ (trial - design))
                if evaluate(trial, False)[0] <= J + rhs:
                    accepted = True
                    break
                alpha *= spec.backtrack
            it += 1
            if not accepted:
                inner = "stalled"
                trace.append({"iter": it, "outer": outer, "rho": rho, "prev_objective": J, "objective": J,
                              "tt": tt, "crowding": cr, "step": 0.0, "backtracks": nb, "armijo_rhs": 0.0})
                break
            step, design, J_prev = alpha, trial, J
            J, g, tt, cr, state = evaluate(design, True)
            trace.append({"iter": it, "outer": outer, "rho": rho, "prev_objective": J_prev, "objective": J,
                          "tt": tt, "crowding": cr, "step": alpha, "backtracks": nb, "armijo_rhs": rhs})
        feasible = cr <= bound * (1.0 + spec.constraint_tol)
        if feasible:
            status = inner
            break
        if rho * spec.rho_factor > spec.rho_max:
            status = "infeasible"
            break
        rho *= spec.rho_factor
    if warm["state"] is not state:
        # the last evaluation may have been a rejected trial point
        state = _solve_or_raise(net, behavior, demand, opts, params=params, lam=design, warm=state)

    after = metrics(state)
    truth_before = truth_after = None
    if truth is not None:
        tb = _solve_or_raise(net, truth, demand, opts, params=params, lam=lam0)
        ta = _solve_or_raise(net, truth, demand, opts, params=params, lam=design, warm=tb)
        truth_before, truth_after = metrics(tb), metrics(ta)
    for m in (before, after, truth_before, truth_after):
        if m is not None:
            m.pop("per_edge", None)
    return InterventionResult(params, design, before, after, truth_before, truth_after, status, trace, bound)

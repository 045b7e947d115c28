"""Routing VIs in path and edge form, Wardrop equilibrium by column generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import PolyhedralSet, VIProblem
from ..errors import InputError
from ..solvers import SolverOptions, SolveTrace, solve_pn, solve_projection
from .costs import BehaviorParams, CostModel
from .network import DemandMatrix, Network
from .paths import PathSet, shortest_paths

__all__ = [
    "RoutingProblem",
    "EquilibriumState",
    "assemble_vi",
    "solve_equilibrium",
    "wardrop_gap",
    "metrics",
]


@dataclass(frozen=True, eq=False)
class RoutingProblem(VIProblem):
    """A :class:`VIProblem` that remembers where it came from."""

    form: str = "path"
    cost_model: Optional[CostModel] = None
    paths: Optional[PathSet] = None
    demand: Optional[np.ndarray] = None
    origins: tuple = ()

    @property
    def net(self):
        return self.cost_model.net

    def edge_flows(self, z):
        z = np.asarray(z, dtype=float)
        if self.form == "path":
            return self.paths.Delta @ z
        return z.reshape(len(self.origins), -1).sum(axis=0)


def _demand_vector(net, demands):
    q = demands.values if isinstance(demands, DemandMatrix) else np.asarray(demands, dtype=float).reshape(-1)
    if q.size != len(net.od_pairs):
        raise InputError(f"expected {len(net.od_pairs)} od demands, got {q.size}")
    return np.asarray(q, dtype=float)


def _path_lmo(paths: PathSet, q):
    groups = paths.per_od()

    def lmo(c, pset):
        v = np.zeros(len(paths))
        for w, js in enumerate(groups):
            if js:
                v[js[int(np.argmin(c[js]))]] = q[w]
        return v

    return lmo


def assemble_vi(net: Network, behavior: BehaviorParams, demands, form: str = "path",
                paths: Optional[PathSet] = None, *, params: Sequence[str] = (), tolls=None,
                cost_model: Optional[CostModel] = None) -> RoutingProblem:
    """Build the routing VI.

    ``form="path"`` uses path flows ``f`` with ``F = Delta^T c(Delta f)`` over
    ``{f >= 0, M f = q}``. ``form="edge"`` uses one edge-flow vector per
    origin with node conservation; on networks with cycles each origin's
    flows are also capped by its total demand so the set stays bounded.
    ``params`` names the entries of λ (see :class:`CostModel`).
    """
    cm = cost_model or CostModel(net, behavior, params, tolls)
    q = _demand_vector(net, demands)
    lo, hi = cm.bounds()
    if form == "path":
        if paths is None or len(paths) == 0:
            raise InputError("path form needs a nonempty path set")
        if paths.net is not net:
            raise InputError("path set belongs to a different network")
        missing = [w for w, js in enumerate(paths.per_od()) if not js and q[w] > 0]
        if missing:
            raise InputError(f"od {missing[0]} has positive demand but no path")
        D = paths.Delta
        K = len(paths)
        groups = [js for js in paths.per_od() if js]
        totals = [q[w] for w, js in enumerate(paths.per_od()) if js]
        omega = PolyhedralSet.simplex_product(groups, totals)

        def F(f, lam):
            return D.T @ cm.cost(D @ f, lam)

        def dF_dz(f, lam):
            x = D @ f
            return (D.T * cm.dcost_dx(x, lam)) @ D

        def dF_dlam(f, lam):
            return D.T @ cm.dcost_dlam(D @ f, lam)

        return RoutingProblem(K, F, omega, cm.n_params, dF_dz, dF_dlam, None, lo, hi,
                              _path_lmo(paths, q), f"{net.name}/path", "path", cm, paths, q, ())
    if form != "edge":
        raise InputError(f"form must be 'path' or 'edge', got {form!r}")

    E = net.n_edges
    idx = net.node_index
    origins = tuple(dict.fromkeys(a for a, _ in net.od_pairs))
    N = np.zeros((len(net.nodes), E))
    for k, e in enumerate(net.edges):
        N[idx[e.tail], k] = 1.0
        N[idx[e.head], k] = -1.0
    O = len(origins)
    M = np.zeros((O * len(net.nodes), O * E))
    rhs = np.zeros(O * len(net.nodes))
    totals = np.zeros(O)
    for i, o in enumerate(origins):
        M[i * len(net.nodes):(i + 1) * len(net.nodes), i * E:(i + 1) * E] = N
        for (a, b), qw in zip(net.od_pairs, q):
            if a == o:
                rhs[i * len(net.nodes) + idx[a]] += qw
                rhs[i * len(net.nodes) + idx[b]] -= qw
                totals[i] += qw
    n = O * E
    A = [-np.eye(n)]
    b = [np.zeros(n)]
    if net.has_cycle():
        A.append(np.eye(n))
        b.append(np.repeat(totals, E))
    omega = PolyhedralSet(A=np.vstack(A), b=np.concatenate(b), M=M, q=rhs)

    def agg(z):
        return z.reshape(O, E).sum(axis=0)

    def F(z, lam):
        return np.tile(cm.cost(agg(z), lam), O)

    def dF_dz(z, lam):
        return np.kron(np.ones((O, O)), np.diag(cm.dcost_dx(agg(z), lam)))

    def dF_dlam(z, lam):
        return np.tile(cm.dcost_dlam(agg(z), lam), (O, 1))

    return RoutingProblem(n, F, omega, cm.n_params, dF_dz, dF_dlam, None, lo, hi, None,
                          f"{net.name}/edge", "edge", cm, None, q, origins)


def wardrop_gap(cost_model: CostModel, x, q, lam=None, sp=None):
    """``<c(x), x> - sum_w q_w * (shortest path cost of w)``; zero exactly at equilibrium."""
    c = cost_model.cost(x, lam)
    if sp is None:
        sp = shortest_paths(cost_model.net, c)
    return float(c @ x - sum(qw * cw for qw, (cw, _) in zip(q, sp)))


@dataclass
class EquilibriumState:
    edge_flows: np.ndarray
    path_flows: np.ndarray
    paths: PathSet
    wardrop_gap: float
    status: str
    iterations: int
    lam: np.ndarray
    demand: np.ndarray
    cost_model: CostModel = field(repr=False)
    problem: RoutingProblem = field(repr=False)
    trace: SolveTrace = field(repr=False)
    paths_added: int = 0

    @property
    def converged(self):
        return self.status == "converged"

    def path_costs(self):
        return self.paths.Delta.T @ self.cost_model.cost(self.edge_flows, self.lam)


class _ColumnGeneration:
    """Shared gap function and refresh hook; caches the shortest-path sweep per iterate."""

    def __init__(self, cm: CostModel, q, lam, paths: PathSet, builder):
        self.cm, self.q, self.lam = cm, q, lam
        self.paths = paths
        self.builder = builder
        self._key = None
        self._sp = None
        self.added = 0

    def _sweep(self, problem, z):
        key = (id(problem), z.tobytes())
        if key != self._key:
            x = problem.edge_flows(z)
            self._sp = (x, shortest_paths(self.cm.net, self.cm.cost(x, self.lam)))
            self._key = key
        return self._sp

    def gap(self, problem, lam, z, pset):
        x, sp = self._sweep(problem, z)
        return wardrop_gap(self.cm, x, self.q, lam, sp)

    def refresh(self, problem, z):
        _, sp = self._sweep(problem, z)
        new = [(w, p) for w, (_, p) in enumerate(sp) if self.q[w] > 0]
        paths, added = self.paths.with_paths(new)
        if not added:
            return problem, z
        self.added += added
        self.paths = paths
        z_new = np.concatenate([z, np.zeros(added)])
        return self.builder(paths), z_new


def initial_paths(net: Network, cm: CostModel, q, lam=None):
    """All-or-nothing path set at zero flow and the matching path flows."""
    sp = shortest_paths(net, cm.cost(np.zeros(net.n_edges), lam))
    items = list(enumerate(p for _, p in sp))
    paths = PathSet(net, tuple(p for _, p in items), tuple(w for w, _ in items))
    return paths, np.array([q[w] for w, _ in items], dtype=float)


def _warm_flows(paths: PathSet, f_old, q_old, q):
    f = np.zeros(len(paths))
    for w, js in enumerate(paths.per_od()):
        if not js:
            continue
        if q_old[w] > 0:
            f[js] = f_old[js] * (q[w] / q_old[w])
        else:
            f[js[0]] = q[w]
    return f


def solve_equilibrium(net: Network, behavior: BehaviorParams, demands, opts: SolverOptions, *,
                      params: Sequence[str] = (), lam=None, tolls=None, method: str = "pn",
                      warm: Optional[EquilibriumState] = None, paths: Optional[PathSet] = None,
                      column_generation: bool = True) -> EquilibriumState:
    """Wardrop equilibrium on the path form.

    Starts from the all-or-nothing path set (or ``warm``'s paths with flows
    rescaled to the new demand) and lets the solver add the current
    shortest paths before every iteration. The solver's merit function is
    the full-network Wardrop gap, so convergence means ``gap <= eps_newton``
    with respect to every path, not only the generated ones.
    """
    cm = CostModel(net, behavior, params, tolls)
    lam = cm.defaults() if lam is None else np.asarray(lam, dtype=float).reshape(-1)
    q = _demand_vector(net, demands)
    if warm is not None:
        if warm.paths.net is not net:
            raise InputError("warm start belongs to a different network")
        ps = warm.paths
        f0 = _warm_flows(ps, warm.path_flows, warm.demand, q)
        missing = [w for w, js in enumerate(ps.per_od()) if not js and q[w] > 0]
        if missing:
            p_aon, _ = initial_paths(net, cm, q, lam)
            extra = [(w, p) for w, p in zip(p_aon.od, p_aon.paths) if w in missing]
            ps, _ = ps.with_paths(extra)
            f0 = np.concatenate([f0, q[[w for w, _ in extra]]])
    elif paths is not None:
        ps = paths
        f0 = _warm_flows(ps, np.ones(len(ps)), np.array([len(j) for j in ps.per_od()], float), q)
    else:
        ps, f0 = initial_paths(net, cm, q, lam)

    def build(p):
        return assemble_vi(net, behavior, q, "path", p, cost_model=cm)

    problem = build(ps)
    cg = _ColumnGeneration(cm, q, lam, ps, build)
    solver = {"pn": solve_pn, "projection": solve_projection}.get(method)
    if solver is None:
        raise InputError(f"method must be 'pn' or 'projection', got {method!r}")
    z, trace = solver(problem, lam, opts, f0, gap_fn=cg.gap,
                      refresh=cg.refresh if column_generation else None)
    problem = trace.problem
    x = problem.edge_flows(z)
    g = wardrop_gap(cm, x, q, lam)
    return EquilibriumState(x, np.asarray(z), problem.paths, g, trace.status, len(trace.records),
                            lam, q, cm, problem, trace, cg.added)


def metrics(state: EquilibriumState, net: Optional[Network] = None,
            behavior: Optional[BehaviorParams] = None):
    """Total travel time, total crowding cost and a per-edge table.

    Travel time counts congestion delay on mode edges and waiting on
    starting edges. ``behavior`` re-prices crowding (entries bound to λ keep
    the state's values).
    """
    cm = state.cost_model
    if behavior is not None or (net is not None and net is not cm.net):
        cm = CostModel(net or cm.net, behavior or cm.behavior, cm.params, cm.toll)
    x = state.edge_flows
    t = cm.time(x, state.lam)
    b = cm.crowding(x, state.lam)
    c = cm.cost(x, state.lam)
    rows = []
    for k, e in enumerate(cm.net.edges):
        rows.append({"edge": k, "tail": e.tail, "head": e.head, "kind": e.kind, "flow": float(x[k]),
                     "cost": float(c[k]), "time": float(t[k]), "crowding": float(b[k])})
    return {"total_travel_time": float(t @ x), "total_crowding_cost": float(b @ x), "per_edge": rows}

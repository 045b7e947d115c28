import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vil.core import PolyhedralSet
from vil.errors import ConnectivityError, InputError, StructureError
from vil.projection import project
from vil.routing import (
    BehaviorParams,
    CostModel,
    DemandMatrix,
    Edge,
    EdgeCostParams,
    Network,
    PathSet,
    assemble_vi,
    demands_from_dict,
    demands_to_dict,
    edge_cost,
    expand_network,
    generate_demands,
    load_instance,
    metrics,
    network_from_dict,
    network_to_dict,
    shortest_paths,
    shortest_paths_aon,
    solve_equilibrium,
    wardrop_gap,
)
from vil.routing.network import CONNECTOR, DRIVING, RIDING, STARTING
from vil.solvers import SolverOptions

OPTS = SolverOptions(eps_proj=10.0, eps_newton=1e-10, max_iter=500)


def linear_edge(tail, head, T=1.0, coeff=1.0, s=1.0, power=1, kind=DRIVING):
    return Edge(tail, head, kind, EdgeCostParams(T=T, s=s, bpr_coeff=coeff, bpr_power=power))


def parallel(T1=1.0, T2=1.0):
    # two parallel roads with t = T(1 + x)
    return Network(("a", "b", "c"), (linear_edge("a", "b", T1), linear_edge("a", "c", T2),
                                     Edge("c", "b", DRIVING, EdgeCostParams())), (("a", "b"),))


@pytest.fixture(scope="module")
def braess():
    return load_instance("braess")


@pytest.fixture(scope="module")
def city():
    return load_instance("linear_city")


# ---------------------------------------------------------------- expansion

def test_expand_corridor():
    base = Network(("A", "B"), (Edge("A", "B", DRIVING, EdgeCostParams(T=1, s=10)),
                                Edge("A", "B", RIDING, EdgeCostParams(T=1.1, q_cap=18))), (("A", "B"),))
    net = expand_network(base)
    assert len(net.nodes) == 8
    assert net.od_pairs == (("As", "Be"),)
    sp = net.find_edge("As", "Ap")
    assert net.edges[sp].kind == STARTING and net.edges[sp].params.w == 1.0
    assert net.edges[net.find_edge("As", "Av")].params.w == 0.0
    assert net.edges[net.find_edge("Ap", "Bp")].kind == RIDING


def test_expand_driving_only_has_no_connectors():
    base = Network(("A", "B"), (Edge("A", "B", DRIVING, EdgeCostParams(T=1)),), (("A", "B"),))
    net = expand_network(base)
    assert all(e.kind == DRIVING for e in net.edges)
    assert net.od_pairs == (("Av", "Bv"),)


def test_linear_city_counts(city):
    assert len(city.nodes) == 20
    assert len(city.edges_of_kind(RIDING)) == 8
    assert len(city.edges_of_kind(DRIVING)) == 8
    assert len(city.od_pairs) == 20
    caps = sorted({e.params.q_cap for e in city.edges if e.kind == RIDING})
    assert caps == [18.0, 22.0]


def test_expand_rejects_non_mode_edges_and_double_expansion(city):
    with pytest.raises(StructureError):
        expand_network(city)
    base = Network(("A", "B"), (Edge("A", "B", CONNECTOR),), (("A", "B"),))
    with pytest.raises(StructureError):
        expand_network(base)


def test_unreachable_od():
    with pytest.raises(ConnectivityError):
        Network(("A", "B"), (Edge("B", "A", DRIVING),), (("A", "B"),))


@pytest.mark.parametrize("bad", [
    dict(nodes=("A", "A"), edges=(), od_pairs=()),
    dict(nodes=("A",), edges=(Edge("A", "A", DRIVING),), od_pairs=()),
    dict(nodes=("A", "B"), edges=(Edge("A", "C", DRIVING),), od_pairs=()),
])
def test_network_validation(bad):
    with pytest.raises(InputError):
        Network(**bad)


def test_edge_params_validation():
    with pytest.raises(InputError):
        EdgeCostParams(T=-1)
    with pytest.raises(InputError):
        EdgeCostParams(s=0)


# -------------------------------------------------------------------- costs

def test_edge_cost_values():
    b = BehaviorParams()
    riding = EdgeCostParams(T=1.1, m=0.05, q_cap=18)
    assert edge_cost(riding, b, 0.0, kind=RIDING) == pytest.approx(1.1 + 0.05 + 1.0)
    assert edge_cost(riding, BehaviorParams(riding_form="pure"), 0.0, kind=RIDING) == pytest.approx(1.15)
    assert edge_cost(EdgeCostParams(w=3.0), b, 7.0, kind=STARTING) == 3.0
    road = EdgeCostParams(T=2.0, s=5.0, bpr_coeff=0.15, bpr_power=4)
    assert edge_cost(road, BehaviorParams(gamma=0), 5.0) == pytest.approx(2.0 * 1.15)
    assert edge_cost(road, b, 0.0, toll=0.5) == pytest.approx(2.5)
    with pytest.raises(InputError):
        edge_cost(road, b, -1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 50), st.floats(1e-3, 5))
def test_costs_monotone(x, dx):
    net = load_instance("two_loop")
    cm = CostModel(net, BehaviorParams())
    xs = np.full(net.n_edges, x)
    assert np.all(cm.cost(xs + dx) >= cm.cost(xs) - 1e-12)
    assert np.all(cm.dcost_dx(xs) >= 0)


def test_cost_model_matches_edge_cost(city):
    b = BehaviorParams(gamma=0.7, tau=1.3)
    cm = CostModel(city, b)
    x = np.linspace(0, 30, city.n_edges)
    direct = [edge_cost(e, b, xi) for e, xi in zip(city.edges, x)]
    assert np.allclose(cm.cost(x), direct)


def test_cost_model_param_jacobian_fd(city):
    riding = [k for k, e in enumerate(city.edges) if e.kind == RIDING]
    driving = [k for k, e in enumerate(city.edges) if e.kind == DRIVING]
    names = ["gamma", "tau", f"q_cap:{riding[0]}", f"s:{driving[1]}", f"toll:{driving[2]}", f"m:{riding[3]}"]
    cm = CostModel(city, BehaviorParams(), names)
    lam = cm.defaults() + 0.3
    x = np.random.default_rng(1).uniform(0, 20, city.n_edges)
    D = cm.dcost_dlam(x, lam)
    for i in range(len(names)):
        h = 1e-6 * (1 + abs(lam[i]))
        up, dn = lam.copy(), lam.copy()
        up[i] += h
        dn[i] -= h
        fd = (cm.cost(x, up) - cm.cost(x, dn)) / (2 * h)
        assert np.allclose(D[:, i], fd, atol=1e-6), names[i]


def test_q_cap_must_name_riding_edge(city):
    k = city.edges_of_kind(DRIVING)[0]
    with pytest.raises(InputError):
        CostModel(city, BehaviorParams(), [f"q_cap:{k}"])


# ---------------------------------------------------------------- shortest paths

def test_aon_parallel():
    net = parallel(T1=1.0, T2=2.0)
    x, paths = shortest_paths_aon(net, CostModel(net, BehaviorParams()).cost(np.zeros(3)), DemandMatrix([5.0]))
    assert np.allclose(x, [5, 0, 0])
    assert paths == [(0,)]


def test_tie_break_is_lexicographic():
    # a->b->d and a->c->d cost the same; node sequence a,b,d sorts first
    net = Network(("a", "b", "c", "d"), (Edge("a", "c", DRIVING), Edge("c", "d", DRIVING),
                                         Edge("a", "b", DRIVING), Edge("b", "d", DRIVING)), (("a", "d"),))
    sp = shortest_paths(net, np.ones(4))
    assert sp[0][1] == (2, 3)


def test_braess_zero_flow_path(braess):
    cm = CostModel(braess, BehaviorParams())
    sp = shortest_paths(braess, cm.cost(np.zeros(braess.n_edges)))
    # the shortcut route 1-2-3-4 is cheapest when empty
    assert list(PathSet(braess, (sp[0][1],), (0,)).node_sequence(0)) == ["1", "2", "3", "4"]


def test_pathset_validation(braess):
    with pytest.raises(InputError):
        PathSet(braess, ((0, 3),), (0,))  # 1->2 then 3->4 is not contiguous
    with pytest.raises(InputError):
        PathSet(braess, ((0, 2), (0, 2)), (0, 0))
    ps = PathSet(braess, ((0, 2),), (0,))
    ps2, added = ps.with_paths([(0, (1, 3)), (0, (0, 2))])
    assert added == 1 and len(ps2) == 2
    assert ps2.M.shape == (1, 2) and ps2.Delta.shape == (5, 2)


# --------------------------------------------------------------------- VI assembly

def test_path_form(braess):
    ps = PathSet(braess, ((0, 2), (1, 3), (0, 4, 3)), (0, 0, 0))
    cm = CostModel(braess, BehaviorParams())
    prob = assemble_vi(braess, BehaviorParams(), [6.0], "path", ps)
    f = np.array([1.0, 2.0, 3.0])
    x = ps.Delta @ f
    c = cm.cost(x)
    expect = [c[0] + c[2], c[1] + c[3], c[0] + c[4] + c[3]]
    assert np.allclose(prob.F(f, np.zeros(0)), expect)
    assert prob.omega.contains(f)
    assert not prob.omega.contains(np.array([1.0, 2.0, 2.0]))
    J = prob.dF_dz(f, np.zeros(0))
    h = 1e-6
    fd = np.column_stack([(prob.F(f + h * e, np.zeros(0)) - prob.F(f - h * e, np.zeros(0))) / (2 * h)
                          for e in np.eye(3)])
    assert np.allclose(J, fd, atol=1e-5)


def test_edge_form_single_origin(braess):
    prob = assemble_vi(braess, BehaviorParams(), [6.0], "edge")
    assert prob.dim == 5
    x = np.array([3.0, 3.0, 3.0, 3.0, 0.0])
    assert prob.omega.contains(x)
    assert not prob.omega.contains(np.array([3.0, 3.0, 2.0, 3.0, 0.0]))


def test_path_form_requires_paths(braess):
    with pytest.raises(InputError):
        assemble_vi(braess, BehaviorParams(), [6.0], "path", None)
    with pytest.raises(InputError):
        assemble_vi(braess, BehaviorParams(), [6.0], "cycle")


def test_simplex_product_projector_matches_generic():
    rng = np.random.default_rng(3)
    groups = [[0, 1, 2], [3], [4, 5]]
    totals = [2.0, 1.5, 0.7]
    fast = PolyhedralSet.simplex_product(groups, totals)
    M = np.zeros((3, 6))
    for i, g in enumerate(groups):
        M[i, g] = 1.0
    slow = PolyhedralSet(A=-np.eye(6), b=np.zeros(6), M=M, q=np.array(totals))
    for _ in range(20):
        y = rng.normal(scale=2.0, size=6)
        a, b = project(fast, y), project(slow, y)
        assert np.allclose(a.z_star, b.z_star, atol=1e-8)


# ------------------------------------------------------------------ equilibrium

def test_parallel_split_evenly():
    net = parallel()
    st_ = solve_equilibrium(net, BehaviorParams(), [2.0], OPTS)
    assert st_.converged
    assert np.allclose(st_.edge_flows, [1.0, 1.0, 1.0], atol=1e-6)


@pytest.mark.invariant
def test_braess_wardrop(braess):
    for q in (3.0, 12.0, 30.0):
        s = solve_equilibrium(braess, BehaviorParams(), [q], OPTS)
        assert s.converged and s.wardrop_gap <= 1e-8
        costs = s.path_costs()
        used = s.path_flows > 1e-4
        assert np.all(costs[used] - costs.min() <= 1e-3 * (1 + costs.min()))


@pytest.mark.invariant
def test_equilibrium_is_deterministic(city):
    d = generate_demands(len(city.od_pairs), 1, seed=11)[0]
    a = solve_equilibrium(city, BehaviorParams(), d, OPTS)
    b = solve_equilibrium(city, BehaviorParams(), d, OPTS)
    assert a.edge_flows.tobytes() == b.edge_flows.tobytes()
    assert a.paths.paths == b.paths.paths


def test_warm_start_reaches_same_point(city):
    ds = generate_demands(len(city.od_pairs), 2, seed=4)
    a = solve_equilibrium(city, BehaviorParams(), ds[0], OPTS)
    b = solve_equilibrium(city, BehaviorParams(), ds[1], OPTS, warm=a)
    c = solve_equilibrium(city, BehaviorParams(), ds[1], OPTS)
    assert np.allclose(b.edge_flows, c.edge_flows, atol=1e-4)


def test_projection_method_agrees(braess):
    a = solve_equilibrium(braess, BehaviorParams(), [12.0], OPTS)
    b = solve_equilibrium(braess, BehaviorParams(), [12.0], OPTS.replace(max_iter=20000), method="projection")
    assert b.converged
    assert np.allclose(a.edge_flows, b.edge_flows, atol=1e-4)


def _check_invariants(net, s, q):
    assert np.allclose(s.paths.M @ s.path_flows, q, atol=1e-8)
    assert np.array_equal(s.edge_flows, s.paths.Delta @ s.path_flows)
    costs = s.path_costs()
    for w, js in enumerate(s.paths.per_od()):
        if not js:
            continue
        cmin = costs[js].min()
        for j in js:
            if s.path_flows[j] > 1e-4:
                assert costs[j] - cmin <= 1e-3 * (1 + cmin)
    # one more shortest-path sweep finds nothing cheaper than the used paths
    sp = shortest_paths(net, s.cost_model.cost(s.edge_flows, s.lam))
    for w, js in enumerate(s.paths.per_od()):
        if q[w] > 0:
            assert costs[js].min() - sp[w][0] <= 1e-3 * (1 + sp[w][0])


@pytest.mark.invariant
@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 2.0))
def test_city_invariants(seed, scale):
    net = load_instance("linear_city")
    q = generate_demands(len(net.od_pairs), 1, seed=seed)[0].values * scale
    s = solve_equilibrium(net, BehaviorParams(), q, OPTS)
    assert s.converged
    _check_invariants(net, s, q)


@pytest.mark.invariant
def test_two_loop_invariants():
    net = load_instance("two_loop")
    q = generate_demands(len(net.od_pairs), 1, seed=0)[0].values
    s = solve_equilibrium(net, BehaviorParams(), q, SolverOptions(eps_proj=1e3, eps_newton=1e-8, max_iter=300))
    assert s.converged
    _check_invariants(net, s, q)
    assert s.paths_added > 0


@pytest.mark.invariant
def test_wardrop_gap_zero_only_at_equilibrium(braess):
    cm = CostModel(braess, BehaviorParams())
    s = solve_equilibrium(braess, BehaviorParams(), [12.0], OPTS)
    assert abs(wardrop_gap(cm, s.edge_flows, [12.0])) <= 1e-8
    assert wardrop_gap(cm, np.array([12.0, 0, 12.0, 0, 0]), [12.0]) > 1.0


# ---------------------------------------------------------------------- metrics

def test_metrics_trivial():
    net = parallel()
    s = solve_equilibrium(net, BehaviorParams(), [0.0], OPTS)
    m = metrics(s)
    assert m["total_travel_time"] == 0.0 and m["total_crowding_cost"] == 0.0
    one = Network(("a", "b"), (linear_edge("a", "b"),), (("a", "b"),))
    s = solve_equilibrium(one, BehaviorParams(), [2.0], OPTS)
    assert metrics(s)["total_travel_time"] == pytest.approx(6.0)
    assert len(metrics(s)["per_edge"]) == 1


def test_metrics_crowding_counts_riding_only(city):
    q = generate_demands(len(city.od_pairs), 1, seed=2)[0]
    s = solve_equilibrium(city, BehaviorParams(), q, OPTS)
    m = metrics(s)
    rows = m["per_edge"]
    assert all(r["crowding"] == 0 for r in rows if r["kind"] != RIDING)
    assert m["total_crowding_cost"] == pytest.approx(sum(r["crowding"] * r["flow"] for r in rows))
    waiting = sum(r["time"] * r["flow"] for r in rows if r["kind"] == STARTING)
    assert waiting > 0


# ------------------------------------------------------------------------- I/O

def test_network_json_round_trip(city, tmp_path):
    d = network_to_dict(city)
    text = json.dumps(d)
    back = network_from_dict(json.loads(text))
    assert back.nodes == city.nodes and back.od_pairs == city.od_pairs
    assert [e.params for e in back.edges] == [e.params for e in city.edges]
    assert math.isinf(back.edges[city.edges_of_kind(DRIVING)[0]].params.q_cap)


def test_demand_round_trip_and_generator():
    ds = generate_demands(3, 4, seed=9)
    back = demands_from_dict(json.loads(json.dumps(demands_to_dict(ds))))
    assert all(np.array_equal(a.values, b.values) for a, b in zip(ds, back))
    gen = demands_from_dict({"schema": "vil.demand/1",
                             "generator": {"distribution": "uniform", "low": 5, "high": 10, "seed": 9,
                                           "n_periods": 4}}, n_od=3)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(ds, gen))
    assert all(5 <= v <= 10 for d in ds for v in d.values)


def test_demand_validation():
    with pytest.raises(InputError):
        DemandMatrix([1.0, -2.0])
    with pytest.raises(InputError):
        generate_demands(2, 2, low=3, high=1)

"""Network and demand data: validation, mode expansion, JSON round-trips."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConnectivityError, InputError, StructureError

NETWORK_SCHEMA = "vil.network/1"
DEMAND_SCHEMA = "vil.demand/1"

DRIVING, RIDING, STARTING, CONNECTOR = "driving", "riding", "starting", "connector"
EDGE_KINDS = (DRIVING, RIDING, STARTING, CONNECTOR)
MODE_KINDS = (DRIVING, RIDING)
INF = math.inf


@dataclass(frozen=True)
class EdgeCostParams:
    """Per-edge cost constants; ``s`` or ``q_cap`` of ``inf`` switch that term off."""

    T: float = 0.0
    s: float = INF
    m: float = 0.0
    w: float = 0.0
    q_cap: float = INF
    bpr_coeff: float = 1.0
    bpr_power: int = 2

    def __post_init__(self):
        if self.T < 0 or self.m < 0 or self.w < 0:
            raise InputError("T, m and w must be nonnegative")
        if not self.s > 0 or not self.q_cap > 0:
            raise InputError("capacities s and q_cap must be positive")
        if self.bpr_coeff < 0 or self.bpr_power < 1:
            raise InputError("bpr_coeff must be >= 0 and bpr_power >= 1")


@dataclass(frozen=True)
class Edge:
    tail: str
    head: str
    kind: str
    params: EdgeCostParams = field(default_factory=EdgeCostParams)

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise InputError(f"unknown edge kind {self.kind!r}")

    @property
    def key(self):
        return f"{self.tail}->{self.head}"


@dataclass(frozen=True, eq=False)
class Network:
    """Directed network with typed edges and od pairs.

    ``wait`` maps base nodes to the waiting time put on their riding
    starting edge during :func:`expand_network`.
    """

    nodes: Tuple[str, ...]
    edges: Tuple[Edge, ...]
    od_pairs: Tuple[Tuple[str, str], ...]
    name: str = "network"
    wait: Dict[str, float] = field(default_factory=dict)
    expanded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(str(v) for v in self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "od_pairs", tuple((str(a), str(b)) for a, b in self.od_pairs))
        if len(set(self.nodes)) != len(self.nodes):
            raise InputError("duplicate node ids")
        known = set(self.nodes)
        for i, e in enumerate(self.edges):
            if e.tail not in known or e.head not in known:
                raise InputError(f"edge {i} ({e.key}) has an unknown endpoint")
            if e.tail == e.head:
                raise InputError(f"edge {i} is a self-loop")
        for a, b in self.od_pairs:
            if a not in known or b not in known:
                raise InputError(f"od pair ({a}, {b}) names an unknown node")
            if a == b:
                raise InputError(f"od pair ({a}, {b}) has identical ends")
        if len(set(self.od_pairs)) != len(self.od_pairs):
            raise InputError("duplicate od pairs")
        unreachable = self.unreachable_pairs()
        if unreachable:
            a, b = unreachable[0]
            raise ConnectivityError(f"sink {b} is unreachable from source {a}")

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def node_index(self):
        return {v: i for i, v in enumerate(self.nodes)}

    def out_edges(self):
        """Outgoing edge indices per node index."""
        idx = self.node_index
        out: List[List[int]] = [[] for _ in self.nodes]
        for k, e in enumerate(self.edges):
            out[idx[e.tail]].append(k)
        return out

    def unreachable_pairs(self):
        idx = self.node_index
        out = self.out_edges()
        bad = []
        for src in sorted({a for a, _ in self.od_pairs}):
            seen = {idx[src]}
            queue = deque([idx[src]])
            while queue:
                u = queue.popleft()
                for k in out[u]:
                    v = idx[self.edges[k].head]
                    if v not in seen:
                        seen.add(v)
                        queue.append(v)
            bad.extend((a, b) for a, b in self.od_pairs if a == src and idx[b] not in seen)
        return bad

    def has_cycle(self):
        idx = self.node_index
        indeg = np.zeros(len(self.nodes), dtype=int)
        for e in self.edges:
            indeg[idx[e.head]] += 1
        out = self.out_edges()
        queue = deque(i for i in range(len(self.nodes)) if indeg[i] == 0)
        seen = 0
        while queue:
            u = queue.popleft()
            seen += 1
            for k in out[u]:
                v = idx[self.edges[k].head]
                indeg[v] -= 1
                if indeg[v] == 0:
                    queue.append(v)
        return seen < len(self.nodes)

    def edges_of_kind(self, kind):
        return [k for k, e in enumerate(self.edges) if e.kind == kind]

    def edge_labels(self):
        return [e.key for e in self.edges]

    def find_edge(self, tail, head, kind=None):
        for k, e in enumerate(self.edges):
            if e.tail == str(tail) and e.head == str(head) and (kind is None or e.kind == kind):
                return k
        raise KeyError(f"no edge {tail}->{head}")

    def with_params(self, k, **changes):
        """Copy with edge ``k``'s cost parameters replaced."""
        edges = list(self.edges)
        edges[k] = replace(edges[k], params=replace(edges[k].params, **changes))
        return replace(self, edges=tuple(edges))


def _sub(node, tag):
    return f"{node}{tag}"


def expand_network(base: Network) -> Network:
    """Split every node into start ``s``, end ``e``, driving ``v`` and riding ``p`` sub-nodes.

    Driving edges become ``v -> v``, riding edges ``p -> p``. Each node gets
    ``s -> v`` (zero cost), ``s -> p`` (waiting time from ``base.wait``,
    default 1), ``v -> e`` and ``p -> e`` (zero cost) for the modes it
    supports. od pairs are remapped to ``(s, e)``. A single-mode network is
    returned relabelled, without connector edges.
    """
    if base.expanded:
        raise StructureError("network is already expanded")
    for k, e in enumerate(base.edges):
        if e.kind not in MODE_KINDS:
            raise StructureError(f"edge {k} ({e.key}) has kind {e.kind!r}; only driving/riding edges can be expanded")
    kinds = {e.kind for e in base.edges}
    if len(kinds) <= 1:
        tag = "v" if kinds != {RIDING} else "p"
        edges = tuple(Edge(_sub(e.tail, tag), _sub(e.head, tag), e.kind, e.params) for e in base.edges)
        return Network(tuple(_sub(v, tag) for v in base.nodes), edges,
                       tuple((_sub(a, tag), _sub(b, tag)) for a, b in base.od_pairs),
                       name=base.name, wait={}, expanded=True)

    modes = {v: set() for v in base.nodes}
    for e in base.edges:
        modes[e.tail].add(e.kind)
        modes[e.head].add(e.kind)
    origins = {a for a, _ in base.od_pairs}
    dests = {b for _, b in base.od_pairs}
    for v in origins | dests:
        if not modes[v]:
            raise StructureError(f"node {v} is an od end but has no mode edges")
    nodes: List[str] = []
    edges: List[Edge] = []
    for v in base.nodes:
        nodes.extend([_sub(v, "s"), _sub(v, "e")])
        if DRIVING in modes[v]:
            nodes.append(_sub(v, "v"))
        if RIDING in modes[v]:
            nodes.append(_sub(v, "p"))
    for v in base.nodes:
        if DRIVING in modes[v]:
            edges.append(Edge(_sub(v, "s"), _sub(v, "v"), CONNECTOR, EdgeCostParams(w=0.0)))
        if RIDING in modes[v]:
            edges.append(Edge(_sub(v, "s"), _sub(v, "p"), STARTING, EdgeCostParams(w=float(base.wait.get(v, 1.0)))))
    for e in base.edges:
        tag = "v" if e.kind == DRIVING else "p"
        edges.append(Edge(_sub(e.tail, tag), _sub(e.head, tag), e.kind, e.params))
    for v in base.nodes:
        if DRIVING in modes[v]:
            edges.append(Edge(_sub(v, "v"), _sub(v, "e"), CONNECTOR, EdgeCostParams(w=0.0)))
        if RIDING in modes[v]:
            edges.append(Edge(_sub(v, "p"), _sub(v, "e"), CONNECTOR, EdgeCostParams(w=0.0)))
    od = tuple((_sub(a, "s"), _sub(b, "e")) for a, b in base.od_pairs)
    return Network(tuple(nodes), tuple(edges), od, name=base.name, wait={}, expanded=True)


@dataclass(frozen=True)
class DemandMatrix:
    """Demand per od pair (aligned with ``Network.od_pairs``) for one period."""

    values: np.ndarray
    period: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise InputError("demands must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def scaled(self, factor):
        return DemandMatrix(self.values * factor, self.period)


def generate_demands(n_od, n_periods, low=5.0, high=10.0, seed=0, multiplier=1.0) -> List[DemandMatrix]:
    """i.i.d. uniform demands, one row per period, from a seeded generator."""
    if high < low or low < 0:
        raise InputError("need 0 <= low <= high")
    rng = np.random.default_rng(seed)
    table = rng.uniform(low, high, size=(n_periods, n_od)) * multiplier
    return [DemandMatrix(row, p) for p, row in enumerate(table)]


# ---------------------------------------------------------------- JSON I/O

_PARAM_FIELDS = ("T", "s", "m", "w", "q_cap", "bpr_coeff", "bpr_power")


def _num(v, default):
    if v is None:
        return default
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return INF
    return v


def network_from_dict(d: dict) -> Network:
    if d.get("schema") != NETWORK_SCHEMA:
        raise InputError(f"network schema must be {NETWORK_SCHEMA!r}, got {d.get('schema')!r}")
    nodes = []
    wait = {}
    for item in d["nodes"]:
        if isinstance(item, dict):
            nodes.append(str(item["id"]))
            if "wait" in item:
                wait[str(item["id"])] = float(item["wait"])
        else:
            nodes.append(str(item))
    defaults = EdgeCostParams()
    edges = []
    for i, e in enumerate(d["edges"]):
        kw = {f: _num(e.get(f), getattr(defaults, f)) for f in _PARAM_FIELDS}
        kw["bpr_power"] = int(kw["bpr_power"])
        try:
            params = EdgeCostParams(**{k: (float(v) if k != "bpr_power" else v) for k, v in kw.items()})
        except InputError as exc:
            raise InputError(f"edge {i}: {exc}") from exc
        edges.append(Edge(str(e["tail"]), str(e["head"]), e.get("kind", DRIVING), params))
    od = [tuple(map(str, p)) for p in d.get("od", [])]
    net = Network(tuple(nodes), tuple(edges), tuple(od), name=d.get("name", "network"), wait=wait,
                  expanded=bool(d.get("expanded", False)))
    return net


def _enc(v):
    if isinstance(v, float) and math.isinf(v):
        return None
    return v


def network_to_dict(net: Network) -> dict:
    nodes = [{"id": v, "wait": net.wait[v]} if v in net.wait else v for v in net.nodes]
    edges = []
    for e in net.edges:
        row = {"tail": e.tail, "head": e.head, "kind": e.kind}
        row.update({f: _enc(getattr(e.params, f)) for f in _PARAM_FIELDS})
        edges.append(row)
    return {"schema": NETWORK_SCHEMA, "name": net.name, "expanded": net.expanded,
            "nodes": nodes, "edges": edges, "od": [list(p) for p in net.od_pairs]}


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))


def demands_from_dict(d: dict, n_od: Optional[int] = None) -> List[DemandMatrix]:
    """Periods listed explicitly, or drawn from the ``generator`` block."""
    if d.get("schema") != DEMAND_SCHEMA:
        raise InputError(f"demand schema must be {DEMAND_SCHEMA!r}, got {d.get('schema')!r}")
    mult = float(d.get("multiplier", 1.0))
    if "periods" in d:
        rows = [np.asarray(r, dtype=float) * mult for r in d["periods"]]
        if n_od is not None and any(r.size != n_od for r in rows):
            raise InputError(f"every demand period must list {n_od} od values")
        return [DemandMatrix(r, p) for p, r in enumerate(rows)]
    g = d.get("generator")
    if not g:
        raise InputError("demand file needs 'periods' or a 'generator'")
    if g.get("distribution", "uniform") != "uniform":
        raise InputError("only the uniform demand generator is supported")
    n = int(g.get("n_od", n_od if n_od is not None else 0))
    if n <= 0:
        raise InputError("generator needs the number of od pairs")
    return generate_demands(n, int(g.get("n_periods", 1)), float(g.get("low", 5.0)), float(g.get("high", 10.0)),
                            int(g.get("seed", 0)), mult)


def demands_to_dict(demands: Sequence[DemandMatrix], od_pairs=None) -> dict:
    d = {"schema": DEMAND_SCHEMA, "periods": [[float(v) for v in dm.values] for dm in demands]}
    if od_pairs is not None:
        d["od"] = [list(p) for p in od_pairs]
    return d


def load_demands(path, n_od=None) -> List[DemandMatrix]:
    with open(path, encoding="utf-8") as fh:
        return demands_from_dict(json.load(fh), n_od)


def data_path(name) -> Path:
    """Path of a network file shipped with the package."""
    return Path(__file__).resolve().parent.parent / "data" / name

"""Path sets and label-setting shortest paths with deterministic tie-breaking."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ConnectivityError, InputError
from .network import DemandMatrix, Network

TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PathSet:
    """Paths as edge-index tuples, each tagged with its od index.

    ``M`` is the od-by-path incidence (so ``M f = q``) and ``Delta`` the
    edge-by-path incidence (so ``x = Delta f``).
    """

    net: Network
    paths: Tuple[Tuple[int, ...], ...]
    od: Tuple[int, ...]

    def __post_init__(self):
        if len(self.paths) != len(self.od):
            raise InputError("paths and od tags differ in length")
        for p, w in zip(self.paths, self.od):
            a, b = self.net.od_pairs[w]
            edges = [self.net.edges[k] for k in p]
            if not edges or edges[0].tail != a or edges[-1].head != b:
                raise InputError(f"path {p} does not connect od {a}->{b}")
            if any(e1.head != e2.tail for e1, e2 in zip(edges, edges[1:])):
                raise InputError(f"path {p} is not contiguous")
        if len(set(zip(self.od, self.paths))) != len(self.paths):
            raise InputError("duplicate paths")
        n_od, E, K = len(self.net.od_pairs), self.net.n_edges, len(self.paths)
        M = np.zeros((n_od, K))
        D = np.zeros((E, K))
        for j, (p, w) in enumerate(zip(self.paths, self.od)):
            M[w, j] = 1.0
            for k in p:
                D[k, j] += 1.0
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "Delta", D)

    def __len__(self):
        return len(self.paths)

    def per_od(self):
        out: List[List[int]] = [[] for _ in self.net.od_pairs]
        for j, w in enumerate(self.od):
            out[w].append(j)
        return out

    def covers_all_od(self):
        return all(self.per_od())

    def index(self, w, path):
        for j, (p, v) in enumerate(zip(self.paths, self.od)):
            if v == w and p == tuple(path):
                return j
        return -1

    def with_paths(self, new: Sequence[Tuple[int, Tuple[int, ...]]]):
        """Append ``(od, path)`` pairs not already present; returns (PathSet, n_added)."""
        have = set(zip(self.od, self.paths))
        paths, od = list(self.paths), list(self.od)
        added = 0
        for w, p in new:
            if (w, tuple(p)) not in have:
                have.add((w, tuple(p)))
                paths.append(tuple(p))
                od.append(w)
                added += 1
        if not added:
            return self, 0
        return PathSet(self.net, tuple(paths), tuple(od)), added

    def node_sequence(self, j):
        p = self.paths[j]
        return [self.net.edges[p[0]].tail] + [self.net.edges[k].head for k in p]


def shortest_path_tree(net: Network, costs, source: str):
    """Label-setting search from ``source``.

    Returns ``{node: (cost, edge_tuple)}`` for reachable nodes. Among paths
    of equal cost (within a relative 1e-12) the one with the
    lexicographically smallest node-index sequence wins.
    """
    costs = np.asarray(costs, dtype=float)
    if np.any(costs < 0) or np.any(~np.isfinite(costs)):
        raise InputError("shortest paths need finite nonnegative edge costs")
    idx = net.node_index
    out = net.out_edges()
    heads = [idx[e.head] for e in net.edges]
    s = idx[source]
    dist = {s: 0.0}
    seq = {s: (s,)}
    pred = {s: ()}
    done = set()
    heap = [(0.0, (s,), s)]
    while heap:
        d, sq, u = heapq.heappop(heap)
        if u in done or sq != seq[u]:
            continue
        done.add(u)
        for k in out[u]:
            v = heads[k]
            if v in done:
                continue
            nd = d + costs[k]
            nsq = sq + (v,)
            old = dist.get(v)
            tol = TIE_TOL * max(1.0, abs(nd))
            if old is None or nd < old - tol or (abs(nd - old) <= tol and nsq < seq[v]):
                dist[v] = nd
                seq[v] = nsq
                pred[v] = pred[u] + (k,)
                heapq.heappush(heap, (nd, nsq, v))
    names = net.nodes
    return {names[v]: (dist[v], pred[v]) for v in dist}


def shortest_paths(net: Network, costs):
    """Per od pair, (cost, edge tuple) of the tie-broken shortest path."""
    trees = {}
    result = []
    for a, b in net.od_pairs:
        if a not in trees:
            trees[a] = shortest_path_tree(net, costs, a)
        hit = trees[a].get(b)
        if hit is None:
            raise ConnectivityError(f"sink {b} is unreachable from source {a}")
        result.append(hit)
    return result


def shortest_paths_aon(net: Network, edge_costs, demands: DemandMatrix):
    """All-or-nothing loading: returns (edge flows, list of edge-tuple paths per od)."""
    q = demands.values if isinstance(demands, DemandMatrix) else np.asarray(demands, dtype=float)
    if q.size != len(net.od_pairs):
        raise InputError("demand vector does not match the od list")
    sp = shortest_paths(net, edge_costs)
    x = np.zeros(net.n_edges)
    for qw, (_, p) in zip(q, sp):
        x[list(p)] += qw
    return x, [p for _, p in sp]

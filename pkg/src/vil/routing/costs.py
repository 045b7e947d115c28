"""Generalized edge costs and their derivatives.

Driving and riding edges pay a congestion delay ``T (1 + coeff (x/s)^p)``
plus ``gamma`` times money (fare plus toll). Riding edges also pay a
crowding term: ``tau (1 + (x/q)^2)`` in the ``"offset"`` form (default) or
``tau (x/q)^2`` in the ``"pure"`` form. Starting and connector edges cost
their constant ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

from ..errors import InputError
from .network import CONNECTOR, DRIVING, RIDING, STARTING, Edge, Network

RIDING_FORMS = ("offset", "pure")


@dataclass(frozen=True)
class BehaviorParams:
    """Travellers' valuation: time per unit money, crowding weight, capacity overrides."""

    gamma: float = 1.0
    tau: float = 1.0
    q_cap: Dict[int, float] = field(default_factory=dict)
    riding_form: str = "offset"

    def __post_init__(self):
        if not (self.gamma >= 0 and self.tau >= 0):
            raise InputError("gamma and tau must be nonnegative")
        if any(not v > 0 for v in self.q_cap.values()):
            raise InputError("q_cap overrides must be positive")
        if self.riding_form not in RIDING_FORMS:
            raise InputError(f"riding_form must be one of {RIDING_FORMS}")

    def replace(self, **kw):
        return replace(self, **kw)


def edge_cost(params, behavior: BehaviorParams, x, *, kind: Optional[str] = None, toll=0.0):
    """Cost of one edge at flow ``x``; ``params`` is an :class:`Edge` or :class:`EdgeCostParams`."""
    if isinstance(params, Edge):
        kind = kind or params.kind
        params = params.params
    kind = kind or DRIVING
    x = float(x)
    if not x >= 0:
        raise InputError(f"edge flow must be nonnegative, got {x}")
    if kind in (STARTING, CONNECTOR):
        return params.w
    c = params.T * (1.0 + params.bpr_coeff * (x / params.s) ** params.bpr_power) + behavior.gamma * (params.m + toll)
    if kind == RIDING:
        c += _crowding(behavior, x, params.q_cap)
    return c


def _crowding(behavior, x, q):
    if math.isinf(q):
        return behavior.tau if behavior.riding_form == "offset" else 0.0
    base = 1.0 if behavior.riding_form == "offset" else 0.0
    return behavior.tau * (base + (x / q) ** 2)


_PARAM_KINDS = ("gamma", "tau", "q_cap", "s", "toll", "m")


def parse_param(name: str):
    """``"gamma"`` -> ("gamma", None); ``"toll:7"`` -> ("toll", 7)."""
    if ":" in name:
        kind, idx = name.split(":", 1)
        if kind not in ("q_cap", "s", "toll", "m"):
            raise InputError(f"unknown per-edge parameter {name!r}")
        return kind, int(idx)
    if name not in ("gamma", "tau"):
        raise InputError(f"unknown parameter {name!r}")
    return name, None


class CostModel:
    """Vectorized edge costs for a network, with optional parameter binding.

    ``params`` names the entries of λ: ``gamma``, ``tau``, or per-edge
    ``q_cap:<e>``, ``s:<e>``, ``toll:<e>``, ``m:<e>``. Values not bound to λ
    come from the network, ``behavior`` and ``tolls``.
    """

    def __init__(self, net: Network, behavior: BehaviorParams, params: Sequence[str] = (), tolls=None):
        self.net = net
        self.behavior = behavior
        E = net.n_edges
        kinds = np.array([e.kind for e in net.edges])
        self.is_mode = (kinds == DRIVING) | (kinds == RIDING)
        self.is_riding = kinds == RIDING
        self.is_driving = kinds == DRIVING
        P = [e.params for e in net.edges]
        self.T = np.array([p.T for p in P])
        self.s = np.array([p.s for p in P])
        self.m = np.array([p.m for p in P])
        self.w = np.array([p.w for p in P])
        self.q = np.array([behavior.q_cap.get(k, p.q_cap) for k, p in enumerate(P)])
        self.coeff = np.array([p.bpr_coeff for p in P])
        self.power = np.array([p.bpr_power for p in P], dtype=float)
        self.toll = np.zeros(E) if tolls is None else np.asarray(tolls, dtype=float).copy()
        if self.toll.shape != (E,):
            raise InputError("tolls must have one entry per edge")
        self.offset = 1.0 if behavior.riding_form == "offset" else 0.0
        self.params = tuple(params)
        self._parsed = [parse_param(p) for p in self.params]
        for kind, idx in self._parsed:
            if idx is not None and not 0 <= idx < E:
                raise InputError(f"parameter edge index {idx} out of range")
            if kind == "q_cap" and not self.is_riding[idx]:
                raise InputError(f"q_cap:{idx} does not name a riding edge")

    @property
    def n_params(self):
        return len(self.params)

    def defaults(self):
        """Current values of the bound parameters (a natural λ)."""
        out = []
        for kind, idx in self._parsed:
            if idx is None:
                out.append(getattr(self.behavior, kind))
            else:
                out.append({"q_cap": self.q, "s": self.s, "toll": self.toll, "m": self.m}[kind][idx])
        return np.array(out, dtype=float)

    def state(self, lam=None):
        """(gamma, tau, q, s, toll, m) with λ substituted."""
        g, t = self.behavior.gamma, self.behavior.tau
        q, s, toll, m = self.q, self.s, self.toll, self.m
        if lam is not None and len(self._parsed):
            lam = np.asarray(lam, dtype=float).reshape(-1)
            q, s, toll, m = q.copy(), s.copy(), toll.copy(), m.copy()
            for v, (kind, idx) in zip(lam, self._parsed):
                if kind == "gamma":
                    g = v
                elif kind == "tau":
                    t = v
                else:
                    {"q_cap": q, "s": s, "toll": toll, "m": m}[kind][idx] = v
        return g, t, q, s, toll, m

    def _ratio(self, x, s):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.isinf(s), 0.0, x / s)

    def cost(self, x, lam=None):
        g, t, q, s, toll, m = self.state(lam)
        u = self._ratio(x, s)
        c = self.T * (1.0 + self.coeff * u ** self.power) + g * (m + toll)
        v = self._ratio(x, q)
        c = c + np.where(self.is_riding, t * (self.offset + v * v), 0.0)
        return np.where(self.is_mode, c, self.w)

    def time(self, x, lam=None):
        """Time component: congestion delay on mode edges, waiting on starting edges."""
        _, _, _, s, _, _ = self.state(lam)
        u = self._ratio(x, s)
        return np.where(self.is_mode, self.T * (1.0 + self.coeff * u ** self.power), self.w)

    def crowding(self, x, lam=None):
        _, t, q, _, _, _ = self.state(lam)
        v = self._ratio(x, q)
        return np.where(self.is_riding, t * (self.offset + v * v), 0.0)

    def dcost_dx(self, x, lam=None):
        g, t, q, s, _, _ = self.state(lam)
        u = self._ratio(x, s)
        p = self.power
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(np.isinf(s), 0.0, self.T * self.coeff * p * u ** (p - 1) / s)
            d = d + np.where(self.is_riding & ~np.isinf(q), 2.0 * t * x / q ** 2, 0.0)
        return np.where(self.is_mode, d, 0.0)

    def dtime_dx(self, x, lam=None):
        _, _, _, s, _, _ = self.state(lam)
        u = self._ratio(x, s)
        p = self.power
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(np.isinf(s), 0.0, self.T * self.coeff * p * u ** (p - 1) / s)
        return np.where(self.is_mode, d, 0.0)

    def dcost_dlam(self, x, lam=None):
        """E x n_params matrix of partial cost derivatives."""
        g, t, q, s, toll, m = self.state(lam)
        D = np.zeros((self.net.n_edges, len(self._parsed)))
        for j, (kind, idx) in enumerate(self._parsed):
            if kind == "gamma":
                D[:, j] = np.where(self.is_mode, m + toll, 0.0)
            elif kind == "tau":
                v = self._ratio(x, q)
                D[:, j] = np.where(self.is_riding, self.offset + v * v, 0.0)
            elif kind == "q_cap":
                D[idx, j] = -2.0 * t * x[idx] ** 2 / q[idx] ** 3
            elif kind == "s":
                if self.is_mode[idx]:
                    p = self.power[idx]
                    D[idx, j] = -self.T[idx] * self.coeff[idx] * p * x[idx] ** p / s[idx] ** (p + 1)
            elif kind in ("toll", "m"):
                if self.is_mode[idx]:
                    D[idx, j] = g
        return D

    def dtime_dlam(self, x, lam=None):
        """Partial derivatives of the per-edge time with respect to λ (only ``s`` enters)."""
        _, _, _, s, _, _ = self.state(lam)
        D = np.zeros((self.net.n_edges, len(self._parsed)))
        for j, (kind, idx) in enumerate(self._parsed):
            if kind == "s" and self.is_mode[idx]:
                p = self.power[idx]
                D[idx, j] = -self.T[idx] * self.coeff[idx] * p * x[idx] ** p / s[idx] ** (p + 1)
        return D

    def dcrowding_dlam(self, x, lam=None):
        _, t, q, _, _, _ = self.state(lam)
        D = np.zeros((self.net.n_edges, len(self._parsed)))
        v = self._ratio(x, q)
        for j, (kind, idx) in enumerate(self._parsed):
            if kind == "tau":
                D[:, j] = np.where(self.is_riding, self.offset + v * v, 0.0)
            elif kind == "q_cap":
                D[idx, j] = -2.0 * t * x[idx] ** 2 / q[idx] ** 3
        return D

    def dcrowding_dx(self, x, lam=None):
        _, t, q, _, _, _ = self.state(lam)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.is_riding & ~np.isinf(q), 2.0 * t * x / q ** 2, 0.0)

    def bounds(self):
        """Physical lower/upper bounds of the bound parameters."""
        lo, hi = [], []
        for kind, _ in self._parsed:
            lo.append(0.0 if kind in ("gamma", "tau", "toll", "m") else 1e-6)
            hi.append(np.inf)
        return np.array(lo), np.array(hi)

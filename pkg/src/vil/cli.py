"""``vil`` command line: experiment runner and config validator.

Every run writes into one output directory: ``metadata.json`` (config
hash, seed, versions, timing), ``summary.json`` and plot-ready CSVs.
Everything except ``metadata.json`` is byte-identical across reruns of the
same config and seed. On failure an ``error.json`` manifest is written next
to whatever was produced so far.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .endopt import (
    GRAD_MODES,
    InterventionSpec,
    LearningSpec,
    PRESETS,
    crowding_cost,
    design_tolls,
    learn,
    loss_and_grad,
    travel_time,
)
from .errors import ConfigError, ConnectivityError, ConvergenceError, InputError, VILError
from .routing import (
    BehaviorParams,
    Network,
    data_path,
    demands_from_dict,
    expand_network,
    generate_demands,
    metrics,
    network_from_dict,
    solve_equilibrium,
)
from .routing.costs import RIDING_FORMS
from .routing.network import DEMAND_SCHEMA, EDGE_KINDS, NETWORK_SCHEMA, RIDING
from .solvers import SolverOptions

log = logging.getLogger("vil")

EXPERIMENTS = ("solve", "gradcheck", "braess", "linear-city-learn", "linear-city-toll", "two-loop-bench")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INTERNAL = 0, 2, 3, 4
SHIPPED = ("braess", "linear_city", "two_loop")

_TOP_KEYS = {"experiment", "seed", "out", "network", "demand", "solver", "behavior", "solve", "braess", "gradcheck",
             "learning", "intervention", "bench"}
_SOLVER_KEYS = {"eps_proj", "eps_newton", "r0", "delta_proj", "delta_newton", "alpha_down", "alpha_up",
                "max_iter", "eta_seed", "eta_max", "proj_tol", "r_stall"}


def threads() -> int:
    """Worker cap from ``VIL_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("VIL_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------ validation

@dataclass
class Diagnostic:
    pointer: str
    message: str

    def __str__(self):
        return f"{self.pointer}: {self.message}"


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _cap(v):
    if v is None or (isinstance(v, str) and v.lower() in ("inf", "infinity")):
        return math.inf
    return v


def validate_network_dict(d, where: str) -> List[Diagnostic]:
    """Schema and semantic checks for a network document; pointers are ``<where>#/...``."""
    out: List[Diagnostic] = []

    def bad(ptr, msg):
        out.append(Diagnostic(f"{where}#{ptr}", msg))

    if not isinstance(d, dict):
        bad("", "network document must be a JSON object")
        return out
    if d.get("schema") != NETWORK_SCHEMA:
        bad("/schema", f"expected {NETWORK_SCHEMA!r}, got {d.get('schema')!r}")
    nodes = d.get("nodes")
    if not isinstance(nodes, list) or not nodes:
        bad("/nodes", "must be a nonempty list")
        return out
    ids = []
    for i, item in enumerate(nodes):
        nid = item.get("id") if isinstance(item, dict) else item
        if nid is None:
            bad(f"/nodes/{i}", "node needs an id")
            continue
        if isinstance(item, dict) and "wait" in item and not (_is_num(item["wait"]) and item["wait"] >= 0):
            bad(f"/nodes/{i}/wait", "waiting time must be a nonnegative number")
        ids.append(str(nid))
    if len(set(ids)) != len(ids):
        bad("/nodes", "duplicate node ids")
    known = set(ids)
    edges = d.get("edges")
    if not isinstance(edges, list):
        bad("/edges", "must be a list")
        edges = []
    for i, e in enumerate(edges):
        p = f"/edges/{i}"
        if not isinstance(e, dict):
            bad(p, "edge must be an object")
            continue
        for end in ("tail", "head"):
            if str(e.get(end)) not in known:
                bad(f"{p}/{end}", f"unknown node {e.get(end)!r}")
        if e.get("kind", "driving") not in EDGE_KINDS:
            bad(f"{p}/kind", f"must be one of {EDGE_KINDS}")
        for f in ("T", "m", "w", "bpr_coeff"):
            if f in e and not (_is_num(e[f]) and e[f] >= 0):
                bad(f"{p}/{f}", f"edge {i} ({e.get('tail')}->{e.get('head')}): {f} must be >= 0, got {e[f]!r}")
        for f in ("s", "q_cap"):
            if f in e:
                v = _cap(e[f])
                if not (_is_num(v) and v > 0):
                    bad(f"{p}/{f}", f"edge {i} ({e.get('tail')}->{e.get('head')}): capacity {f} must be > 0, "
                                    f"got {e[f]!r}")
        if "bpr_power" in e and not (_is_num(e["bpr_power"]) and e["bpr_power"] >= 1):
            bad(f"{p}/bpr_power", "must be >= 1")
    od = d.get("od", [])
    if not isinstance(od, list):
        bad("/od", "must be a list of [source, sink] pairs")
        od = []
    for i, pair in enumerate(od):
        if not (isinstance(pair, list) and len(pair) == 2):
            bad(f"/od/{i}", "must be a [source, sink] pair")
            continue
        for j, v in enumerate(pair):
            if str(v) not in known:
                bad(f"/od/{i}/{j}", f"unknown node {v!r}")
    if out:
        return out
    try:
        network_from_dict(d)
    except ConnectivityError:
        net = network_from_dict(dict(d, od=[]))
        for i, pair in enumerate(od):
            try:
                Network(net.nodes, net.edges, (tuple(map(str, pair)),))
            except ConnectivityError:
                bad(f"/od/{i}", f"connectivity: sink {pair[1]} is unreachable from source {pair[0]}")
    except (InputError, KeyError, TypeError, ValueError) as exc:
        bad("", str(exc))
    return out


def _load_json(path: Path, ptr: str, diags: List[Diagnostic]):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        diags.append(Diagnostic(ptr, f"file not found: {path}"))
    except json.JSONDecodeError as exc:
        diags.append(Diagnostic(ptr, f"{path}: invalid JSON ({exc})"))
    return None


def _network_source(cfg: dict, base: Path):
    sec = cfg.get("network", {})
    if "file" in sec:
        return Path(base, sec["file"]), "/network/file"
    return data_path(f"{sec.get('instance', '')}.json"), "/network/instance"


def _check_solver(sec, ptr, diags):
    if not isinstance(sec, dict):
        diags.append(Diagnostic(ptr, "must be a table"))
        return
    for k, v in sec.items():
        if k not in _SOLVER_KEYS:
            diags.append(Diagnostic(f"{ptr}/{k}", "unknown solver option"))
        elif not _is_num(v):
            diags.append(Diagnostic(f"{ptr}/{k}", "must be a number"))
    try:
        SolverOptions(**{k: v for k, v in sec.items() if k in _SOLVER_KEYS and _is_num(v)}
                      | ({} if "eps_proj" in sec else {"eps_proj": 1.0}))
    except (InputError, TypeError) as exc:
        diags.append(Diagnostic(ptr, str(exc)))


def _check_positive(sec, keys, ptr, diags, allow_zero=False):
    for k in keys:
        if k in sec:
            v = sec[k]
            ok = _is_num(v) and (v >= 0 if allow_zero else v > 0)
            if not ok:
                diags.append(Diagnostic(f"{ptr}/{k}", f"must be a {'nonnegative' if allow_zero else 'positive'} "
                                                      f"number, got {v!r}"))


def validate_dict(cfg: dict, base: Path) -> List[Diagnostic]:
    diags: List[Diagnostic] = []
    for k in cfg:
        if k not in _TOP_KEYS:
            diags.append(Diagnostic(f"/{k}", "unknown key"))
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        diags.append(Diagnostic("/experiment", f"must be one of {EXPERIMENTS}, got {exp!r}"))
    if "seed" in cfg and not (isinstance(cfg["seed"], int) and cfg["seed"] >= 0):
        diags.append(Diagnostic("/seed", "must be a nonnegative integer"))
    if "solver" in cfg:
        _check_solver(cfg["solver"], "/solver", diags)
    if "bench" in cfg and "solver" in cfg["bench"]:
        _check_solver(cfg["bench"]["solver"], "/bench/solver", diags)

    net_sec = cfg.get("network", {})
    if not isinstance(net_sec, dict) or not ({"file", "instance"} & set(net_sec)):
        diags.append(Diagnostic("/network", "needs 'instance' (one of %s) or 'file'" % (SHIPPED,)))
    else:
        if "instance" in net_sec and "file" not in net_sec and net_sec["instance"] not in SHIPPED:
            diags.append(Diagnostic("/network/instance", f"unknown instance {net_sec['instance']!r}"))
        else:
            path, ptr = _network_source(cfg, base)
            d = _load_json(path, ptr, diags)
            if d is not None:
                diags.extend(validate_network_dict(d, str(path)))

    dem = cfg.get("demand", {})
    if not isinstance(dem, dict):
        diags.append(Diagnostic("/demand", "must be a table"))
    else:
        if "file" in dem:
            d = _load_json(Path(base, dem["file"]), "/demand/file", diags)
            if d is not None and d.get("schema") != DEMAND_SCHEMA:
                diags.append(Diagnostic(f"{dem['file']}#/schema", f"expected {DEMAND_SCHEMA!r}"))
        if "values" in dem:
            v = dem["values"]
            if not (isinstance(v, list) and all(_is_num(x) and x >= 0 for x in v)):
                diags.append(Diagnostic("/demand/values", "must be a list of nonnegative numbers"))
        _check_positive(dem, ("multiplier",), "/demand", diags)
        _check_positive(dem, ("low", "high"), "/demand", diags, allow_zero=True)
        if _is_num(dem.get("low", 0)) and _is_num(dem.get("high", 0)) and dem.get("low", 5) > dem.get("high", 10):
            diags.append(Diagnostic("/demand/low", "low exceeds high"))

    beh = cfg.get("behavior", {})
    if isinstance(beh, dict):
        _check_positive(beh, ("gamma", "tau"), "/behavior", diags, allow_zero=True)
        if "riding_form" in beh and beh["riding_form"] not in RIDING_FORMS:
            diags.append(Diagnostic("/behavior/riding_form", f"must be one of {RIDING_FORMS}"))

    if cfg.get("solve", {}).get("method", "pn") not in ("pn", "projection"):
        diags.append(Diagnostic("/solve/method", "must be pn or projection"))
    if exp == "braess":
        b = cfg.get("braess", {})
        if "q" in b and not (isinstance(b["q"], list) and all(_is_num(x) and x > 0 for x in b["q"])):
            diags.append(Diagnostic("/braess/q", "must be a list of positive demands"))
        for i, m in enumerate(b.get("modes", [])):
            if m not in ("implicit", "explicit", "fd"):
                diags.append(Diagnostic(f"/braess/modes/{i}", "must be implicit, explicit or fd"))
    if exp == "gradcheck":
        g = cfg.get("gradcheck", {})
        if not isinstance(g.get("params"), list) or not g.get("params"):
            diags.append(Diagnostic("/gradcheck/params", "must list the parameters to differentiate"))
        if g.get("objective", "travel_time") not in ("travel_time", "crowding"):
            diags.append(Diagnostic("/gradcheck/objective", "must be travel_time or crowding"))
    if exp == "linear-city-learn":
        ls = cfg.get("learning", {})
        for i, p in enumerate(ls.get("presets", [])):
            if p not in PRESETS:
                diags.append(Diagnostic(f"/learning/presets/{i}", f"unknown preset {p!r}"))
        _check_positive(ls, ("epochs", "n_periods", "n_train"), "/learning", diags)
        _check_positive(ls, ("rounding",), "/learning", diags)
        if "grad_mode" in ls and ls["grad_mode"] not in GRAD_MODES:
            diags.append(Diagnostic("/learning/grad_mode", f"must be one of {GRAD_MODES}"))
    if exp == "linear-city-toll":
        iv = cfg.get("intervention", {})
        _check_positive(iv, ("toll_hi",), "/intervention", diags, allow_zero=True)
        if "budget_fraction" in iv and not (_is_num(iv["budget_fraction"]) and iv["budget_fraction"] > -1):
            diags.append(Diagnostic("/intervention/budget_fraction", "must exceed -1"))
        if "learned" in iv:
            _load_json(Path(base, iv["learned"]), "/intervention/learned", diags)
    if exp == "two-loop-bench":
        bn = cfg.get("bench", {})
        m = bn.get("multipliers", [1, 2, 3, 4])
        if not (isinstance(m, list) and m and all(_is_num(x) and x > 0 for x in m)):
            diags.append(Diagnostic("/bench/multipliers", "must be a nonempty list of positive numbers"))
    return diags


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None


def validate_config(path) -> List[Diagnostic]:
    """Diagnostics for a TOML experiment config; an empty list means clean."""
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return [Diagnostic("/", str(exc))]
    return validate_dict(cfg, Path(path).resolve().parent)


# ----------------------------------------------------------------- resolution

@dataclass
class ExperimentConfig:
    experiment: str
    raw: dict
    base: Path
    seed: int = 0
    out: Optional[Path] = None
    grad_mode: Optional[str] = None
    source_bytes: bytes = b""

    @classmethod
    def from_file(cls, path, *, seed=None, out=None, grad_mode=None, experiment=None):
        path = Path(path)
        raw = load_config(path)
        diags = validate_dict(raw, path.resolve().parent)
        if diags:
            raise ConfigError("\n".join(map(str, diags)))
        exp = raw["experiment"]
        if experiment is not None and experiment != exp:
            raise ConfigError(f"/experiment: config is for {exp!r}, command asked for {experiment!r}")
        return cls(exp, raw, path.resolve().parent, raw.get("seed", 0) if seed is None else seed,
                   Path(out) if out else (Path(raw["out"]) if "out" in raw else None), grad_mode,
                   path.read_bytes())

    def config_hash(self):
        h = hashlib.sha256(self.source_bytes)
        h.update(json.dumps({"seed": self.seed, "grad_mode": self.grad_mode}, sort_keys=True).encode())
        return h.hexdigest()

    def section(self, name):
        return dict(self.raw.get(name, {}))

    def network(self):
        path, _ = _network_source(self.raw, self.base)
        with open(path, encoding="utf-8") as fh:
            net = network_from_dict(json.load(fh))
        kinds = {e.kind for e in net.edges}
        if self.section("network").get("expand", True) and not net.expanded and len(kinds) > 1:
            net = expand_network(net)
        return net

    def solver(self, sec="solver", defaults=None):
        opts = dict(defaults or {"eps_proj": 10.0, "eps_newton": 1e-8, "max_iter": 500})
        src = self.raw.get(sec, {}) if sec != "bench" else self.raw.get("bench", {}).get("solver", {})
        opts.update(src)
        if "max_iter" in opts:
            opts["max_iter"] = int(opts["max_iter"])
        return SolverOptions(**opts)

    def behavior(self):
        b = self.section("behavior")
        return BehaviorParams(gamma=float(b.get("gamma", 1.0)), tau=float(b.get("tau", 1.0)),
                              riding_form=b.get("riding_form", "offset"))

    def demands(self, n_od):
        d = self.section("demand")
        mult = float(d.get("multiplier", 1.0))
        if "file" in d:
            with open(Path(self.base, d["file"]), encoding="utf-8") as fh:
                return demands_from_dict(json.load(fh), n_od)
        if "values" in d:
            vals = np.asarray(d["values"], dtype=float) * mult
            if vals.size != n_od:
                raise ConfigError(f"/demand/values: expected {n_od} od demands, got {vals.size}")
            return [vals]
        return [dm.values for dm in generate_demands(n_od, int(d.get("n_periods", 1)), float(d.get("low", 5.0)),
                                                     float(d.get("high", 10.0)), int(d.get("seed", self.seed)),
                                                     mult)]


# ------------------------------------------------------------------- outputs

def _num_out(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if not math.isfinite(v) else v
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_num_out(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _num_out(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_num_out(x) for x in v]
    return v


@dataclass
class ResultBundle:
    out: Path
    files: List[str] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def write_csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        self.write_text(name, buf.getvalue())

    def write_text(self, name, text):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_text(text, encoding="utf-8")
        if name not in self.files:
            self.files.append(name)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(_num_out(obj), indent=2, sort_keys=True) + "\n")

    def finish(self):
        self.write_json("summary.json", self.summary)
        self.metadata["files"] = sorted(set(self.files) | {"metadata.json"})
        self.write_json("metadata.json", self.metadata)


def _pmap(fn, items):
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _edge_label(net, k):
    e = net.edges[k]
    strip = (lambda v: v[:-1]) if net.expanded else (lambda v: v)
    return f"{strip(e.tail)}-{strip(e.head)}"


# ---------------------------------------------------------------- experiments

def _run_solve(cfg: ExperimentConfig, rb: ResultBundle):
    net = cfg.network()
    q = cfg.demands(len(net.od_pairs))[0]
    opts = cfg.solver()
    st = solve_equilibrium(net, cfg.behavior(), q, opts, method=cfg.section("solve").get("method", "pn"))
    m = metrics(st)
    rb.write_csv("edges.csv", ["edge", "tail", "head", "kind", "flow", "cost", "time", "crowding"],
                 [[r["edge"], r["tail"], r["head"], r["kind"], r["flow"], r["cost"], r["time"], r["crowding"]]
                  for r in m["per_edge"]])
    rb.write_text("solver_trace.csv", st.trace.to_csv())
    rb.summary.update(status=st.status, gap=st.wardrop_gap, iterations=st.iterations,
                      eps_newton=opts.eps_newton, flows=st.edge_flows, paths=len(st.paths),
                      total_travel_time=m["total_travel_time"], total_crowding_cost=m["total_crowding_cost"])
    if not st.converged:
        raise ConvergenceError(f"equilibrium solve ended with status {st.status} (gap {st.wardrop_gap:.3e})")


_OBJECTIVES = {"travel_time": travel_time, "crowding": crowding_cost}


def _run_gradcheck(cfg: ExperimentConfig, rb: ResultBundle):
    net = cfg.network()
    q = cfg.demands(len(net.od_pairs))[0]
    g = cfg.section("gradcheck")
    params = list(g["params"])
    opts = cfg.solver(defaults={"eps_proj": 10.0, "eps_newton": 1e-10, "max_iter": 500})
    obj = _OBJECTIVES[g.get("objective", "travel_time")]
    from .routing import CostModel

    lam = np.asarray(g["lam"], dtype=float) if "lam" in g else CostModel(net, cfg.behavior(), params).defaults()
    modes = [cfg.grad_mode] if cfg.grad_mode else ["implicit", "explicit"]
    res = {m: loss_and_grad(net, cfg.behavior(), q, opts, obj, params=params, lam=lam, mode=m).grad for m in modes}
    fd = loss_and_grad(net, cfg.behavior(), q, opts, obj, params=params, lam=lam, mode="fd").grad
    tol = float(g.get("tol", 1e-3))
    rows, worst = [], 0.0
    for i, p in enumerate(params):
        errs = [abs(res[m][i] - fd[i]) / max(abs(fd[i]), 1e-8) for m in modes]
        worst = max([worst] + errs)
        rows.append([p, lam[i], *[res[m][i] for m in modes], fd[i], *errs])
    rb.write_csv("gradcheck.csv", ["param", "lam", *modes, "fd", *[f"relerr_{m}" for m in modes]], rows)
    rb.summary.update(max_rel_error=worst, tol=tol, passed=worst <= tol, modes=modes)


BRAESS_GRID = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 20.0,
               24.0, 26.0, 28.0, 30.0, 35.0]


def braess_sweep(net, behavior, grid, opts, modes=("implicit", "explicit", "fd"), edge=("2", "3")):
    """dTT/ds of ``edge`` at each demand level in ``grid``, one column per gradient mode."""
    k = net.find_edge(*edge)
    params = [f"s:{k}"]
    lam = [net.edges[k].params.s]
    replay = SolverOptions(eps_proj=1e9, eps_newton=opts.eps_newton, max_iter=max(20000, opts.max_iter))

    def point(q):
        row = [q]
        for m in modes:
            kw = {"replay_opts": replay} if m == "explicit" else {}
            row.append(float(loss_and_grad(net, behavior, [q], opts, travel_time, params=params, lam=lam,
                                           mode=m, **kw).grad[0]))
        return row

    return _pmap(point, list(grid))


def agreement(a, b, floor=1e-8):
    """Relative difference with an absolute floor for values that are zero up to round-off."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def sign_pattern(qs, fd):
    """(q_low, q_mid, q_high) with dTT/ds <= 0, > 0, <= 0 in that order, or None."""
    for i, _ in enumerate(qs):
        if fd[i] > 0:
            continue
        for j in range(i + 1, len(qs)):
            if fd[j] <= 0:
                continue
            for k in range(j + 1, len(qs)):
                if fd[k] <= 0:
                    return qs[i], qs[j], qs[k]
    return None


def _run_braess(cfg: ExperimentConfig, rb: ResultBundle):
    net = cfg.network()
    b = cfg.section("braess")
    grid = b.get("q", BRAESS_GRID)
    modes = tuple(b.get("modes", ["implicit", "explicit", "fd"]))
    opts = cfg.solver(defaults={"eps_proj": 1.0, "eps_newton": 1e-10, "max_iter": 500})
    rows = braess_sweep(net, cfg.behavior(), grid, opts, modes, tuple(b.get("edge", ["2", "3"])))
    rb.write_csv("braess_sweep.csv", ["q", *modes], rows)
    worst = 0.0
    for r in rows:
        vals = r[1:]
        for i in range(len(vals)):
            for j in range(i + 1, len(vals)):
                worst = max(worst, agreement(vals[i], vals[j]))
    summary = {"points": len(rows), "max_pairwise_rel_diff": worst, "agree_1e-3": worst <= 1e-3}
    if "fd" in modes:
        fd = [r[1 + modes.index("fd")] for r in rows]
        pat = sign_pattern([r[0] for r in rows], fd)
        summary["sign_pattern"] = list(pat) if pat else None
    rb.summary.update(summary)


def _riding_labels(net):
    return [_edge_label(net, k) for k, e in enumerate(net.edges) if e.kind == RIDING]


def _learning_spec(cfg: ExperimentConfig, preset: Optional[str]):
    ls = cfg.section("learning")
    kw = dict(epochs=int(ls.get("epochs", 300)), n_periods=int(ls.get("n_periods", 8)),
              n_train=int(ls.get("n_train", 6)), rounding=ls.get("rounding", 0.1), seed=cfg.seed,
              demand_low=float(cfg.section("demand").get("low", 5.0)),
              demand_high=float(cfg.section("demand").get("high", 10.0)),
              grad_mode=cfg.grad_mode or ls.get("grad_mode", "auto"),
              solver=cfg.solver(), truth=cfg.behavior())
    if preset is None:
        return LearningSpec(init=dict(ls["init"]), lr=dict(ls["lr"]), **kw)
    spec = LearningSpec.preset(preset, **kw)
    if "lr" in ls:
        spec.lr.update(ls["lr"])
    return spec


def _run_learn(cfg: ExperimentConfig, rb: ResultBundle):
    net = cfg.network()
    ls = cfg.section("learning")
    presets = ls.get("presets", ["a", "b", "c", "d"]) if "init" not in ls else [None]
    labels = _riding_labels(net)
    table, learned, per = [], {}, {}
    riding = [k for k, e in enumerate(net.edges) if e.kind == RIDING]

    def one(p):
        return p, learn(_learning_spec(cfg, p), net)

    for p, tr in _pmap(one, presets):
        name = p or "custom"
        names = ["gamma", "tau", *[f"q_cap:{lab}" for lab in labels]]
        rb.write_csv(f"training_{name}.csv", ["epoch", "train_loss", "test_loss", *names],
                     [[r["epoch"], r["train_loss"], r["test_loss"], *r["params"]] for r in tr.rows])
        fin = tr.final.tolist()
        table.append([name, *fin])
        learned[name] = {"gamma": fin[0], "tau": fin[1], "q_cap": {str(k): v for k, v in zip(riding, fin[2:])}}
        l0, l1 = tr.train_losses[0], tr.train_losses[-1]
        per[name] = {"status": tr.status, "initial_train_loss": l0, "final_train_loss": l1,
                     "final_test_loss": tr.test_losses[-1],
                     "orders_of_decrease": math.log10(l0 / l1) if l1 > 0 else None,
                     "gamma": fin[0], "tau": fin[1], "q_cap": dict(zip(labels, fin[2:])),
                     "fallbacks": tr.fallbacks}
    rb.write_csv("learned_params.csv", ["setting", "gamma", "tau", *labels], table)
    rb.write_json("learned_params.json", {"presets": learned})
    rb.summary.update(settings=per, epochs=int(ls.get("epochs", 300)))


def _run_toll(cfg: ExperimentConfig, rb: ResultBundle):
    net = cfg.network()
    iv = cfg.section("intervention")
    truth = cfg.behavior()
    # designs target the mean over the seeded periods (8 unless configured)
    dsec = cfg.section("demand")
    if "n_periods" not in dsec and not {"values", "file"} & set(dsec):
        cfg = replace(cfg, raw=dict(cfg.raw, demand=dict(dsec, n_periods=8)))
    q = np.mean(cfg.demands(len(net.od_pairs)), axis=0)
    behavior, compare = truth, None
    if "learned" in iv:
        with open(Path(cfg.base, iv["learned"]), encoding="utf-8") as fh:
            doc = json.load(fh)
        p = doc["presets"][iv.get("setting", "a")]
        behavior = BehaviorParams(gamma=p["gamma"], tau=p["tau"], q_cap={int(k): v for k, v in p["q_cap"].items()},
                                  riding_form=truth.riding_form)
        compare = truth
    spec = InterventionSpec(toll_hi=float(iv.get("toll_hi", 10.0)),
                            budget_fraction=float(iv.get("budget_fraction", 0.15)),
                            max_outer=int(iv.get("max_outer", 8)), max_inner=int(iv.get("max_inner", 40)),
                            grad_mode=cfg.grad_mode or iv.get("grad_mode", "auto"), solver=cfg.solver())
    res = design_tolls(spec, net, behavior, q, truth=compare)
    rb.write_text("toll_trace.csv", res.trace_csv())
    rb.write_csv("design.csv", ["variable", "edge", "value"],
                 [[n, _edge_label(net, int(n.split(":")[1])), v] for n, v in zip(res.names, res.design)])
    rb.summary.update(res.summary())
    rb.summary.update(before=res.before, after=res.after, bound=res.bound, iterations=len(res.trace))
    if res.truth_after is not None:
        rb.summary.update(truth_before=res.truth_before, truth_after=res.truth_after)


def two_loop_bench(net, behavior, demand, multipliers, opts):
    """Projection-Newton vs projection at each demand multiplier; returns rows and per-level iteration counts."""
    def level(mult):
        out = {}
        for method in ("pn", "projection"):
            st = solve_equilibrium(net, behavior, demand * mult, opts, method=method)
            gaps = [st.trace.gap0] + [r.gap for r in st.trace.records]
            hit = next((i for i, g in enumerate(gaps) if g <= opts.eps_newton), None)
            out[method] = (gaps, hit, st.status)
        return mult, out

    return _pmap(level, list(multipliers))


def _run_bench(cfg: ExperimentConfig, rb: ResultBundle):
    net = cfg.network()
    bn = cfg.section("bench")
    opts = cfg.solver("bench", defaults={"eps_proj": 1e3, "eps_newton": 1e-3, "max_iter": 150})
    q = cfg.demands(len(net.od_pairs))[0]
    rows, levels = [], {}
    for mult, out in two_loop_bench(net, cfg.behavior(), q, bn.get("multipliers", [1, 2, 3, 4]), opts):
        for method, (gaps, hit, status) in out.items():
            rows.extend([mult, method, i, g] for i, g in enumerate(gaps))
        pn, pr = out["pn"][1], out["projection"][1]
        levels[f"{mult:g}x"] = {"pn_iterations": pn, "projection_iterations": pr,
                                "pn_status": out["pn"][2], "projection_status": out["projection"][2],
                                "pn_faster": pn is not None and (pr is None or pn < pr)}
    rb.write_csv("convergence.csv", ["multiplier", "method", "iteration", "gap"], rows)
    rb.summary.update(levels=levels, pn_dominates=all(v["pn_faster"] for v in levels.values()),
                      eps_newton=opts.eps_newton, max_iter=opts.max_iter)


RUNNERS = {"solve": _run_solve, "gradcheck": _run_gradcheck, "braess": _run_braess,
           "linear-city-learn": _run_learn, "linear-city-toll": _run_toll, "two-loop-bench": _run_bench}


def run_experiment(cfg: ExperimentConfig, out=None) -> ResultBundle:
    """Run one experiment and write its bundle; exceptions propagate after ``error.json`` is written."""
    out = Path(out or cfg.out or Path("results") / cfg.experiment)
    rb = ResultBundle(out)
    rb.metadata = {"experiment": cfg.experiment, "config_hash": cfg.config_hash(), "seed": cfg.seed,
                   "grad_mode": cfg.grad_mode, "version": __version__, "python": platform.python_version(),
                   "numpy": np.__version__, "threads": threads(), "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    t0 = time.perf_counter()
    try:
        RUNNERS[cfg.experiment](cfg, rb)
    except BaseException as exc:
        rb.metadata.update(status="failed", elapsed_s=time.perf_counter() - t0)
        rb.write_json("error.json", {"type": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc),
                                     "traceback": traceback.format_exc()})
        rb.finish()
        raise
    rb.metadata.update(status="ok", elapsed_s=time.perf_counter() - t0)
    rb.finish()
    return rb


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ConvergenceError):
        return EXIT_SOLVER
    if isinstance(exc, InputError):
        return EXIT_CONFIG
    return EXIT_INTERNAL


# ------------------------------------------------------------------------ main

def build_parser():
    p = argparse.ArgumentParser(prog="vil", description="Differentiable equilibrium experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--grad-mode", choices=("implicit", "explicit", "fd"))
    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "validate":
        diags = validate_config(args.config)
        for d in diags:
            print(d, file=sys.stderr)
        if not diags:
            print(f"{args.config}: ok")
        return EXIT_CONFIG if diags else EXIT_OK
    try:
        cfg = ExperimentConfig.from_file(args.config, seed=args.seed, out=args.out, grad_mode=args.grad_mode,
                                         experiment=args.command)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rb = run_experiment(cfg)
    except VILError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps(_num_out(rb.summary), indent=2, sort_keys=True, default=str))
    print(f"wrote {len(rb.files)} files to {rb.out}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

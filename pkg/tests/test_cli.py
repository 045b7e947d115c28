import json
from pathlib import Path

import pytest

from vil import cli
from vil.cli import ExperimentConfig, main, run_experiment, validate_config, validate_network_dict
from vil.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TOY = {
    "schema": "vil.network/1",
    "name": "toy",
    "nodes": ["A", "B"],
    "edges": [
        {"tail": "A", "head": "B", "kind": "driving", "T": 1.0, "s": 5.0},
        {"tail": "A", "head": "B", "kind": "driving", "T": 1.0, "s": 5.0},
    ],
    "od": [["A", "B"]],
}


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def toy_config(tmp_path, extra=""):
    (tmp_path / "toy.json").write_text(json.dumps(TOY))
    return write(tmp_path, "toy.toml", f"""
experiment = "solve"
[network]
file = "toy.json"
[demand]
values = [6.0]
[solver]
eps_proj = 1.0
eps_newton = 1e-10
{extra}
""")


def bundle(out):
    return {p.name: p.read_bytes() for p in Path(out).iterdir() if p.name != "metadata.json"}


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.toml")))
def test_shipped_configs_are_clean(name):
    assert validate_config(CONFIGS / name) == []


def test_negative_capacity_names_edge_and_field():
    bad = json.loads(json.dumps(TOY))
    bad["edges"][1]["s"] = -2.0
    diags = validate_network_dict(bad, "toy.json")
    assert len(diags) == 1
    assert diags[0].pointer == "toy.json#/edges/1/s"
    assert "edge 1" in diags[0].message and "-2.0" in diags[0].message


def test_disconnected_od_gets_connectivity_diagnostic():
    bad = json.loads(json.dumps(TOY))
    bad["nodes"].append("C")
    bad["od"].append(["A", "C"])
    diags = validate_network_dict(bad, "n.json")
    assert [d.pointer for d in diags] == ["n.json#/od/1"]
    assert diags[0].message.startswith("connectivity")


def test_config_level_diagnostics(tmp_path):
    p = write(tmp_path, "c.toml", """
experiment = "braess"
colour = "blue"
[network]
instance = "braess"
[solver]
eps_proj = "big"
[braess]
modes = ["implicit", "guess"]
""")
    ptrs = {d.pointer for d in validate_config(p)}
    assert {"/colour", "/solver/eps_proj", "/braess/modes/1"} <= ptrs


def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", str(CONFIGS / "braess.toml")]) == 0
    p = write(tmp_path, "c.toml", 'experiment = "nope"\n[network]\ninstance = "braess"\n')
    assert main(["validate", str(p)]) == 2
    assert "/experiment" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.toml")]) == 2
    p = write(tmp_path, "broken.toml", "experiment = \n")
    assert main(["validate", str(p)]) == 2


def test_run_refuses_invalid_config(tmp_path):
    p = write(tmp_path, "c.toml", 'experiment = "solve"\n[network]\ninstance = "atlantis"\n')
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(CONFIGS / "braess.toml", experiment="solve")


def test_toy_symmetric_split(tmp_path):
    cfg = toy_config(tmp_path)
    out = tmp_path / "o"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["status"] == "converged"
    assert s["flows"] == pytest.approx([3.0, 3.0], abs=1e-8)
    meta = json.loads((out / "metadata.json").read_text())
    assert set(meta["files"]) == {"edges.csv", "solver_trace.csv", "summary.json", "metadata.json"}
    assert meta["status"] == "ok"


def test_convergence_failure_exit_code(tmp_path):
    cfg = toy_config(tmp_path, "max_iter = 0")
    out = tmp_path / "o"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["type"] == "ConvergenceError" and err["exit_code"] == 3
    assert json.loads((out / "metadata.json").read_text())["status"] == "failed"


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(cfg, rb):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli.RUNNERS, "solve", boom)
    out = tmp_path / "o"
    assert main(["solve", "--config", str(toy_config(tmp_path)), "--out", str(out)]) == 4
    assert json.loads((out / "error.json").read_text())["exit_code"] == 4


def small_braess(tmp_path):
    return write(tmp_path, "b.toml", """
experiment = "braess"
[network]
instance = "braess"
[solver]
eps_proj = 1.0
eps_newton = 1e-10
[braess]
q = [4.0, 12.0, 16.0, 26.0]
""")


@pytest.mark.invariant
def test_reruns_are_byte_identical(tmp_path, monkeypatch):
    cfg = small_braess(tmp_path)
    assert main(["braess", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("VIL_THREADS", "3")
    assert main(["braess", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a, b = bundle(tmp_path / "a"), bundle(tmp_path / "b")
    assert a == b
    rows = (tmp_path / "a" / "braess_sweep.csv").read_text().splitlines()
    assert rows[0] == "q,implicit,explicit,fd" and len(rows) == 5
    meta = json.loads((tmp_path / "b" / "metadata.json").read_text())
    assert meta["threads"] == 3


def test_seed_and_mode_enter_the_hash(tmp_path):
    cfg = small_braess(tmp_path)
    h0 = ExperimentConfig.from_file(cfg).config_hash()
    assert ExperimentConfig.from_file(cfg).config_hash() == h0
    assert ExperimentConfig.from_file(cfg, seed=3).config_hash() != h0
    assert ExperimentConfig.from_file(cfg, grad_mode="fd").config_hash() != h0


def test_gradcheck_single_mode(tmp_path):
    out = tmp_path / "g"
    assert main(["gradcheck", "--config", str(CONFIGS / "gradcheck.toml"), "--out", str(out),
                 "--grad-mode", "implicit"]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["modes"] == ["implicit"] and s["passed"]


def test_learn_then_toll_with_learned_behavior(tmp_path):
    learn_cfg = write(tmp_path, "l.toml", """
experiment = "linear-city-learn"
[network]
instance = "linear_city"
[learning]
presets = ["a"]
epochs = 2
n_periods = 3
n_train = 2
""")
    assert main(["linear-city-learn", "--config", str(learn_cfg), "--out", str(tmp_path / "l")]) == 0
    head = (tmp_path / "l" / "training_a.csv").read_text().splitlines()[0].split(",")
    assert head[:5] == ["epoch", "train_loss", "test_loss", "gamma", "tau"]
    assert "q_cap:1-2" in head
    table = (tmp_path / "l" / "learned_params.csv").read_text().splitlines()
    assert table[0].startswith("setting,gamma,tau,1-2") and table[1].startswith("a,")

    toll_cfg = write(tmp_path, "t.toml", """
experiment = "linear-city-toll"
[network]
instance = "linear_city"
[demand]
n_periods = 3
[intervention]
learned = "l/learned_params.json"
setting = "a"
max_outer = 1
max_inner = 2
""")
    assert main(["linear-city-toll", "--config", str(toll_cfg), "--out", str(tmp_path / "t")]) == 0
    s = json.loads((tmp_path / "t" / "summary.json").read_text())
    assert "truth_tt_reduction_pct" in s and "truth_after" in s


def test_bench_summary(tmp_path):
    cfg = write(tmp_path, "b.toml", """
experiment = "two-loop-bench"
[network]
instance = "two_loop"
[bench]
multipliers = [1]
""")
    out = tmp_path / "o"
    rb = run_experiment(ExperimentConfig.from_file(cfg), out)
    assert rb.summary["levels"]["1x"]["pn_status"] == "converged"
    assert (out / "convergence.csv").read_text().startswith("multiplier,method,iteration,gap")

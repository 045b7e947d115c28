import numpy as np
import pytest

from vil.core import (
    PolyhedralSet,
    VIProblem,
    evaluate_F,
    jacobian_F,
    probe_monotonicity,
)
from vil.errors import EvaluationError, InfeasibleError, InputError, UnboundedError


def shift_problem(n=2, lo=-5.0, hi=5.0):
    return VIProblem(
        dim=n,
        F=lambda z, lam: z - lam,
        omega=PolyhedralSet.box(np.full(n, lo), np.full(n, hi)),
        n_params=n,
    )


def test_evaluate_identity_offset():
    p = shift_problem()
    np.testing.assert_array_equal(evaluate_F(p, [1.0, 2.0], [1.0, 2.0]), [0.0, 0.0])


def test_evaluate_affine_matches_matvec():
    rng = np.random.default_rng(3)
    P = rng.standard_normal((4, 4))
    r = rng.standard_normal(4)
    p = VIProblem(4, lambda z, lam: P @ z + r, PolyhedralSet.box(-np.ones(4), np.ones(4)))
    for _ in range(10):
        z = rng.standard_normal(4)
        np.testing.assert_allclose(evaluate_F(p, z, []), P @ z + r, rtol=0, atol=1e-14)


def test_evaluate_rejects_bad_dimension():
    with pytest.raises(InputError):
        evaluate_F(shift_problem(), [1.0, 2.0, 3.0], [0.0, 0.0])


def test_evaluate_names_nonfinite_coordinate():
    p = VIProblem(2, lambda z, lam: np.array([0.0, np.nan]), PolyhedralSet.box([0, 0], [1, 1]))
    with pytest.raises(EvaluationError, match=r"\(1,\)"):
        evaluate_F(p, [0.5, 0.5], [])


def test_lambda_box_enforced():
    p = VIProblem(1, lambda z, lam: z - lam, PolyhedralSet.box([0], [1]), n_params=1,
                  lam_lo=np.array([0.0]), lam_hi=np.array([1.0]))
    with pytest.raises(InputError):
        evaluate_F(p, [0.5], [2.0])


def test_jacobians_of_shift():
    p = shift_problem()
    np.testing.assert_allclose(jacobian_F(p, [0.3, 0.1], [0.0, 0.0], "z"), np.eye(2), atol=1e-8)
    np.testing.assert_allclose(jacobian_F(p, [0.3, 0.1], [0.0, 0.0], "lam"), -np.eye(2), atol=1e-8)


def test_analytic_jacobian_agrees_with_fallback():
    rng = np.random.default_rng(0)
    pset = PolyhedralSet.box(-np.ones(3), np.ones(3))

    def F(z, lam):
        return np.array([z[0] ** 3 + lam[0] * z[1], np.sin(z[1]) + z[2], np.exp(z[2]) * lam[1]])

    def dFdz(z, lam):
        return np.array([[3 * z[0] ** 2, lam[0], 0], [0, np.cos(z[1]), 1], [0, 0, np.exp(z[2]) * lam[1]]])

    def dFdl(z, lam):
        return np.array([[z[1], 0], [0, 0], [0, np.exp(z[2])]])

    analytic = VIProblem(3, F, pset, 2, dF_dz=dFdz, dF_dlam=dFdl)
    numeric = VIProblem(3, F, pset, 2)
    lam = np.array([0.7, 1.3])
    for _ in range(20):
        z = rng.uniform(-1, 1, 3)
        for wrt in ("z", "lam"):
            Ja = jacobian_F(analytic, z, lam, wrt)
            Jn = jacobian_F(numeric, z, lam, wrt)
            assert np.max(np.abs(Ja - Jn)) <= 1e-4 * (1 + np.max(np.abs(Ja)))


def test_set_probe_rejects_empty_and_unbounded():
    with pytest.raises(InfeasibleError):
        PolyhedralSet([[1.0], [-1.0]], [0.0, -1.0])  # x <= 0 and x >= 1
    with pytest.raises(UnboundedError):
        PolyhedralSet([[-1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])  # positive orthant
    with pytest.raises(UnboundedError):
        PolyhedralSet([[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0])  # strip


def test_set_with_redundant_equalities():
    M = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 2.0, 1.0]])
    s = PolyhedralSet(-np.eye(3), np.zeros(3), M, [1.0, 1.0, 2.0])
    assert len(s.eq_rows) == 2
    assert s.contains(s.interior_point)


def test_probe_identity_strongly_monotone():
    p = VIProblem(3, lambda z, lam: z, PolyhedralSet.box(-np.ones(3), np.ones(3)))
    rep = probe_monotonicity(p, [], n_probes=5, seed=1)
    assert rep.verdict == "strongly-monotone-evidence"
    assert rep.min_sym_eig == pytest.approx(1.0, abs=1e-8)


def test_probe_skew_is_monotone():
    P = np.array([[0.0, 1.0], [-1.0, 0.0]])
    p = VIProblem(2, lambda z, lam: P @ z, PolyhedralSet.box(-np.ones(2), np.ones(2)), dF_dz=lambda z, l: P)
    rep = probe_monotonicity(p, [], n_probes=5, seed=1)
    assert rep.min_sym_eig == pytest.approx(0.0, abs=1e-12)
    assert rep.verdict == "monotone-evidence"


def test_probe_negative_identity_indefinite():
    p = VIProblem(2, lambda z, lam: -z, PolyhedralSet.box(-np.ones(2), np.ones(2)))
    assert probe_monotonicity(p, [], n_probes=3, seed=0).verdict == "indefinite"


@pytest.mark.invariant
def test_probe_reproducible():
    P = np.array([[2.0, 1.0], [-0.5, 1.0]])
    p = VIProblem(2, lambda z, lam: P @ z + np.sin(z), PolyhedralSet.box(-np.ones(2), np.ones(2)))
    assert probe_monotonicity(p, [], 7, seed=11) == probe_monotonicity(p, [], 7, seed=11)


def test_debug_purity_check(monkeypatch):
    state = {"n": 0}

    def impure(z, lam):
        state["n"] += 1
        return z + state["n"]

    p = VIProblem(1, impure, PolyhedralSet.box([0], [1]))
    monkeypatch.setenv("VIL_DEBUG", "1")
    with pytest.raises(EvaluationError, match="pure"):
        evaluate_F(p, [0.5], [])

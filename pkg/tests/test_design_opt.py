import numpy as np
import pytest

import oracles
from mtdlab import harness as hs
from mtdlab.design_opt import (LMI, ActuatorTerm, DesignBounds, DesignSolution, SdpInfeasible, SdpProblem,
                               baseline_iid_coupling, baseline_iid_nonlinearity, build_actuator_design,
                               build_coupling_design, build_nonlinearity_design, solve_sdp)
from mtdlab.information import CouplingBlocks

I1 = np.eye(1)


def test_trivial_programs():
    I = np.eye(3)
    sol = solve_sdp(SdpProblem(["eps"], {}, [LMI("a", I, [("scalar", "eps", -I)])], {"eps": 1.0}))
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    D = np.diag([1.0, 2.0])
    sol = solve_sdp(SdpProblem(["eps"], {}, [LMI("a", D, [("scalar", "eps", -np.eye(2))])], {"eps": 1.0}))
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    bad = SdpProblem(["eps"], {}, [LMI("a", -I, [("scalar", "eps", -I)])], {"eps": 1.0})
    with pytest.raises(SdpInfeasible):
        solve_sdp(bad)
    assert solve_sdp(bad, raise_on_failure=False).status == "infeasible"


def test_problem_validation():
    with pytest.raises(ValueError):
        SdpProblem(["eps"], {}, [LMI("a", np.eye(2), [("scalar", "nope", np.eye(2))])], {"eps": 1.0})
    with pytest.raises(ValueError):
        LMI("a", np.eye(2), [("scalar", "eps", np.eye(3))])
    with pytest.raises(ValueError):
        DesignBounds(N_B=-np.eye(2))


# -- actuator ------------------------------------------------------------------------------

def _scalar_bounds(T, N_B=1.0):
    return DesignBounds(N_B=N_B * I1, N_t=[(t + 1) * I1 for t in range(T)], Theta_A=I1, Theta_C=I1,
                        Theta_i=[I1] * T, M_G=I1)


def test_actuator_without_coupling_is_a_generalized_eigenvalue(rng):
    p, T = 2, 3
    terms = []
    for _ in range(T):
        Bk = rng.standard_normal((p, p))
        terms.append(ActuatorTerm(np.zeros((2, 2)), np.zeros((2, p)), Bk @ Bk.T + 0.1 * np.eye(p)))
    lag_terms = [terms[:T - t] for t in range(T)]
    bounds = DesignBounds(N_B=np.eye(p), N_t=[(t + 1) * np.eye(p) for t in range(T)])
    sol = solve_sdp(build_actuator_design(lag_terms, np.zeros(p), bounds))
    expect = min(np.linalg.eigvalsh(0.5 * sum(tm.K for tm in lag_terms[t]) / (t + 1)).min() for t in range(T))
    assert sol.objective == pytest.approx(expect, rel=1e-5)


def test_zero_actuator_bound_forces_zero():
    terms = [ActuatorTerm(np.eye(1), np.zeros((1, 1)), np.eye(1))]
    sol = solve_sdp(build_actuator_design([terms], np.zeros(1), _scalar_bounds(1, N_B=0.0)))
    assert np.abs(sol.values["Sigma_B"]).max() < 1e-6
    assert sol.objective == pytest.approx(0.5, abs=1e-5)


def test_actuator_scalar_grid(rng):
    T = 3
    raw = [(abs(rng.normal(0.8, 0.2)), rng.normal(0, 0.1), abs(rng.normal(0.3, 0.1))) for _ in range(T)]
    lag_raw = [raw[:T - t] for t in range(T)]
    mu = 0.4
    lag_terms = [[ActuatorTerm(W * I1, X * I1, K * I1) for W, X, K in lag] for lag in lag_raw]
    sol = solve_sdp(build_actuator_design(lag_terms, [mu], _scalar_bounds(T, N_B=1.3)))
    grid = oracles.actuator_grid(lag_raw, mu, 1.3, [1, 2, 3])
    assert sol.objective == pytest.approx(grid, abs=1e-2)
    assert min(sol.slacks.values()) >= -1e-6


# -- coupling --------------------------------------------------------------------------------

def _blocks(rng, n, T):
    J, S, F = [], [], []
    for _ in range(T):
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        J.append(a @ a.T)
        S.append(b @ b.T)
        F.append(rng.standard_normal((3, 3)))
    return CouplingBlocks(J, S, F)


def test_coupling_zero_means_sits_at_bounds(rng):
    n, T = 3, 4
    cb = _blocks(rng, n, T)
    th = np.ones((n, n)) + 0.5 * np.eye(n)
    bounds = DesignBounds(Theta_A=th, Theta_C=th, Theta_i=[np.eye(n)] * T)
    prob = build_coupling_design(cb, np.zeros(n), np.zeros(n), bounds)
    sol = solve_sdp(prob)
    expect = min(np.linalg.eigvalsh(np.trace(cb.J[i]) * th + np.trace(cb.S[i]) * th).min() for i in range(T))
    assert sol.objective == pytest.approx(expect, rel=1e-5)
    # the optimum is not unique; covariances at their bounds must attain it
    at_bounds = {"Sigma_A": th, "Sigma_C": th, "gamma": expect}
    assert all(np.linalg.eigvalsh(prob.evaluate(l, at_bounds)).min() >= -1e-9 for l in prob.lmis)


def test_coupling_zero_bounds_uses_means(rng):
    n, T = 2, 3
    cb = _blocks(rng, n, T)
    mu_A, mu_C = np.ones(n), np.ones(n)
    bounds = DesignBounds(Theta_A=np.zeros((n, n)), Theta_C=np.zeros((n, n)), Theta_i=[np.eye(n)] * T)
    sol = solve_sdp(build_coupling_design(cb, mu_A, mu_C, bounds), raise_on_failure=False)
    assert np.abs(sol.values["Sigma_A"]).max() < 1e-6 and np.abs(sol.values["Sigma_C"]).max() < 1e-6
    consts = []
    for i in range(T):
        cross = np.sum(cb.F[i]) * np.outer(mu_A, mu_C)
        consts.append(np.linalg.eigvalsh(np.sum(cb.J[i]) * np.outer(mu_A, mu_A) + np.sum(cb.S[i])
                                         * np.outer(mu_C, mu_C) + cross + cross.T).min())
    assert sol.objective == pytest.approx(max(min(consts), 0.0), abs=1e-5)


def test_coupling_scalar_grid(rng):
    T = 3
    J = [abs(rng.normal(1.0, 0.3)) for _ in range(T)]
    S = [abs(rng.normal(0.7, 0.3)) for _ in range(T)]
    F = [rng.normal(0.0, 0.3) for _ in range(T)]
    th_i = [1.0, 1.5, 0.8]
    cb = CouplingBlocks([j * I1 for j in J], [s * I1 for s in S], [f * I1 for f in F])
    bounds = DesignBounds(Theta_A=1.2 * I1, Theta_C=0.9 * I1, Theta_i=[t * I1 for t in th_i])
    sol = solve_sdp(build_coupling_design(cb, [0.5], [0.3], bounds))
    grid = oracles.coupling_grid(J, S, F, 0.5, 0.3, 1.2, 0.9, th_i)
    assert sol.objective == pytest.approx(grid, abs=1e-2)
    assert min(sol.slacks.values()) >= -1e-6


def test_quadtank_coupling_and_baseline():
    probs = hs.design_problems(hs.preset_quadtank())
    sol = solve_sdp(probs["coupling"])
    assert sol.objective > 0 and sol.status == "optimal"
    mm = probs["_mean_model"]
    base = baseline_iid_coupling(probs["_blocks"], mm.dist_Abar.mean, mm.dist_Cbar.mean, probs["_bounds"],
                                 sol.objective)
    assert base.status in ("optimal", "optimal_inaccurate")
    assert base.values["xi1"] <= 0.5 + 1e-6 and base.values["xi2"] <= 0.5 + 1e-6
    for name in ("Sigma_A", "Sigma_C"):
        assert np.linalg.eigvalsh(sol.values[name]).min() >= -1e-9


def test_baseline_coupling_bound_limited_and_infeasible(rng):
    n, T = 2, 2
    cb = _blocks(rng, n, T)
    bounds = DesignBounds(Theta_A=np.eye(n), Theta_C=np.eye(n), Theta_i=[np.eye(n)] * T)
    sol = baseline_iid_coupling(cb, np.zeros(n), np.zeros(n), bounds, 1e-3)
    assert sol.values["xi1"] == pytest.approx(1.0, abs=1e-5)
    assert sol.values["xi2"] == pytest.approx(1.0, abs=1e-5)
    out = baseline_iid_coupling(cb, np.zeros(n), np.zeros(n), bounds, 1e6, raise_on_failure=False)
    assert out.status == "infeasible"


# -- nonlinearity --------------------------------------------------------------------------------

def test_nonlinearity_identity_case():
    mt = 3
    bounds = DesignBounds(M_G=np.eye(mt))
    sol = solve_sdp(build_nonlinearity_design([np.eye(mt)] * 4, np.zeros(mt), bounds))
    assert sol.objective == pytest.approx(mt, abs=1e-5)
    np.testing.assert_allclose(sol.values["Sigma_G"], np.eye(mt), atol=1e-4)


def test_nonlinearity_zero_bound():
    sol = solve_sdp(build_nonlinearity_design([np.eye(2)] * 2, np.zeros(2), DesignBounds(M_G=np.zeros((2, 2)))))
    assert sol.objective == pytest.approx(0.0, abs=1e-6)


def test_nonlinearity_random_blocks(rng):
    mt, T = 3, 5
    Ss = []
    for _ in range(T):
        X = rng.standard_normal((mt, mt))
        Ss.append(X @ X.T)
    M = np.ones((mt, mt)) + 0.5 * np.eye(mt)
    mu = rng.standard_normal(mt)
    sol = solve_sdp(build_nonlinearity_design(Ss, mu, DesignBounds(M_G=M)))
    closed = min(np.trace((M + np.outer(mu, mu)) @ S) for S in Ss)
    assert sol.objective == pytest.approx(closed, rel=1e-6, abs=1e-6)


def test_nonlinearity_scalar_grid():
    S = [0.9, 1.4, 0.6]
    sol = solve_sdp(build_nonlinearity_design([s * I1 for s in S], [0.3], DesignBounds(M_G=1.1 * I1)))
    assert sol.objective == pytest.approx(oracles.nonlinearity_grid(S, 0.3, 1.1), abs=1e-2)


def test_nonlinearity_baseline():
    assert baseline_iid_nonlinearity(np.eye(2)) == pytest.approx(1.0)
    assert baseline_iid_nonlinearity(np.diag([1.0, 4.0])) == pytest.approx(1.0)
    assert baseline_iid_nonlinearity(np.ones((2, 2)) + 0.5 * np.eye(2)) == pytest.approx(0.5)


def test_solution_roundtrip(tmp_path):
    sol = solve_sdp(build_nonlinearity_design([np.eye(2)], np.zeros(2), DesignBounds(M_G=np.eye(2))))
    sol.save(tmp_path / "s.json")
    back = DesignSolution.load(tmp_path / "s.json")
    np.testing.assert_allclose(back.covariance("Sigma_G"), sol.covariance("Sigma_G"))
    assert back.objective == pytest.approx(sol.objective)

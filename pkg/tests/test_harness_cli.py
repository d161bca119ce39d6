import json

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from mtdlab import harness as hs
from mtdlab.cli import main


def small_none_config(**kw):
    d = dict(name="scalar", mtd="none", plant={"A": [[0.9]], "B": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]]},
             trials=4, horizon=50, seed=3)
    d.update(kw)
    return hs.ScenarioConfig.from_dict(d)


# -- Riccati and control ----------------------------------------------------------------

def test_dare_zero_dynamics_gives_zero_gain():
    L, P = hs.dare_solve(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
    np.testing.assert_allclose(L, 0, atol=1e-12)
    np.testing.assert_allclose(P, np.eye(2))


def test_dare_scalar_golden_ratio():
    L, P = hs.dare_solve([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    phi = (1 + np.sqrt(5)) / 2
    assert P[0, 0] == pytest.approx(phi, abs=1e-8)
    assert L[0, 0] == pytest.approx(phi / (1 + phi), abs=1e-8)


def test_dare_matches_scipy(rng):
    for _ in range(10):
        A = rng.standard_normal((4, 4))
        B = rng.standard_normal((4, 2))
        Q = np.eye(4) + 0.1 * np.diag(rng.random(4))
        R = np.diag(1 + rng.random(2))
        L, P = hs.dare_solve(A, B, Q, R)
        np.testing.assert_allclose(P, solve_discrete_are(A, B, Q, R), rtol=1e-6, atol=1e-8)
        assert max(abs(np.linalg.eigvals(A - B @ L))) < 1


def test_dare_rejects_bad_input():
    with pytest.raises(ValueError):
        hs.dare_solve([[1.0]], [[1.0]], [[1.0]], [[0.0]])
    with pytest.raises(np.linalg.LinAlgError):
        hs.LqgController.design(np.array([[2.0]]), np.array([[0.0]]))


def test_steady_kalman_is_dual(rng):
    A = 0.7 * rng.standard_normal((3, 3))
    C = rng.standard_normal((2, 3))
    Q, R = np.eye(3), 0.5 * np.eye(2)
    K, P = hs.steady_kalman(A, C, Q, R)
    np.testing.assert_allclose(P, solve_discrete_are(A.T, C.T, Q, R), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(K, P @ C.T @ np.linalg.inv(C @ P @ C.T + R))


# -- benchmark construction -------------------------------------------------------------

def test_noise_covariances_psd_and_deterministic():
    for seed in range(100):
        M = hs.uniform_gram_covariance(4, seed)
        assert np.allclose(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= -1e-12
        assert np.abs(M).max() <= 4 / 100 + 1e-12
    np.testing.assert_array_equal(hs.uniform_gram_covariance(6, 11), hs.uniform_gram_covariance(6, 11))


def test_quadtank_preset_shapes():
    cfg = hs.preset_quadtank()
    A, B, C = (np.asarray(cfg.plant[k]) for k in "ABC")
    assert A.shape == (4, 4) and B.shape == (4, 2) and C.shape == (2, 4)
    assert np.asarray(cfg.aux["A_tilde"]).shape == (4, 4)
    assert np.asarray(cfg.aux["C_tilde"]).shape == (2, 4)
    assert np.asarray(cfg.aux["R_full"]).shape == (4, 4)
    assert max(abs(np.linalg.eigvals(cfg.aux["A_tilde"]))) < 1
    assert cfg.aux["power"] == 2
    assert cfg.detector == {"window": 10, "false_alarm_rate": 1e-3}
    np.testing.assert_array_equal(cfg.aux["R_full"][2:, 2:], cfg.plant["R"])


def test_config_roundtrip_and_rejection(tmp_path):
    cfg = hs.preset_quadtank("nonlinear")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = hs.ScenarioConfig.load(path)
    assert back.to_json() == cfg.to_json()
    with pytest.raises(hs.ConfigError):
        hs.ScenarioConfig.from_dict({"mtd": "extended", "bogus": 1})
    with pytest.raises(hs.ConfigError):
        hs.ScenarioConfig.from_dict({"mtd": "sideways"})
    with pytest.raises(hs.ConfigError):
        cfg.replace(attack={"kind": "teleport"})
    with pytest.raises(hs.ConfigError):
        cfg.replace(trials=0)


# -- experiments --------------------------------------------------------------------------

def test_plain_plant_alarm_rate_near_design():
    cfg = hs.preset_quadtank("none").replace(trials=100, horizon=400, seed=5,
                                             detector={"window": 10, "false_alarm_rate": 0.01})
    res = hs.run_experiment(cfg)
    rate = res.alarm_rate[9:].mean()
    assert 0.007 <= rate <= 0.013


def test_extended_plant_reveals_covert_attack():
    cfg = hs.preset_quadtank("extended").replace(
        trials=10, horizon=300, seed=1, attack={"kind": "covert_subtract", "start_step": 150, "magnitude": 0.3})
    res = hs.run_experiment(cfg)
    assert res.g_mean[160:].mean() >= 3 * res.g_mean[9:150].mean()


def test_decoupled_extension_reduces_to_plain_plant():
    # zero means and covariances with block-diagonal sensor noise: the lower block
    # of the filter is exactly the plain plant's filter
    cfg = hs.preset_quadtank("extended")
    Rf = np.asarray(cfg.aux["R_full"]).copy()
    Rf[:2, 2:] = Rf[2:, :2] = 0
    aux = dict(cfg.aux, mu_A=np.zeros(4), mu_C=np.zeros(4), R_full=Rf)
    cfg = cfg.replace(aux=aux, design={"source": "explicit"})
    model = hs.mean_model(cfg, covs=hs.solve_designs(cfg))
    Acal, Bcal, Ccal = model.blocks(model.mean_realization())
    K, P = hs.steady_kalman(Acal, Ccal, model.Q_full, model.R_full)
    b = hs.base_model(cfg)
    K0, P0 = hs.steady_kalman(b.A, b.C, b.Q, b.R)
    np.testing.assert_allclose(Acal[:4, 4:], 0)
    np.testing.assert_allclose(K[4:, 2:], K0, atol=1e-8)
    np.testing.assert_allclose(K[4:, :2], 0, atol=1e-8)
    np.testing.assert_allclose(P[4:, 4:], P0, atol=1e-8)


def test_determinism_and_worker_independence(tmp_path):
    base = hs.preset_quadtank("extended").replace(
        trials=6, horizon=60, seed=9, attack={"kind": "covert_subtract", "start_step": 30, "magnitude": 0.3})
    hs.run_experiment(base.replace(out_dir=str(tmp_path / "a")))
    hs.run_experiment(base.replace(out_dir=str(tmp_path / "b")))
    hs.run_experiment(base.replace(out_dir=str(tmp_path / "c"), workers=2))
    for name in ("metrics.csv", "trajectory_trial0.csv", "detection_trial0.csv", "attack_trial0.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert a == (tmp_path / "c" / name).read_bytes()


def test_divergence_is_reported():
    cfg = small_none_config(plant={"A": [[1.5]], "B": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]]},
                            horizon=2000)
    st = hs.build_setup(cfg)
    st.ctrl.L = np.zeros_like(st.ctrl.L)          # open loop on an unstable plant
    with pytest.raises(hs.ExperimentFailure):
        hs.run_experiment(cfg, setup=st)


# -- command line ------------------------------------------------------------------------

def test_cli_preset_and_simulate(tmp_path, capsys):
    assert main(["preset", "quadtank", "--trials", "3"]) == 0
    text = capsys.readouterr().out
    cfg_path = tmp_path / "q.json"
    cfg_path.write_text(text)
    out = tmp_path / "out"
    assert main(["simulate", str(cfg_path), "--seed", "4", "--out-dir", str(out), "--ci"]) == 0
    assert (out / "metrics.csv").exists() and (out / "design.json").exists()
    assert main(["design", "coupling", str(cfg_path)]) == 0
    assert main(["hybrid", "validate", str(cfg_path)]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "missing.json")]) == 2
    assert main(["nonsense"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mtd": "extended", "plant": {}}))
    assert main(["simulate", str(bad)]) == 2
    unstable = tmp_path / "unstable.json"
    unstable.write_text(json.dumps({"mtd": "none", "plant": {"A": [[2.0]], "B": [[0.0]], "C": [[1.0]],
                                                             "Q": [[1.0]], "R": [[1.0]]}, "trials": 2}))
    assert main(["simulate", str(unstable)]) == 3
    capsys.readouterr()

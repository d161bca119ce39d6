import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mtdlab.detection import (DetectorState, SensorDetectorState, chi2_update, kl_divergence, residue,
                              sensor_chi2_update, threshold_for_far, write_detection_trace)
from mtdlab.estimation import FilterState, kf_predict, kf_update
from mtdlab.model_core import NoiseStreams


def test_residue_arithmetic():
    assert residue(np.array([3.0]), np.eye(1), np.array([1.0]))[0] == 2.0
    np.testing.assert_array_equal(residue(np.array([1.0, 2.0]), np.eye(2), np.array([1.0, 2.0])), 0.0)


def test_nonlinear_residue():
    # aux output 10, linear prediction 1, G h(x_hat) = 9
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    z = residue(np.array([10.0, 3.0]), C, np.array([1.0, 3.0]), G=np.array([[1.0]]), h=np.square, n_aux=1)
    np.testing.assert_allclose(z, [0.0, 0.0])


def test_chi2_arithmetic():
    ds = DetectorState(window=4, threshold=10.0)
    for _ in range(5):
        g, alarm = chi2_update(ds, np.zeros(2), np.eye(2))
    assert g == 0.0 and not alarm
    ds = DetectorState(window=1, threshold=20.0)
    g, alarm = chi2_update(ds, np.array([3.0, 4.0]), np.eye(2))
    assert g == 25.0 and alarm


def test_window_drops_old_terms():
    ds = DetectorState(window=2)
    for v in (1.0, 2.0, 3.0):
        g, _ = chi2_update(ds, np.array([v]), np.eye(1))
    assert g == 13.0


def test_thresholds():
    assert threshold_for_far(1, 0.05) == pytest.approx(3.841458820694124, abs=1e-9)
    assert threshold_for_far(40, 0.001) == pytest.approx(73.40, abs=5e-3)
    assert threshold_for_far(5, 1 - 1e-12) < 1e-3
    with pytest.raises(ValueError):
        threshold_for_far(3, 0.0)
    with pytest.raises(ValueError):
        threshold_for_far(0, 0.1)


def test_h0_mean_is_dof():
    rng = np.random.default_rng(8)
    n, m, T = 3, 4, 10
    A = rng.standard_normal((n, n))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    C = rng.standard_normal((m, n))
    Q, R = 0.1 * np.eye(n), 0.05 * np.eye(m) + 0.01
    noise = NoiseStreams(1, Q, R)
    fs = FilterState.initial(n)
    x = np.linalg.cholesky(np.eye(n)) @ rng.standard_normal(n)
    ds = DetectorState(T)
    g = []
    for k in range(T * 1200):
        fs = kf_update(fs, C, R, C @ x + noise.sensor())
        gk, _ = chi2_update(ds, fs.z, fs.S)
        if k >= T - 1 and (k + 1) % T == 0:
            g.append(gk)             # disjoint windows
        x = A @ x + noise.process()
        fs = kf_predict(fs, A, None, Q, None)
    assert len(g) >= 1000
    assert np.mean(g) == pytest.approx(T * m, rel=0.05)


def test_sensor_detector():
    sds = SensorDetectorState(window=3, threshold=100.0)
    for _ in range(3):
        g, _ = sensor_chi2_update(sds, 0.0)
    assert g == 0.0
    sds = SensorDetectorState(window=3)
    for z in (1.0, 2.0, 2.0):
        g, _ = sensor_chi2_update(sds, z)
    assert g == 9.0


def test_sensor_exclusion_after_consecutive_alarms():
    sds = SensorDetectorState(window=1, threshold=1.0, exclude_after=3)
    seq = [2.0, 2.0, 0.0, 2.0, 2.0, 2.0]
    flags = [sensor_chi2_update(sds, z, k)[1] for k, z in enumerate(seq)]
    assert flags == [False, False, False, False, False, True]
    assert sds.first_excluded == 5


def test_healthy_sensor_mean():
    rng = np.random.default_rng(3)
    sds = SensorDetectorState(window=10)
    g = [sensor_chi2_update(sds, z)[0] for z in rng.standard_normal(20000)]
    assert np.mean(g[9::10]) == pytest.approx(10.0, rel=0.05)


def test_kl_simple_cases():
    assert kl_divergence(np.zeros(3), [np.ones((2, 3))], [np.eye(2)]) == 0.0
    assert kl_divergence(np.array([2.0]), [np.eye(1)], [np.eye(1)]) == pytest.approx(2.0)


def _gauss_kl(m0, S0, m1, S1):
    k = len(m0)
    S1i = np.linalg.inv(S1)
    d = m1 - m0
    return 0.5 * (np.trace(S1i @ S0) + d @ S1i @ d - k + np.log(np.linalg.det(S1) / np.linalg.det(S0)))


def test_kl_against_gaussian_oracles(rng):
    phi = rng.standard_normal(4)
    Ms = [rng.standard_normal((2, 4)) for _ in range(3)]
    Ss = []
    for _ in range(3):
        X = rng.standard_normal((2, 2))
        Ss.append(X @ X.T + 0.5 * np.eye(2))
    closed = sum(_gauss_kl(M @ phi, S, np.zeros(2), S) for M, S in zip(Ms, Ss))
    assert kl_divergence(phi, Ms, Ss) == pytest.approx(closed, rel=1e-10)
    # Monte Carlo estimate of one term
    M, S = Ms[0], Ss[0]
    p, q = multivariate_normal(M @ phi, S), multivariate_normal(np.zeros(2), S)
    X = p.rvs(200_000, random_state=4)
    mc = np.mean(p.logpdf(X) - q.logpdf(X))
    assert kl_divergence(phi, [M], [S]) == pytest.approx(mc, rel=0.02)


def test_kl_shape_error():
    with pytest.raises(ValueError):
        kl_divergence(np.zeros(2), [np.eye(3)], [np.eye(3)])


def test_detection_trace(tmp_path):
    write_detection_trace(tmp_path / "d.csv", [1.0, 2.0], 1.5, [False, True], [[0.5, 0.5], [1.0, 1.0]])
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "k,g,eta,alarm,g_s1,g_s2"
    assert rows[2].split(",")[3] == "1"

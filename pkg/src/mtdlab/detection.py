"""Residues, windowed chi-square detectors and the residue-bias KL divergence."""
import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


def residue(y, C, x_prior, G=None, h=None, n_aux=0):
    """z = y - C x_prior, minus ``[G h(x_prior_plant); 0]`` when G and h are given."""
    z = np.asarray(y, dtype=float) - C @ x_prior
    if G is not None and h is not None:
        G = np.atleast_2d(G)
        z = z.copy()
        z[:G.shape[0]] -= G @ h(np.asarray(x_prior)[n_aux:])
    return z


def threshold_for_far(dof, false_alarm_rate):
    """Chi-square threshold with upper-tail probability ``false_alarm_rate``."""
    if not 0 < false_alarm_rate < 1:
        raise ValueError("false alarm rate must lie in (0, 1)")
    if dof < 1:
        raise ValueError("dof must be positive")
    return float(stats.chi2.isf(false_alarm_rate, dof))


@dataclass
class DetectorState:
    window: int = 10
    threshold: float = np.inf
    terms: deque = field(default_factory=deque)   # per-step quadratic forms z' S^-1 z
    g: float = 0.0

    def reset(self):
        self.terms.clear()
        self.g = 0.0


def quadratic_form(z, S):
    try:
        cf = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("residue covariance is not positive definite") from exc
    v = np.linalg.solve(cf, z)
    return float(v @ v)


def chi2_update(ds: DetectorState, z, S):
    """Push one residue; returns (g_k, alarm)."""
    ds.terms.append(quadratic_form(np.asarray(z, float), np.atleast_2d(S)))
    while len(ds.terms) > ds.window:
        ds.terms.popleft()
    ds.g = float(sum(ds.terms))
    return ds.g, ds.g > ds.threshold


@dataclass
class SensorDetectorState:
    window: int = 10
    threshold: float = np.inf
    exclude_after: int = 5
    terms: deque = field(default_factory=deque)
    g: float = 0.0
    run: int = 0             # consecutive alarms
    excluded: bool = False
    first_excluded: int = -1


def sensor_chi2_update(sds: SensorDetectorState, z, k=-1):
    """Push one normalized scalar residue; returns (g_{k,s}, excluded)."""
    sds.terms.append(float(z) ** 2)
    while len(sds.terms) > sds.window:
        sds.terms.popleft()
    sds.g = float(sum(sds.terms))
    sds.run = sds.run + 1 if sds.g > sds.threshold else 0
    if sds.run >= sds.exclude_after and not sds.excluded:
        sds.excluded = True
        sds.first_excluded = k
    return sds.g, sds.excluded


def kl_divergence(phi, M_list, S_list):
    """0.5 phi' (sum_i M_i' S_i^-1 M_i) phi for a window of bias maps."""
    phi = np.asarray(phi, dtype=float)
    total = 0.0
    for M, S in zip(M_list, S_list):
        M = np.atleast_2d(M)
        if M.shape[1] != phi.shape[0]:
            raise ValueError(f"bias map has {M.shape[1]} columns but phi has length {phi.shape[0]}")
        total += quadratic_form(M @ phi, np.atleast_2d(S))
    return 0.5 * total


def write_detection_trace(path, g, eta, alarm, g_sensors=None):
    """CSV ``k, g, eta, alarm, g_s1..g_sm``."""
    g = np.asarray(g, float)
    g_sensors = np.zeros((len(g), 0)) if g_sensors is None else np.asarray(g_sensors, float)
    eta = np.broadcast_to(np.asarray(eta, float), g.shape)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "g", "eta", "alarm"] + [f"g_s{i + 1}" for i in range(g_sensors.shape[1])])
        for k in range(len(g)):
            wr.writerow([k, repr(float(g[k])), repr(float(eta[k])), int(bool(alarm[k]))]
                        + [repr(float(v)) for v in g_sensors[k]])

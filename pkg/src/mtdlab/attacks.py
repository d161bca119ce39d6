"""Attack strategies and the residue-bias algebra they induce."""
import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bounds import ParticleCloud, ParticleFilterConfig, TrackingDynamics, TrackingMeasurement, pf_reweight, \
    pf_resample
from .model_core import ExtendedModel, Realization

ATTACK_KINDS = ("none", "fdi_constant", "zero_dynamics", "covert_subtract", "estimate_tracking")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    start_step: int = 0
    magnitude: float = 0.0          # constant actuator bias added to every input channel
    sensors: tuple = ()             # attacked sensors for the switched plant (0-based)
    sensor_bias: float = 0.0        # constant bias on those sensors
    stop_step: Optional[int] = None
    mode: str = "blind"             # estimate tracking: "particle" or "oracle"
    n_particles: int = 500
    seed: int = 12345               # attacker's own sampling stream

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.start_step < 0:
            raise ValueError("start_step must be nonnegative")
        if not np.all(np.isfinite([self.magnitude, self.sensor_bias])):
            raise ValueError("attack magnitudes must be finite")

    def active(self, k):
        return self.kind != "none" and k >= self.start_step and (self.stop_step is None or k < self.stop_step)

    def input_bias(self, k, p):
        if not self.active(k):
            return np.zeros(p)
        return np.full(p, float(self.magnitude))

    def to_dict(self):
        return {"kind": self.kind, "start_step": self.start_step, "magnitude": self.magnitude,
                "sensors": list(self.sensors), "sensor_bias": self.sensor_bias, "stop_step": self.stop_step,
                "mode": self.mode, "n_particles": self.n_particles, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "type" in d:
            d["kind"] = d.pop("type")
        if "sensor_set" in d:
            d["sensors"] = d.pop("sensor_set")
        d["sensors"] = tuple(d.get("sensors", ()))
        return cls(**d)


# -- zero dynamics --------------------------------------------------------------

def zero_dynamics_attack(A, Ba, C, ua_seq):
    """Covert attack with x^a_0 = 0: returns (x^a sequence, d^a sequence)
    with d^a_k = -C x^a_k and x^a_{k+1} = A x^a_k + B^a u^a_k."""
    A, Ba, C = np.atleast_2d(A), np.atleast_2d(Ba), np.atleast_2d(C)
    x = np.zeros(A.shape[0])
    xs, ds = [], []
    for ua in ua_seq:
        xs.append(x.copy())
        ds.append(-C @ x)
        x = A @ x + Ba @ np.atleast_1d(ua)
    return np.array(xs), np.array(ds)


class ZeroDynamicsAttacker:
    """Incremental form of ``zero_dynamics_attack`` for closed-loop runs."""

    def __init__(self, A, Ba, C, spec: AttackSpec):
        self.A, self.Ba, self.C = np.atleast_2d(A), np.atleast_2d(Ba), np.atleast_2d(C)
        self.spec = spec
        self.x = np.zeros(self.A.shape[0])

    def __call__(self, k):
        ua = self.spec.input_bias(k, self.Ba.shape[1])
        d = -self.C @ self.x
        self.x = self.A @ self.x + self.Ba @ ua
        return ua, d


class CovertSubtractAttacker:
    """Blind-sampling covert attacker against the extended plant.

    It simulates its own copy of the attack-induced state with matrices drawn
    from the public laws (its own stream, not the realizations) and
    subtracts the predicted output.  The nominal block cancels exactly; the
    auxiliary block leaves a mismatch.
    """

    def __init__(self, model: ExtendedModel, spec: AttackSpec, nl=None):
        self.model = model
        self.spec = spec
        self.nl = nl
        s = spec.seed
        self.dists = (model.dist_Abar.with_stream(s, 101), model.dist_Btilde.with_stream(s, 102),
                      model.dist_Cbar.with_stream(s, 103))
        self.dist_G = None if nl is None else nl.dist_G.with_stream(s, 104)
        self.xa = np.zeros(model.N)

    def __call__(self, k, x_attacked=None):
        m = self.model
        p = m.base.p
        ua = self.spec.input_bias(k, p)
        if not self.spec.active(k) and not np.any(self.xa):
            return ua, np.zeros(m.M)
        dA, dB, dC = self.dists
        Abar = dA.draw(k, m.n_aux)
        Bt = dB.draw(k, m.n_aux)
        Cbar = dC.draw(k, m.m_aux)
        Acal, Bcal, Ccal = m.blocks(Realization(Abar, Bt, Cbar))
        d = -Ccal @ self.xa
        if self.nl is not None and x_attacked is not None:
            x = np.asarray(x_attacked)[m.n_aux:]
            G = self.dist_G.draw(k, m.base.n).T
            d[:m.m_aux] -= G @ (self.nl.h(x) - self.nl.h(x - self.xa[m.n_aux:]))
        self.xa = Acal @ self.xa + Bcal @ ua
        return ua, d


# -- residue bias maps ----------------------------------------------------------

@dataclass
class BiasMaps:
    """Maps phi = [u^a_j .. u^a_{k-1}, d^a_{j+1} .. d^a_k] to the residue bias at i."""
    j: int
    i: int
    k: int
    Mx: np.ndarray
    My: np.ndarray
    D: dict = field(default_factory=dict)     # t -> D_(t,i)
    Xi: dict = field(default_factory=dict)    # t -> Xi_(t,i)

    @property
    def M(self):
        return np.hstack([self.Mx, self.My])


def transition_product(Acal, Ccal, K, t0, i):
    """D_(t0,i) = A_{i-1}(I-K_{i-1}C_{i-1}) ... A_{t0+1}(I-K_{t0+1}C_{t0+1}); identity if i = t0+1."""
    N = Acal[t0].shape[0]
    D = np.eye(N)
    for t in range(t0 + 1, i):
        D = Acal[t] @ (np.eye(N) - K[t] @ Ccal[t]) @ D
    return D


def build_bias_maps(Acal, Bcal, Ccal, K, j, i, k=None):
    """Residue-bias blocks for residue time i of an attack starting at j.

    ``Acal``, ``Bcal``, ``Ccal``, ``K`` are indexable by absolute step.  The
    sensor block is signed so that the residue bias equals ``M @ phi`` for the
    convention y_received = y + d: direct term +I, propagated terms -Xi.
    """
    k = i if k is None else k
    if not j < i <= k:
        raise ValueError("window indices must satisfy j < i <= k")
    p = Bcal[j].shape[1]
    mo = Ccal[i].shape[0]
    Mx = np.zeros((mo, p * (k - j)))
    My = np.zeros((mo, mo * (k - j)))
    maps = BiasMaps(j, i, k, Mx, My)
    for t in range(j, i):
        D = transition_product(Acal, Ccal, K, t, i)
        maps.D[t] = D
        Mx[:, (t - j) * p:(t - j + 1) * p] = Ccal[i] @ D @ Bcal[t]
    for t in range(j + 1, i):
        Xi = Ccal[i] @ maps.D[t] @ Acal[t] @ K[t]
        maps.Xi[t] = Xi
        My[:, (t - j - 1) * mo:(t - j) * mo] = -Xi
    My[:, (i - j - 1) * mo:(i - j) * mo] = np.eye(mo)
    return maps


def stack_phi(ua_seq, d_seq):
    return np.concatenate([np.ravel(ua_seq), np.ravel(d_seq)])


# -- estimate tracking ------------------------------------------------------------

class AttackerEstimator:
    """Particle posterior over [x_A; x_hat] used to mimic the operator's estimate.

    mode "particle": matrices unknown, fresh draws per particle and step.
    mode "oracle": single particle propagated with the true realizations.
    """

    def __init__(self, model: ExtendedModel, x_prior0, P_prior0, spec: AttackSpec, nl=None,
                 cfg: Optional[ParticleFilterConfig] = None, know_output_map=True):
        self.model = model
        self.nl = nl
        self.spec = spec
        self.oracle = spec.mode == "oracle"
        self.cfg = cfg or ParticleFilterConfig(n_particles=1 if self.oracle else spec.n_particles)
        self.rng = np.random.default_rng(spec.seed)
        self.dyn = TrackingDynamics(model, nl)
        self.know = know_output_map
        L = self.cfg.n_particles
        x0 = np.asarray(x_prior0, float)
        if self.oracle:
            xa = x0[None, :]
        else:
            xa = ParticleCloud.gaussian(x0, P_prior0, L, self.rng).particles
        self.cloud = ParticleCloud(np.hstack([xa, np.tile(x0, (xa.shape[0], 1))]),
                                   np.full(xa.shape[0], 1.0 / xa.shape[0]))

    @property
    def weights(self):
        return self.cloud.weights

    def estimate(self):
        return self.cloud.mean()[self.model.N:]

    def condition(self, y_intercepted, Ccal):
        if not self.oracle:
            meas = TrackingMeasurement(self.model, Ccal, self.nl, self.know)
            pf_reweight(self.cloud, meas.loglik(self.cloud.particles, y_intercepted))

    def advance(self, k, u, ua, y_received, K, Ccal, real=None):
        if not self.oracle:
            pf_resample(self.cloud, self.cfg, self.rng)
        self.cloud.particles = self.dyn.propagate(self.cloud.particles, self.rng, k, u, ua, y_received, K, Ccal,
                                                  real=real if self.oracle else None,
                                                  process_noise=not self.oracle)


def tracking_bias(ae: AttackerEstimator, y_intercepted, Ccal):
    """Optimal sensor bias: E[C x_hat (+ [G h(x_hat); 0])] - y_intercepted."""
    m = ae.model
    xh = ae.cloud.particles[:, m.N:]
    pred = xh @ Ccal.T
    if ae.nl is not None:
        muG = np.tile(ae.nl.dist_G.mean[:, None], (1, m.base.n))
        pred[:, :m.m_aux] += ae.nl.h(xh[:, m.n_aux:]) @ muG.T
    return ae.cloud.weights @ pred - np.asarray(y_intercepted, float)


def estimate_tracking_step(ae: AttackerEstimator, y_intercepted, spec: AttackSpec, k, Ccal):
    """Condition on the intercepted output and return (d^a_k, u^a_k)."""
    ua = spec.input_bias(k, ae.model.base.p)
    if not spec.active(k):
        return np.zeros(ae.model.M), ua
    ae.condition(y_intercepted, Ccal)
    return tracking_bias(ae, y_intercepted, Ccal), ua


def write_attack_trace(path, ua, da):
    """CSV ``k, ua_1.., da_1..``."""
    ua = np.atleast_2d(np.asarray(ua, float))
    da = np.atleast_2d(np.asarray(da, float))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k"] + [f"ua_{i + 1}" for i in range(ua.shape[1])] + [f"da_{i + 1}" for i in range(da.shape[1])])
        for k in range(ua.shape[0]):
            wr.writerow([k] + [repr(float(v)) for v in ua[k]] + [repr(float(v)) for v in da[k]])

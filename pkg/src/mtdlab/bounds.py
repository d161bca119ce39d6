"""Particle filtering and the conditional posterior Cramer-Rao bound on how well
an attacker can track the operator's state estimate, plus the induced lower
bound on the expected chi-square statistic."""
import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model_core import ExtendedModel, psd_factor, symmetrize


@dataclass(frozen=True)
class ParticleFilterConfig:
    n_particles: int = 2000
    ess_fraction: float = 0.5
    jitter: float = 1e-9
    resampling: str = "systematic"

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.resampling not in ("systematic", "multinomial", "none"):
            raise ValueError(f"unknown resampling policy {self.resampling!r}")


@dataclass
class ParticleCloud:
    particles: np.ndarray   # (L, d)
    weights: np.ndarray     # (L,), sums to one

    @classmethod
    def gaussian(cls, mean, cov, n, rng):
        mean = np.asarray(mean, float)
        L = psd_factor(cov)
        X = mean + rng.standard_normal((n, mean.size)) @ L.T
        return cls(X, np.full(n, 1.0 / n))

    @property
    def ess(self):
        return 1.0 / float(np.sum(self.weights ** 2))

    def mean(self):
        return self.weights @ self.particles

    def cov(self, jitter=0.0):
        d = self.particles - self.mean()
        S = (d * self.weights[:, None]).T @ d
        return symmetrize(S) + jitter * np.eye(S.shape[0])


def systematic_resample(weights, rng):
    L = len(weights)
    positions = (rng.random() + np.arange(L)) / L
    cs = np.cumsum(weights)
    cs[-1] = 1.0
    return np.searchsorted(cs, positions)


def pf_reweight(cloud: ParticleCloud, loglik):
    """Multiply weights by the likelihoods (given in log form) and normalize."""
    logw = np.log(np.clip(cloud.weights, 1e-300, None)) + loglik
    top = np.max(logw)
    if not np.isfinite(top):
        warnings.warn("all particle weights vanished; resetting to uniform", RuntimeWarning, stacklevel=2)
        cloud.weights = np.full(len(cloud.weights), 1.0 / len(cloud.weights))
        return cloud
    w = np.exp(logw - top)
    cloud.weights = w / w.sum()
    return cloud


def pf_resample(cloud: ParticleCloud, cfg: ParticleFilterConfig, rng):
    L = len(cloud.weights)
    if cfg.resampling == "none" or L == 1 or cloud.ess >= cfg.ess_fraction * L:
        return cloud
    if cfg.resampling == "systematic":
        idx = systematic_resample(cloud.weights, rng)
    else:
        idx = rng.choice(L, size=L, p=cloud.weights)
    cloud.particles = cloud.particles[idx]
    cloud.weights = np.full(L, 1.0 / L)
    return cloud


def pf_step(cloud: ParticleCloud, y, measurement, propagate, cfg: ParticleFilterConfig, rng):
    """Weight by p(y_k | x_k), resample if needed, then draw x_{k+1} from the prior.

    On return the cloud holds predicted particles with the step-k weights,
    which is the input the bound recursion needs.
    """
    pf_reweight(cloud, measurement.loglik(cloud.particles, y))
    pf_resample(cloud, cfg, rng)
    cloud.particles = propagate(cloud.particles, rng)
    return cloud


# -- measurement models ---------------------------------------------------------

class GaussianMeasurement:
    """y ~ N(mu(x), Sigma(x)); subclasses provide moments and derivatives."""

    def moments(self, X):
        raise NotImplementedError

    def derivatives(self, X):
        """(dmu (L, m, d), dSigma (L, d, m, m) or None)."""
        raise NotImplementedError

    def loglik(self, X, y):
        mu, S = self.moments(X)
        r = np.asarray(y, float)[None, :] - mu
        if S.ndim == 2:
            cf = np.linalg.cholesky(S)
            v = np.linalg.solve(cf, r.T).T
            logdet = 2 * np.sum(np.log(np.diag(cf)))
            return -0.5 * np.sum(v * v, axis=1) - 0.5 * logdet
        cf = np.linalg.cholesky(S)
        v = np.linalg.solve(cf, r[..., None])[..., 0]
        logdet = 2 * np.sum(np.log(np.diagonal(cf, axis1=1, axis2=2)), axis=1)
        return -0.5 * np.sum(v * v, axis=1) - 0.5 * logdet

    def fisher(self, X):
        """Per-particle standard Fisher information J^S(x), shape (L, d, d)."""
        _, S = self.moments(X)
        dmu, dS = self.derivatives(X)
        L = X.shape[0]
        Si = np.linalg.inv(S)
        if Si.ndim == 2:
            Si = np.broadcast_to(Si, (L,) + Si.shape)
        J = np.einsum("lma,lmn,lnb->lab", dmu, Si, dmu)
        if dS is not None:
            T = np.einsum("lmn,lanp->lamp", Si, dS)
            J = J + 0.5 * np.einsum("lamp,lbpm->lab", T, T)
        return J


class LinearGaussianMeasurement(GaussianMeasurement):
    def __init__(self, H, R):
        self.H = np.atleast_2d(np.asarray(H, float))
        self.R = np.atleast_2d(np.asarray(R, float))

    def moments(self, X):
        return X @ self.H.T, self.R

    def derivatives(self, X):
        return np.broadcast_to(self.H, (X.shape[0],) + self.H.shape), None


class TrackingMeasurement(GaussianMeasurement):
    """Intercepted output as seen from the attacker's augmented state [x_A; x_hat].

    The output map is known when ``know_output_map`` (the strong adversary of
    the bound); otherwise C_bar rows are marginalized, which makes the
    covariance state dependent.  With a nonlinearity the unknown G is
    marginalized the same way.
    """

    def __init__(self, model: ExtendedModel, Ccal, nl=None, know_output_map=True):
        self.model = model
        self.nl = nl
        self.know = know_output_map
        if not know_output_map:
            Ccal = Ccal.copy()
            Ccal[:model.m_aux, model.n_aux:] = np.tile(model.dist_Cbar.mean, (model.m_aux, 1))
        self.Ccal = Ccal

    def _parts(self, X):
        m = self.model
        N = m.N
        return X[:, :N], X[:, m.n_aux:N]

    def moments(self, X):
        m = self.model
        xa, xp = self._parts(X)
        mu = xa @ self.Ccal.T
        S = m.R_full
        extra = None
        if self.nl is not None:
            hx = self.nl.h(xp)
            muG = np.tile(self.nl.dist_G.mean[:, None], (1, m.base.n))
            mu[:, :m.m_aux] += hx @ muG.T
            extra = np.einsum("l,ij->lij", np.sum(hx ** 2, axis=1), self.nl.dist_G.cov_at(0))
        if not self.know:
            q = np.einsum("li,ij,lj->l", xp, m.dist_Cbar.cov_at(0), xp)
            blk = np.einsum("l,ij->lij", q, np.eye(m.m_aux))
            extra = blk if extra is None else extra + blk
        if extra is None:
            return mu, S
        full = np.broadcast_to(S, (X.shape[0],) + S.shape).copy()
        full[:, :m.m_aux, :m.m_aux] += extra
        return mu, full

    def derivatives(self, X):
        m = self.model
        L, d = X.shape
        N = m.N
        xa, xp = self._parts(X)
        dmu = np.zeros((L, m.M, d))
        dmu[:, :, :N] = self.Ccal
        dS = None
        if self.nl is not None or not self.know:
            dS = np.zeros((L, d, m.M, m.M))
        if self.nl is not None:
            muG = np.tile(self.nl.dist_G.mean[:, None], (1, m.base.n))
            dh = self.nl.dh(xp)
            hx = self.nl.h(xp)
            dmu[:, :m.m_aux, m.n_aux:N] += muG[None] * dh[:, None, :]
            coef = 2 * hx * dh                                   # d/dx_a of sum h^2
            dS[:, m.n_aux:N, :m.m_aux, :m.m_aux] += coef[:, :, None, None] * self.nl.dist_G.cov_at(0)
        if not self.know:
            g = 2 * xp @ m.dist_Cbar.cov_at(0)
            dS[:, m.n_aux:N, :m.m_aux, :m.m_aux] += g[:, :, None, None] * np.eye(m.m_aux)
        return dmu, dS


# -- attacker-side augmented dynamics ---------------------------------------

class TrackingDynamics:
    """Propagates [x_A; x_hat] particles with fresh matrix draws per particle.

    x_A follows the attacked plant; x_hat replays the operator's filter on the
    received outputs using the known gain and output map of the step.
    """

    def __init__(self, model: ExtendedModel, nl=None):
        self.model = model
        self.nl = nl
        self.Lq = psd_factor(model.Q_full)

    def propagate(self, X, rng, k, u, ua, y_received, K, Ccal, real=None, process_noise=True):
        m = self.model
        b = m.base
        nt, mt, N = m.n_aux, m.m_aux, m.N
        L = X.shape[0]
        u = np.atleast_1d(np.asarray(u, float))
        ua = np.zeros_like(u) if ua is None else np.atleast_1d(np.asarray(ua, float))
        if real is None:
            Abar = m.dist_Abar.draw_batch(rng, k, L, nt)
            Bt = m.dist_Btilde.draw_batch(rng, k, L, nt)
            G = None if self.nl is None else np.swapaxes(self.nl.dist_G.draw_batch(rng, k, L, b.n), 1, 2)
        else:
            Abar = np.broadcast_to(real.Abar, (L,) + real.Abar.shape)
            Bt = np.broadcast_to(real.Btilde, (L,) + real.Btilde.shape)
            G = None if real.G is None else np.broadcast_to(real.G, (L,) + real.G.shape)
        xa, xh = X[:, :N], X[:, N:]

        pred = xh @ Ccal.T
        if self.nl is not None:
            pred[:, :mt] += np.einsum("lij,lj->li", G, self.nl.h(xh[:, nt:]))
        xh_post = xh + (np.asarray(y_received, float)[None, :] - pred) @ K.T

        def apply_A(Z):
            top = Z[:, :nt] @ m.A_tilde.T + np.einsum("lij,lj->li", Abar, Z[:, nt:])
            return np.hstack([top, Z[:, nt:] @ b.A.T])

        def apply_B(v):
            return np.hstack([Bt @ v, np.broadcast_to(b.B @ v, (L, b.n))])

        xh_next = apply_A(xh_post) + apply_B(u)
        xa_next = apply_A(xa) + apply_B(u + ua)
        if process_noise:
            xa_next = xa_next + rng.standard_normal((L, N)) @ self.Lq.T
        return np.hstack([xa_next, xh_next])


# -- bound ------------------------------------------------------------------

@dataclass
class CpcrlbResult:
    info: np.ndarray
    info_data: np.ndarray
    info_prior: np.ndarray
    Z: np.ndarray


def cpcrlb_step(cloud: ParticleCloud, measurement, cfg: ParticleFilterConfig, block=None):
    """Information of the next state from predicted particles (step-k weights).

    ``block`` selects the trailing coordinates whose error bound Z is kept;
    None keeps the full matrix.
    """
    J = measurement.fisher(cloud.particles)
    I_D = symmetrize(np.einsum("l,lab->ab", cloud.weights, J))
    Sigma = cloud.cov(cfg.jitter)
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("predicted particle covariance is singular; raise jitter") from exc
    I_P = symmetrize(np.linalg.inv(Sigma))
    info = I_D + I_P
    inv = symmetrize(np.linalg.inv(info))
    Z = inv if block is None else inv[-block:, -block:]
    return CpcrlbResult(info, I_D, I_P, symmetrize(Z))


def detection_bound(C_list, S_list, Z_list):
    """sum_i Tr(C_i' S_i^-1 C_i Z_i) over a window."""
    total = 0.0
    for C, S, Z in zip(C_list, S_list, Z_list):
        C = np.atleast_2d(C)
        total += float(np.trace(C.T @ np.linalg.solve(np.atleast_2d(S), C) @ np.atleast_2d(Z)))
    return max(total, 0.0)


@dataclass
class BoundTrace:
    steps: list = field(default_factory=list)
    Z: list = field(default_factory=list)
    info: list = field(default_factory=list)
    bound: list = field(default_factory=list)


@dataclass
class TrackingStep:
    """What the attacker sees/knows at one step of a recorded run."""
    y_intercepted: np.ndarray
    y_received: np.ndarray
    u: np.ndarray
    ua: np.ndarray
    K: np.ndarray
    Ccal: np.ndarray
    S: np.ndarray


def tracking_bound(model: ExtendedModel, steps, x_prior0, P_prior0, window, cfg: ParticleFilterConfig, rng,
                   nl=None, know_output_map=True, start_step=0):
    """Run the attacker particle filter over recorded steps and evaluate the bound.

    At onset the attacker knows the operator's prior estimate ``x_prior0``
    and believes the attacked state is N(x_prior0, P_prior0).
    """
    N = model.N
    dyn = TrackingDynamics(model, nl)
    L = cfg.n_particles
    xa = ParticleCloud.gaussian(x_prior0, P_prior0, L, rng).particles
    cloud = ParticleCloud(np.hstack([xa, np.tile(np.asarray(x_prior0, float), (L, 1))]), np.full(L, 1.0 / L))
    trace = BoundTrace()
    Z = [np.zeros((N, N))]
    for t, st in enumerate(steps):
        meas = TrackingMeasurement(model, st.Ccal, nl, know_output_map)
        pf_reweight(cloud, meas.loglik(cloud.particles, st.y_intercepted))
        pf_resample(cloud, cfg, rng)
        cloud.particles = dyn.propagate(cloud.particles, rng, start_step + t, st.u, st.ua, st.y_received,
                                        st.K, st.Ccal)
        if t + 1 < len(steps):
            nxt = TrackingMeasurement(model, steps[t + 1].Ccal, nl, know_output_map)
            res = cpcrlb_step(cloud, nxt, cfg, block=N)
            Z.append(res.Z)
            trace.info.append(res.info)
    for t, st in enumerate(steps):
        lo = max(0, t - window + 1)
        trace.bound.append(detection_bound([s.Ccal for s in steps[lo:t + 1]], [s.S for s in steps[lo:t + 1]],
                                           Z[lo:t + 1]))
        trace.steps.append(start_step + t)
    trace.Z = Z
    return trace


def write_bound_csv(path, steps, g_mean, bound):
    """CSV ``k, g_mean, bound``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "g_mean", "bound"])
        for k, g, b in zip(steps, g_mean, bound):
            wr.writerow([int(k), repr(float(g)), repr(float(b))])

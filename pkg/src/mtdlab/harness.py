"""Scenario configuration, LQG control, the quadruple-tank benchmark and the
Monte Carlo experiment runner."""
import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import design_opt as dopt
from .attacks import AttackerEstimator, AttackSpec, CovertSubtractAttacker, ZeroDynamicsAttacker, \
    estimate_tracking_step, write_attack_trace
from .bounds import ParticleFilterConfig, TrackingStep, tracking_bound, write_bound_csv
from .detection import DetectorState, chi2_update, threshold_for_far, write_detection_trace
from .estimation import FilterState, ekf_update, kf_predict, kf_update, write_filter_trace
from .information import attacker_fim, build_attacker_stacks, coupling_blocks, stacked_maps_for, write_fim_csv
from .model_core import DivergenceError, ExtendedModel, LTIModel, MatrixDistribution, NoiseStreams, \
    NonlinearitySpec, TrajectoryRecord, check_bounded, psd_factor, symmetrize

MTD_KINDS = ("none", "extended", "nonlinear", "hybrid")
DESIGN_SOURCES = ("optimal", "baseline", "explicit")


class ConfigError(ValueError):
    """Invalid scenario configuration (CLI exit code 2)."""


class ExperimentFailure(RuntimeError):
    """Too many diverged trials or an unusable design (CLI exit code 3)."""


# -- Riccati and LQG ----------------------------------------------------------------

def dare_solve(A, B, Q, R, tol=1e-10, max_iter=100000):
    """Iterate P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA to a fixed point.

    Returns (gain L with u = -L x, P).
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    if np.linalg.eigvalsh(symmetrize(R)).min() <= 0:
        raise ValueError("R must be positive definite")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        L = np.linalg.solve(R + BtP @ B, BtP @ A)
        with np.errstate(over="ignore", invalid="ignore"):
            P_new = symmetrize(Q + A.T @ P @ A - A.T @ P @ B @ L)
        if not np.all(np.isfinite(P_new)):
            raise np.linalg.LinAlgError("Riccati iteration diverged; check stabilizability")
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new))):
            P = P_new
            L = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return L, P
        P = P_new
    raise np.linalg.LinAlgError(f"Riccati iteration did not converge in {max_iter} steps")


def steady_kalman(A, C, Q, R):
    """Steady-state (gain, a priori covariance) via the dual Riccati equation."""
    _, P = dare_solve(np.atleast_2d(A).T, np.atleast_2d(C).T, Q, R)
    S = C @ P @ C.T + R
    return P @ C.T @ np.linalg.inv(S), P


@dataclass
class LqgController:
    L: np.ndarray
    Q_lqr: np.ndarray
    R_lqr: np.ndarray
    setpoint: Optional[np.ndarray] = None

    @classmethod
    def design(cls, A, B, Q_lqr=None, R_lqr=None):
        n, p = np.atleast_2d(B).shape
        Q_lqr = np.eye(n) if Q_lqr is None else np.atleast_2d(Q_lqr)
        R_lqr = np.eye(p) if R_lqr is None else np.atleast_2d(R_lqr)
        L, _ = dare_solve(A, B, Q_lqr, R_lqr)
        rho = max(abs(np.linalg.eigvals(A - B @ L)))
        if rho >= 1:
            raise np.linalg.LinAlgError(f"closed loop is not stable (spectral radius {rho:.4f})")
        return cls(L, Q_lqr, R_lqr)

    def __call__(self, x_hat):
        x = x_hat if self.setpoint is None else x_hat - self.setpoint
        return -self.L @ x


# -- benchmark matrices ---------------------------------------------------------------

def uniform_gram_covariance(dim, seed):
    """U U' / 100 with U uniform on [0, 1)."""
    if dim < 1:
        raise ValueError("dim must be positive")
    U = np.random.default_rng(seed).random((dim, dim))
    return U @ U.T / 100.0


def quadtank_matrices(dt=1.0):
    """Minimum-phase linearization of the four-tank process, zero-order hold at ``dt``."""
    Ar = np.array([28.0, 32.0, 28.0, 32.0])       # tank cross sections (cm^2)
    a = np.array([0.071, 0.057, 0.071, 0.057])    # outlet areas (cm^2)
    h0 = np.array([12.4, 12.7, 1.8, 1.4])         # operating levels (cm)
    kc, g, k1, k2, g1, g2 = 0.5, 981.0, 3.33, 3.35, 0.70, 0.60
    T = Ar / a * np.sqrt(2 * h0 / g)
    Ac = np.array([[-1 / T[0], 0, Ar[2] / (Ar[0] * T[2]), 0],
                   [0, -1 / T[1], 0, Ar[3] / (Ar[1] * T[3])],
                   [0, 0, -1 / T[2], 0],
                   [0, 0, 0, -1 / T[3]]])
    Bc = np.array([[g1 * k1 / Ar[0], 0], [0, g2 * k2 / Ar[1]], [0, (1 - g2) * k2 / Ar[2]], [(1 - g1) * k1 / Ar[3], 0]])
    C = np.array([[kc, 0, 0, 0], [0, kc, 0, 0]])
    n, p = Bc.shape
    E = expm(np.block([[Ac, Bc], [np.zeros((p, n + p))]]) * dt)
    return E[:n, :n], E[:n, n:], C


def sparse_normal(rng, shape, density=0.5):
    M = rng.standard_normal(shape)
    mask = np.zeros(M.size, bool)
    mask[rng.permutation(M.size)[:int(round(density * M.size))]] = True
    return M * mask.reshape(shape)


def random_aux_pair(n_aux, m_aux, seed, max_tries=10000):
    """Half-dense standard normal (A_tilde, C_tilde), resampled until A_tilde is stable."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        At = sparse_normal(rng, (n_aux, n_aux))
        if max(abs(np.linalg.eigvals(At))) < 1:
            Ct = sparse_normal(rng, (m_aux, n_aux))
            while not np.any(Ct):
                Ct = sparse_normal(rng, (m_aux, n_aux))
            return At, Ct
    raise RuntimeError("no stable auxiliary matrix found")


# -- configuration ---------------------------------------------------------------------

def _arr(v):
    return None if v is None else np.asarray(v, dtype=float)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    mtd: str = "extended"
    plant: dict = field(default_factory=dict)         # A, B, C, Q, R
    aux: dict = field(default_factory=dict)           # A_tilde, C_tilde, Q_tilde, R_full, means, power
    bounds: dict = field(default_factory=dict)        # N_B, Theta_A, Theta_C, M_G
    design: dict = field(default_factory=lambda: {"source": "optimal"})
    attack: dict = field(default_factory=lambda: {"kind": "none"})
    controller: dict = field(default_factory=dict)    # Q_lqr, R_lqr
    detector: dict = field(default_factory=lambda: {"window": 10, "false_alarm_rate": 1e-3})
    hybrid: dict = field(default_factory=dict)
    trials: int = 1000
    horizon: int = 400
    seed: int = 0
    dt: float = 1.0
    workers: int = 1
    out_dir: Optional[str] = None
    svg: bool = False

    def validate(self):
        if self.mtd not in MTD_KINDS:
            raise ConfigError(f"mtd must be one of {MTD_KINDS}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        src = self.design.get("source", "optimal")
        if src not in DESIGN_SOURCES:
            raise ConfigError(f"design source must be one of {DESIGN_SOURCES}")
        if src == "explicit" and "file" in self.design and not os.path.exists(self.design["file"]):
            raise ConfigError(f"design file {self.design['file']} does not exist")
        try:
            AttackSpec.from_dict(self.attack)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attack: {exc}") from exc
        if self.mtd == "hybrid":
            return self
        for key in ("A", "B", "C", "Q", "R"):
            if key not in self.plant:
                raise ConfigError(f"plant.{key} missing")
        if self.mtd in ("extended", "nonlinear"):
            for key in ("A_tilde", "C_tilde", "Q_tilde", "R_full"):
                if key not in self.aux:
                    raise ConfigError(f"aux.{key} missing")
        w = self.detector.get("window", 10)
        if w < 1:
            raise ConfigError("detector window must be >= 1")
        return self

    def to_json(self):
        return json.dumps(_jsonable(asdict(self)), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return ScenarioConfig(**d).validate()


def preset_quadtank(mtd="extended", seed=2017, dt=1.0):
    """Quadruple-tank benchmark with a 4-state, 2-sensor auxiliary subsystem."""
    A, B, C = quadtank_matrices(dt)
    n, p = B.shape
    m = C.shape[0]
    nt, mt = 4, 2
    At, Ct = random_aux_pair(nt, mt, seed)
    R_full = uniform_gram_covariance(m + mt, seed + 1)
    Q = uniform_gram_covariance(n, seed + 2)
    Qt = uniform_gram_covariance(nt, seed + 3)
    ones = lambda d: np.ones((d, d)) + 0.5 * np.eye(d)
    return ScenarioConfig(
        name=f"quadtank-{mtd}", mtd=mtd,
        plant={"A": A, "B": B, "C": C, "Q": Q, "R": R_full[mt:, mt:]},
        aux={"A_tilde": At, "C_tilde": Ct, "Q_tilde": Qt, "R_full": R_full,
             "mu_A": np.ones(n), "mu_B": np.zeros(p), "mu_C": np.ones(n), "mu_G": np.zeros(mt), "power": 2},
        bounds={"N_B": ones(p), "Theta_A": ones(n), "Theta_C": ones(n), "M_G": ones(mt)},
        design={"source": "optimal"},
        attack={"kind": "none"},
        detector={"window": 10, "false_alarm_rate": 1e-3},
        trials=1000, horizon=400, seed=0, dt=dt,
    ).validate()


# -- assembled scenario ----------------------------------------------------------------

@dataclass
class Setup:
    """Everything a trial needs; built once per experiment and shipped to workers."""
    base: LTIModel
    model: Optional[ExtendedModel]
    nl: Optional[NonlinearitySpec]
    ctrl: LqgController
    attack: AttackSpec
    window: int
    threshold: float
    horizon: int
    P0: np.ndarray                 # initial state/prior covariance
    K_mean: Optional[np.ndarray]   # steady gain of the mean model (attacker side)
    Ccal_mean: Optional[np.ndarray]
    design: dict
    record_steps: bool = False


def base_model(cfg: ScenarioConfig):
    p = cfg.plant
    return LTIModel(_arr(p["A"]), _arr(p["B"]), _arr(p["C"]), _arr(p["Q"]), _arr(p["R"]))


def mean_model(cfg: ScenarioConfig, base=None, covs=None):
    """Extended model whose distributions carry the given covariances (zeros by default)."""
    base = base_model(cfg) if base is None else base
    ax = cfg.aux
    n, p = base.n, base.p
    covs = covs or {}
    mu_A = _arr(ax.get("mu_A", np.ones(n)))
    mu_B = _arr(ax.get("mu_B", np.zeros(p)))
    mu_C = _arr(ax.get("mu_C", np.ones(n)))
    return ExtendedModel(
        base, _arr(ax["A_tilde"]), _arr(ax["C_tilde"]),
        MatrixDistribution(mu_A, covs.get("Sigma_A", np.zeros((n, n))), stream=1),
        MatrixDistribution(mu_B, covs.get("Sigma_B", np.zeros((p, p))), stream=2),
        MatrixDistribution(mu_C, covs.get("Sigma_C", np.zeros((n, n))), stream=3),
        _arr(ax["Q_tilde"]), _arr(ax["R_full"]))


def nonlinearity_for(cfg, Sigma_G):
    mt = np.atleast_2d(cfg.aux["C_tilde"]).shape[0]
    mu_G = _arr(cfg.aux.get("mu_G", np.zeros(mt)))
    return NonlinearitySpec(MatrixDistribution(mu_G, Sigma_G, axis="columns", stream=4),
                            kind="power", c=int(cfg.aux.get("power", 2)))


def design_bounds(cfg, n, p, mt, T):
    ref = dopt.DesignBounds.reference(p, n, mt, T)
    b = cfg.bounds
    return dopt.DesignBounds(
        N_B=_arr(b.get("N_B", ref.N_B)), N_t=[_arr(x) for x in b.get("N_t", ref.N_t)],
        Theta_A=_arr(b.get("Theta_A", ref.Theta_A)), Theta_C=_arr(b.get("Theta_C", ref.Theta_C)),
        Theta_i=[_arr(x) for x in b.get("Theta_i", ref.Theta_i)], M_G=_arr(b.get("M_G", ref.M_G)))


def design_problems(cfg: ScenarioConfig):
    """The three design programs for the configured plant (time-invariant actuator design)."""
    base = base_model(cfg)
    mm = mean_model(cfg, base)
    T = int(cfg.detector.get("window", 10))
    bounds = design_bounds(cfg, base.n, base.p, mm.m_aux, T)
    Acal, Bcal, Ccal = mm.blocks(mm.mean_realization())
    K, P = steady_kalman(Acal, Ccal, mm.Q_full, mm.R_full)
    Sigma = symmetrize(Ccal @ P @ Ccal.T + mm.R_full)
    terms = dopt.actuator_terms_steady(Acal, Ccal, K, Sigma, base.B, mm.n_aux, T)
    lag_terms = [terms[:T - t] for t in range(T)]
    mu_B = mm.dist_Btilde.mean
    cb = coupling_blocks(stacked_maps_for(mm, T))
    ax = cfg.aux
    mu_G = _arr(ax.get("mu_G", np.zeros(mm.m_aux)))
    return {
        "actuator": dopt.build_actuator_design(lag_terms, mu_B, bounds),
        "coupling": dopt.build_coupling_design(cb, mm.dist_Abar.mean, mm.dist_Cbar.mean, bounds),
        "nonlinearity": dopt.build_nonlinearity_design(cb.S, mu_G, bounds),
        "_blocks": cb, "_bounds": bounds, "_mean_model": mm,
    }


def solve_designs(cfg: ScenarioConfig, source=None):
    """Covariances for the configured design source; returns a dict of matrices
    plus the objective values."""
    source = source or cfg.design.get("source", "optimal")
    if source == "explicit":
        d = dict(cfg.design)
        if "file" in d:
            sol = dopt.DesignSolution.load(d["file"])
            d.update(sol.values)
        out = {k: _arr(d[k]) for k in ("Sigma_A", "Sigma_B", "Sigma_C", "Sigma_G") if k in d}
        base = base_model(cfg)
        mt = np.atleast_2d(cfg.aux.get("C_tilde", np.zeros((1, 1)))).shape[0]
        out.setdefault("Sigma_A", np.zeros((base.n, base.n)))
        out.setdefault("Sigma_B", np.zeros((base.p, base.p)))
        out.setdefault("Sigma_C", np.zeros((base.n, base.n)))
        out.setdefault("Sigma_G", np.zeros((mt, mt)))
        return out
    probs = design_problems(cfg)
    try:
        act = dopt.solve_sdp(probs["actuator"])
        cou = dopt.solve_sdp(probs["coupling"])
        nlin = dopt.solve_sdp(probs["nonlinearity"])
    except (dopt.SdpInfeasible, dopt.SdpUnbounded, dopt.SdpNumericalError) as exc:
        raise ExperimentFailure(f"design failed: {exc}") from exc
    out = {"Sigma_B": act.values["Sigma_B"], "Sigma_A": cou.values["Sigma_A"], "Sigma_C": cou.values["Sigma_C"],
           "Sigma_G": nlin.values["Sigma_G"], "eps": act.objective, "gamma": cou.objective, "beta": nlin.objective}
    if source == "baseline":
        mm = probs["_mean_model"]
        base_c = dopt.baseline_iid_coupling(probs["_blocks"], mm.dist_Abar.mean, mm.dist_Cbar.mean,
                                            probs["_bounds"], cou.objective, raise_on_failure=False)
        if base_c.status not in ("optimal", "optimal_inaccurate"):
            raise ExperimentFailure(f"baseline coupling design is {base_c.status}")
        phi = dopt.baseline_iid_nonlinearity(probs["_bounds"].M_G)
        out.update(Sigma_A=base_c.values["Sigma_A"], Sigma_C=base_c.values["Sigma_C"],
                   Sigma_G=phi * np.eye(out["Sigma_G"].shape[0]), xi1=base_c.values["xi1"],
                   xi2=base_c.values["xi2"], phi=phi)
    return out


def build_setup(cfg: ScenarioConfig, design=None, record_steps=False):
    cfg.validate()
    base = base_model(cfg)
    T = int(cfg.detector.get("window", 10))
    far = float(cfg.detector.get("false_alarm_rate", 1e-3))
    attack = AttackSpec.from_dict(cfg.attack)
    ctrl = LqgController.design(base.A, base.B, _arr(cfg.controller.get("Q_lqr")), _arr(cfg.controller.get("R_lqr")))
    if cfg.mtd == "none":
        _, P = steady_kalman(base.A, base.C, base.Q, base.R)
        return Setup(base, None, None, ctrl, attack, T, threshold_for_far(T * base.m, far), cfg.horizon, P,
                     None, None, {}, record_steps)
    design = solve_designs(cfg) if design is None else design
    model = mean_model(cfg, base, design)
    nl = nonlinearity_for(cfg, design["Sigma_G"]) if cfg.mtd == "nonlinear" else None
    Acal, _, Ccal = model.blocks(model.mean_realization(nl))
    K, P = steady_kalman(Acal, Ccal, model.Q_full, model.R_full)
    return Setup(base, model, nl, ctrl, attack, T, threshold_for_far(T * model.M, far), cfg.horizon, P,
                 K, Ccal, design, record_steps)


# -- trials ------------------------------------------------------------------------------

def trial_seed(master, index):
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0] >> 1)


def _trial_model(st: Setup, seed):
    m = st.model
    model = m.with_distributions(dist_Abar=m.dist_Abar.with_stream(seed, 1),
                                 dist_Btilde=m.dist_Btilde.with_stream(seed, 2),
                                 dist_Cbar=m.dist_Cbar.with_stream(seed, 3))
    nl = None
    if st.nl is not None:
        from dataclasses import replace
        nl = replace(st.nl, dist_G=st.nl.dist_G.with_stream(seed, 4))
    return model, nl


def run_trial_lti(st: Setup, seed, record=None):
    """Plain LTI plant with a Kalman filter (no moving target)."""
    b = st.base
    noise = NoiseStreams(seed, b.Q, b.R)
    x = psd_factor(st.P0) @ np.random.default_rng([seed, 99]).standard_normal(b.n)
    fs = FilterState.initial(b.n, st.P0)
    det = DetectorState(st.window, st.threshold)
    zd = ZeroDynamicsAttacker(b.A, b.B, b.C, st.attack) if st.attack.kind in ("zero_dynamics", "covert_subtract") \
        else None
    g = np.zeros(st.horizon)
    alarm = np.zeros(st.horizon, bool)
    dev = np.zeros(st.horizon)
    for k in range(st.horizon):
        v = noise.sensor()
        y = b.C @ x + v
        if zd is not None:
            ua, d = zd(k)
        else:
            ua, d = st.attack.input_bias(k, b.p), np.zeros(b.m)
        y_rec = y + d
        fs = kf_update(fs, b.C, b.R, y_rec)
        g[k], alarm[k] = chi2_update(det, fs.z, fs.S)
        u = st.ctrl(fs.x_post)
        dev[k] = np.mean(np.abs(x))
        if record is not None:
            record["traj"].append(x, u, y_rec, y, ua, d)
            record["filter"].append(fs)
        x = b.A @ x + b.B @ (u + ua) + noise.process()
        check_bounded(k, state=x)
        fs = kf_predict(fs, b.A, b.B, b.Q, u)
    return {"g": g, "alarm": alarm, "dev": dev}


def run_trial_extended(st: Setup, seed, record=None):
    """Extended (or nonlinear) moving target with the configured attack."""
    model, nl = _trial_model(st, seed)
    b = model.base
    nt, mt = model.n_aux, model.m_aux
    noise = NoiseStreams(seed, b.Q, b.R, model.Q_tilde, model.R_full)
    Qf, Rf = model.Q_full, model.R_full
    x = psd_factor(st.P0) @ np.random.default_rng([seed, 99]).standard_normal(model.N)
    fs = FilterState.initial(model.N, st.P0)
    det = DetectorState(st.window, st.threshold)
    spec = st.attack
    atk_seed = trial_seed(seed, 7)
    covert = zd = ae = None
    if spec.kind == "covert_subtract":
        covert = CovertSubtractAttacker(model, AttackSpec.from_dict({**spec.to_dict(), "seed": atk_seed}), nl)
    elif spec.kind == "zero_dynamics":
        Am, Bm, Cm = model.blocks(model.mean_realization())
        zd = ZeroDynamicsAttacker(Am, Bm, Cm, spec)
    g = np.zeros(st.horizon)
    alarm = np.zeros(st.horizon, bool)
    dev = np.zeros(st.horizon)
    steps, onset = [], None
    xA, uA = [], []
    for k in range(st.horizon):
        real = model.realize(k, nl)
        Acal, Bcal, Ccal = model.blocks(real)
        v = noise.sensor()
        y = Ccal @ x + v
        if nl is not None:
            y[:mt] += real.G @ nl.h(x[nt:])
        if spec.kind == "estimate_tracking" and spec.active(k) and ae is None:
            ae = AttackerEstimator(model, fs.x_prior, fs.P_prior,
                                   AttackSpec.from_dict({**spec.to_dict(), "seed": atk_seed}), nl,
                                   know_output_map=spec.mode == "oracle")
        if covert is not None:
            ua, d = covert(k, x)
        elif zd is not None:
            ua, d = zd(k)
        elif ae is not None:
            Cuse = Ccal if spec.mode == "oracle" else st.Ccal_mean
            d, ua = estimate_tracking_step(ae, y, spec, k, Cuse)
        else:
            ua, d = spec.input_bias(k, b.p), np.zeros(model.M)
        y_rec = y + d
        if st.record_steps and spec.active(k) and onset is None:
            onset = (k, fs.x_prior.copy(), fs.P_prior.copy())
        if nl is None:
            fs = kf_update(fs, Ccal, Rf, y_rec)
        else:
            fs = ekf_update(fs, Ccal, Rf, y_rec, nl, real.G, nt, mt)
        g[k], alarm[k] = chi2_update(det, fs.z, fs.S)
        u = st.ctrl(fs.x_post[nt:])
        dev[k] = np.mean(np.abs(x[nt:]))
        if st.record_steps and onset is not None:
            steps.append(TrackingStep(y, y_rec, u, ua, fs.K, Ccal, fs.S))
        xA.append(x[nt:].copy())
        uA.append(u + ua)
        if record is not None:
            record["traj"].append(x, u, y_rec, y, ua, d, real=real)
            record["filter"].append(fs)
        if ae is not None:
            K_use = fs.K if spec.mode == "oracle" else st.K_mean
            ae.advance(k, u, ua, y_rec, K_use, Ccal if spec.mode == "oracle" else st.Ccal_mean, real)
        x = Acal @ x + Bcal @ (u + ua) + noise.process()
        check_bounded(k, state=x)
        fs = kf_predict(fs, Acal, Bcal, Qf, u)
    out = {"g": g, "alarm": alarm, "dev": dev, "xA": np.array(xA), "uA": np.array(uA)}
    if st.record_steps:
        out["steps"], out["onset"] = steps, onset
    return out


def run_trial(st: Setup, seed, record=None):
    if st.model is None:
        return run_trial_lti(st, seed, record)
    return run_trial_extended(st, seed, record)


def _trial_worker(args):
    st, seed = args
    try:
        return run_trial(st, seed)
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return {"diverged": str(exc)}


# -- experiment ------------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    g_mean: np.ndarray
    alarm_rate: np.ndarray
    deviation: np.ndarray
    threshold: float
    n_trials: int
    n_diverged: int
    g_trials: Optional[np.ndarray] = None     # (completed trials, horizon)
    design: dict = field(default_factory=dict)
    extras: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k", "g_mean", "alarm_rate", "deviation"])
            for k in range(len(self.g_mean)):
                wr.writerow([k, repr(float(self.g_mean[k])), repr(float(self.alarm_rate[k])),
                             repr(float(self.deviation[k]))])


def run_experiment(cfg: ScenarioConfig, setup: Optional[Setup] = None, keep_trials=False, keep_extras=False,
                   trial_offset=0):
    """Run ``cfg.trials`` independent trials and aggregate per-step cross-trial means.

    Trial i uses a seed derived from (cfg.seed, i); results are reduced in
    trial order so output does not depend on the worker count.
    """
    cfg.validate()
    if cfg.mtd == "hybrid":
        raise ConfigError("use run_identification for the switched plant")
    st = build_setup(cfg) if setup is None else setup
    seeds = [trial_seed(cfg.seed, trial_offset + i) for i in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_trial_worker, [(st, s) for s in seeds], chunksize=max(1, cfg.trials // (4 * cfg.workers))))
    else:
        results = [_trial_worker((st, s)) for s in seeds]
    ok = [r for r in results if "diverged" not in r]
    n_div = len(results) - len(ok)
    if n_div > 0.05 * len(results):
        raise ExperimentFailure(f"{n_div} of {len(results)} trials diverged")
    if not ok:
        raise ExperimentFailure("no trial completed")
    G = np.array([r["g"] for r in ok])
    res = ExperimentResult(G.mean(axis=0), np.mean([r["alarm"] for r in ok], axis=0),
                           np.mean([r["dev"] for r in ok], axis=0), st.threshold, len(ok), n_div,
                           G if keep_trials else None,
                           {k: v for k, v in st.design.items()})
    if keep_extras:
        res.extras = ok
    if cfg.out_dir:
        write_outputs(cfg, st, res)
    return res


def write_outputs(cfg, st, res):
    os.makedirs(cfg.out_dir, exist_ok=True)
    res.write_csv(os.path.join(cfg.out_dir, "metrics.csv"))
    rec = {"traj": TrajectoryRecord(), "filter": []}
    run_trial(st, trial_seed(cfg.seed, 0), rec)
    n_aux = 0 if st.model is None else st.model.n_aux
    m_aux = 0 if st.model is None else st.model.m_aux
    rec["traj"].write_csv(os.path.join(cfg.out_dir, "trajectory_trial0.csv"), st.base.n, n_aux, m_aux)
    write_filter_trace(os.path.join(cfg.out_dir, "filter_trial0.csv"), rec["filter"])
    det = DetectorState(st.window, st.threshold)
    gs, al = [], []
    for f in rec["filter"]:
        gk, ak = chi2_update(det, f.z, f.S)
        gs.append(gk)
        al.append(ak)
    write_detection_trace(os.path.join(cfg.out_dir, "detection_trial0.csv"), gs, st.threshold, al)
    tr = rec["traj"]
    p = st.base.p
    M = len(tr.y_received[0])
    write_attack_trace(os.path.join(cfg.out_dir, "attack_trial0.csv"),
                       [a if a is not None else np.zeros(p) for a in tr.ua],
                       [d if d is not None else np.zeros(M) for d in tr.da])
    with open(os.path.join(cfg.out_dir, "design.json"), "w") as fh:
        json.dump(_jsonable(res.design), fh, indent=2)
    if cfg.svg:
        write_svg(os.path.join(cfg.out_dir, "g_mean.svg"), res.g_mean, "mean chi-square statistic", res.threshold)
        write_svg(os.path.join(cfg.out_dir, "deviation.svg"), res.deviation, "mean |tank deviation|")


def write_svg(path, series, title, hline=None):
    """Static line chart; needs matplotlib (optional dependency)."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(series)), series, lw=1)
    if hline is not None:
        ax.axhline(hline, color="k", ls="--", lw=0.8)
    ax.set_xlabel("k")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


# -- bound and information experiments ----------------------------------------------------

def bound_experiment(cfg: ScenarioConfig, n_particles=2000, bound_trials=1, setup=None, result=None):
    """Mean statistic of the configured attack and the tracking lower bound.

    The bound is evaluated on the recorded run of the first ``bound_trials``
    trials (averaged) from attack onset onward.
    """
    st = build_setup(cfg, record_steps=True) if setup is None else setup
    st.record_steps = True
    if st.model is None:
        raise ConfigError("the tracking bound needs the extended plant")
    res = run_experiment(cfg, st) if result is None else result
    bounds = []
    for i in range(bound_trials):
        seed = trial_seed(cfg.seed, i)
        out = run_trial(st, seed)
        k0, xp, Pp = out["onset"]
        model, nl = _trial_model(st, seed)
        tr = tracking_bound(model, out["steps"], xp, Pp, st.window,
                            ParticleFilterConfig(n_particles=n_particles), np.random.default_rng([seed, 5]),
                            nl=nl, know_output_map=True, start_step=k0)
        bounds.append(tr.bound)
    bound = np.mean(bounds, axis=0)
    steps = np.arange(k0, k0 + len(bound))
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_bound_csv(os.path.join(cfg.out_dir, "bound.csv"), steps, res.g_mean[steps], bound)
    return steps, res.g_mean[steps], bound, res


def fim_experiment(cfg: ScenarioConfig, powers=(1, 2, 3), end_step=None, setup=None, Sigma_G_scale=1.0):
    """Attacker information about the matrices on one recorded attacked trajectory.

    Uses the last ``window`` steps ending at ``end_step`` (default: end of run).
    Returns rows (c, norm_I_NL, norm_I_L, norm_delta, psd_ok, min_eig_delta).
    """
    st = build_setup(cfg.replace(mtd="extended")) if setup is None else setup
    out = run_trial(st, trial_seed(cfg.seed, 0))
    T = st.window
    end = (st.horizon if end_step is None else end_step)
    xA, uA = out["xA"][end - T:end], out["uA"][end - T:end]
    sm = stacked_maps_for(st.model, T)
    d = st.design
    mt = st.model.m_aux
    mu_G = _arr(cfg.aux.get("mu_G", np.zeros(mt)))
    rows = []
    for c in powers:
        nl = NonlinearitySpec(MatrixDistribution(mu_G, d["Sigma_G"] * Sigma_G_scale, axis="columns"), c=int(c))
        stacks = build_attacker_stacks(sm, xA, uA, d["Sigma_A"], d["Sigma_B"], d["Sigma_C"], nl)
        I_NL, I_L, delta = attacker_fim(stacks, d["Sigma_G"] * Sigma_G_scale)
        lo = float(np.linalg.eigvalsh(delta).min())
        rows.append((c, np.linalg.norm(I_NL, 2), np.linalg.norm(I_L, 2), np.linalg.norm(delta, 2),
                     lo >= -1e-9, lo))
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_fim_csv(os.path.join(cfg.out_dir, "fim.csv"), [r[:5] for r in rows])
    return rows, xA


# -- switched plant ---------------------------------------------------------------------------

def hybrid_scenario(cfg: ScenarioConfig, schedule_seed=0):
    """HybridScenario from ``cfg.hybrid``: either {"preset": "three_sensor"} or explicit modes."""
    from .hybrid_mtd import HybridScenario, recommended_three_sensor
    from .model_core import HybridModeSet
    hy = dict(cfg.hybrid or {"preset": "three_sensor"})
    if hy.get("preset", None) == "three_sensor" or "modes" not in hy:
        sc = recommended_three_sensor(hy.get("dwell"), schedule_seed)
    else:
        try:
            modes = HybridModeSet(tuple((_arr(md["A"]), _arr(md.get("B", np.zeros((len(md["A"]), 0)))), _arr(md["C"]))
                                        for md in hy["modes"]), dwell=int(hy.get("dwell", 1)),
                                  schedule_seed=schedule_seed)
            sc = HybridScenario(modes, _arr(hy["Q"]), _arr(hy["R"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"hybrid modes: {exc}") from exc
    spec = AttackSpec.from_dict(cfg.attack)
    sc.horizon = int(hy.get("horizon", cfg.horizon))
    sc.window = int(hy.get("window", cfg.detector.get("window", sc.window)))
    sc.false_alarm_rate = float(hy.get("false_alarm_rate", sc.false_alarm_rate))
    sc.exclude_after = int(hy.get("exclude_after", sc.exclude_after))
    if spec.kind != "none":
        sc.attack_start, sc.attack_stop, sc.bias = spec.start_step, spec.stop_step, spec.sensor_bias
    return sc, (spec.sensors if spec.kind != "none" else ())


def _hybrid_worker(args):
    cfg, i = args
    seed = trial_seed(cfg.seed, i)
    sc, sensors = hybrid_scenario(cfg, schedule_seed=trial_seed(seed, 3))
    from .hybrid_mtd import identify_run
    try:
        return sorted(identify_run(sc, sensors, seed))
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError):
        return None


def run_identification(cfg: ScenarioConfig):
    """Per-trial flagged sensor sets plus summary rates for the switched plant.

    Returns dict(flagged=list of lists, exact_rate, false_rate, n_diverged).
    """
    cfg.validate()
    _, sensors = hybrid_scenario(cfg)
    args = [(cfg, i) for i in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            flagged = list(pool.map(_hybrid_worker, args))
    else:
        flagged = [_hybrid_worker(a) for a in args]
    done = [f for f in flagged if f is not None]
    n_div = len(flagged) - len(done)
    if n_div > 0.05 * len(flagged):
        raise ExperimentFailure(f"{n_div} of {len(flagged)} trials diverged")
    target = sorted(sensors)
    exact = float(np.mean([f == target for f in done]))
    false = float(np.mean([bool(set(f) - set(target)) for f in done]))
    out = {"flagged": flagged, "exact_rate": exact, "false_rate": false, "n_diverged": n_div, "sensors": target}
    if cfg.out_dir:
        from .hybrid_mtd import identify_run, write_identification_csv
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "identification.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["trial", "flagged"])
            for i, f in enumerate(flagged):
                wr.writerow([i, "diverged" if f is None else " ".join(str(s + 1) for s in f)])
        seed = trial_seed(cfg.seed, 0)
        sc, sensors = hybrid_scenario(cfg, schedule_seed=trial_seed(seed, 3))
        rows = []
        identify_run(sc, sensors, seed, record=rows)
        write_identification_csv(os.path.join(cfg.out_dir, "identification_trial0.csv"), rows, sc.modes.m)
    return out

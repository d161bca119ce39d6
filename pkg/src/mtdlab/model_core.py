"""Plant models, seeded time-varying matrix streams and one-step simulation.

State ordering for the extended plant is ``[x_tilde; x]`` and output ordering
is ``[y_tilde; y]``: auxiliary blocks first, nominal plant last.
"""
import csv
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import block_diag

DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """Raised when a simulated quantity leaves the finite/bounded range."""


def check_bounded(k, **arrays):
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.size and (not np.all(np.isfinite(a)) or np.max(np.abs(a)) > DIVERGENCE_LIMIT):
            raise DivergenceError(f"{name} diverged at step {k} (max |.| = {np.max(np.abs(a)):.3g})")


def as_matrix(a, rows=None, cols=None, name="matrix"):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and a.shape[0] != rows:
        raise ValueError(f"{name}: expected {rows} rows, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"{name}: expected {cols} columns, got shape {a.shape}")
    return a


def symmetrize(M):
    return 0.5 * (M + M.T)


def is_psd(M, tol=1e-9):
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return True
    if not np.allclose(M, M.T, atol=1e-10 * max(1.0, np.abs(M).max())):
        return False
    return np.linalg.eigvalsh(symmetrize(M)).min() >= -tol * max(1.0, np.abs(M).max())


def psd_factor(S):
    """Square factor L with L @ L.T == S; works for singular PSD S."""
    S = symmetrize(np.asarray(S, dtype=float))
    if S.size == 0:
        return S.copy()
    w, V = np.linalg.eigh(S)
    if w.min() < -1e-9 * max(1.0, abs(w).max()):
        raise ValueError("covariance is not positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


def observability_matrix(A, C, depth=None):
    A = np.atleast_2d(A)
    C = np.atleast_2d(C)
    depth = A.shape[0] if depth is None else depth
    rows, M = [], C
    for _ in range(depth):
        rows.append(M)
        M = M @ A
    return np.vstack(rows)


def numerical_rank(M, tol=None):
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if tol is None:
        tol = max(M.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    return int(np.sum(s > tol))


# -- seeded streams -----------------------------------------------------------

def counter_generator(seed, stream, k):
    """Generator for step ``k`` of a named stream.

    Counter-based (Philox) so any step can be regenerated without replaying
    the earlier ones.  This is the single substitution point for a
    cryptographically secure generator.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, int(k), 0, 0]))


@dataclass(frozen=True)
class MatrixDistribution:
    """IID Gaussian rows (or columns) with mean ``mean`` and covariance ``cov``.

    ``cov`` may be a single matrix or a stack ``(K, d, d)`` indexed by step
    (the last entry is reused past the end).
    """
    mean: np.ndarray
    cov: np.ndarray
    axis: str = "rows"
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        d = mean.shape[0]
        if cov.ndim == 2:
            cov = as_matrix(cov, d, d, "cov")
            factors = psd_factor(cov)
        elif cov.ndim == 3 and cov.shape[1:] == (d, d):
            factors = np.stack([psd_factor(c) for c in cov])
        else:
            raise ValueError(f"cov shape {cov.shape} inconsistent with mean of length {d}")
        if self.axis not in ("rows", "columns"):
            raise ValueError("axis must be 'rows' or 'columns'")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factors", factors)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def time_varying(self):
        return self.cov.ndim == 3

    def cov_at(self, k):
        if self.cov.ndim == 2:
            return self.cov
        return self.cov[min(k, self.cov.shape[0] - 1)]

    def factor_at(self, k):
        if self.cov.ndim == 2:
            return self._factors
        return self._factors[min(k, self._factors.shape[0] - 1)]

    def with_cov(self, cov):
        return replace(self, cov=cov)

    def with_stream(self, seed, stream=None):
        return replace(self, seed=seed, stream=self.stream if stream is None else stream)

    def draw(self, k, count):
        """``count`` IID vectors for step k, shape (count, d)."""
        z = counter_generator(self.seed, self.stream, k).standard_normal((count, self.dim))
        return self.mean + z @ self.factor_at(k).T

    def draw_batch(self, rng, k, batch, count):
        """Independent draws from an external generator, shape (batch, count, d)."""
        z = rng.standard_normal((batch, count, self.dim))
        return self.mean + z @ self.factor_at(k).T


def sample_time_varying(dist: MatrixDistribution, shape, k):
    """Realized matrix at step k with IID rows (or columns) from ``dist``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    r, c = shape
    if dist.axis == "rows":
        if c != dist.dim:
            raise ValueError(f"row length {c} does not match distribution dimension {dist.dim}")
        return dist.draw(k, r)
    if r != dist.dim:
        raise ValueError(f"column length {r} does not match distribution dimension {dist.dim}")
    return dist.draw(k, c).T


# -- plant models ---------------------------------------------------------------

def _stabilizable(A, B, tol=1e-9):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1 - tol:
            if np.linalg.matrix_rank(np.hstack([A - lam * np.eye(n), B]), tol=1e-8) < n:
                return False
    return True


@dataclass(frozen=True)
class LTIModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    check: bool = True

    def __post_init__(self):
        A = as_matrix(self.A, name="A")
        n = A.shape[0]
        A = as_matrix(A, n, n, "A")
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(n, -1) if B.size else np.zeros((n, 0))
        C = as_matrix(self.C, cols=n, name="C")
        m = C.shape[0]
        Q = as_matrix(self.Q, n, n, "Q")
        R = as_matrix(self.R, m, m, "R")
        if not is_psd(Q):
            raise ValueError("Q must be symmetric PSD")
        if not is_psd(R) or np.linalg.eigvalsh(symmetrize(R)).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        for name, val in zip("ABCQR", (A, B, C, Q, R)):
            object.__setattr__(self, name, val)
        if self.check:
            if not _stabilizable(A.T, C.T):
                warnings.warn("(A, C) is not detectable", stacklevel=3)
            if B.shape[1] and not _stabilizable(A, B):
                warnings.warn("(A, B) is not stabilizable", stacklevel=3)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    @property
    def m(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class HybridModeSet:
    """Switched plant: mode triples, dwell time and schedule seed."""
    modes: tuple
    dwell: int = 1
    schedule_seed: Optional[int] = 0
    schedule_stream: int = 7

    def __post_init__(self):
        if len(self.modes) == 0:
            raise ValueError("empty mode set")
        modes = []
        n = None
        for i, mode in enumerate(self.modes):
            A, B, C = mode
            A = as_matrix(A, name=f"A({i})")
            n = A.shape[0] if n is None else n
            A = as_matrix(A, n, n, f"A({i})")
            B = np.asarray(B, dtype=float)
            B = B.reshape(n, -1) if B.size else np.zeros((n, 0))
            C = as_matrix(C, cols=n, name=f"C({i})")
            modes.append((A, B, C))
        if len({m[2].shape[0] for m in modes}) != 1 or len({m[1].shape[1] for m in modes}) != 1:
            raise ValueError("modes disagree on input/output dimensions")
        if self.dwell < 1:
            raise ValueError("dwell must be >= 1")
        object.__setattr__(self, "modes", tuple(modes))

    @property
    def n(self):
        return self.modes[0][0].shape[0]

    @property
    def m(self):
        return self.modes[0][2].shape[0]

    @property
    def n_modes(self):
        return len(self.modes)

    def mode_at(self, k):
        if self.n_modes == 1:
            return 0
        block = k // self.dwell
        if self.schedule_seed is None:
            return block % self.n_modes
        return int(counter_generator(self.schedule_seed, self.schedule_stream, block).integers(self.n_modes))

    def schedule(self, horizon):
        return np.array([self.mode_at(k) for k in range(horizon)])


@dataclass(frozen=True)
class Realization:
    Abar: np.ndarray
    Btilde: np.ndarray
    Cbar: np.ndarray
    G: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ExtendedModel:
    base: LTIModel
    A_tilde: np.ndarray
    C_tilde: np.ndarray
    dist_Abar: MatrixDistribution
    dist_Btilde: MatrixDistribution
    dist_Cbar: MatrixDistribution
    Q_tilde: np.ndarray
    R_full: np.ndarray
    check: bool = True      # False skips the stability check on A_tilde (hand-built toy models)

    def __post_init__(self):
        n, p, m = self.base.n, self.base.p, self.base.m
        At = as_matrix(self.A_tilde, name="A_tilde")
        nt = At.shape[0]
        At = as_matrix(At, nt, nt, "A_tilde")
        Ct = as_matrix(self.C_tilde, cols=nt, name="C_tilde")
        mt = Ct.shape[0]
        Qt = as_matrix(self.Q_tilde, nt, nt, "Q_tilde")
        Rf = as_matrix(self.R_full, mt + m, mt + m, "R_full")
        if self.dist_Abar.dim != n or self.dist_Cbar.dim != n or self.dist_Btilde.dim != p:
            raise ValueError("matrix distributions do not match plant dimensions")
        if not is_psd(Qt):
            raise ValueError("Q_tilde must be PSD")
        if np.linalg.eigvalsh(symmetrize(Rf)).min() <= 0:
            raise ValueError("R_full must be positive definite")
        if self.check and max(abs(np.linalg.eigvals(At))) >= 1:
            raise ValueError("A_tilde must be stable")
        if not np.allclose(Rf[mt:, mt:], self.base.R):
            raise ValueError("lower-right block of R_full must equal base.R")
        for name, val in (("A_tilde", At), ("C_tilde", Ct), ("Q_tilde", Qt), ("R_full", Rf)):
            object.__setattr__(self, name, val)

    @property
    def n_aux(self):
        return self.A_tilde.shape[0]

    @property
    def m_aux(self):
        return self.C_tilde.shape[0]

    @property
    def N(self):
        return self.n_aux + self.base.n

    @property
    def M(self):
        return self.m_aux + self.base.m

    @property
    def Q_full(self):
        return block_diag(self.Q_tilde, self.base.Q)

    def realize(self, k, nl=None):
        nt, mt, n, p = self.n_aux, self.m_aux, self.base.n, self.base.p
        G = None
        if nl is not None:
            G = sample_time_varying(nl.dist_G, (mt, n), k)
        return Realization(
            Abar=sample_time_varying(self.dist_Abar, (nt, n), k),
            Btilde=sample_time_varying(self.dist_Btilde, (nt, p), k),
            Cbar=sample_time_varying(self.dist_Cbar, (mt, n), k),
            G=G,
        )

    def mean_realization(self, nl=None):
        nt, mt = self.n_aux, self.m_aux
        G = None
        if nl is not None:
            G = np.tile(nl.dist_G.mean[:, None], (1, self.base.n))
        return Realization(
            Abar=np.tile(self.dist_Abar.mean, (nt, 1)),
            Btilde=np.tile(self.dist_Btilde.mean, (nt, 1)),
            Cbar=np.tile(self.dist_Cbar.mean, (mt, 1)),
            G=G,
        )

    def blocks(self, real: Realization):
        """Stacked (A_cal, B_cal, C_cal) for one realization."""
        b = self.base
        nt, mt = self.n_aux, self.m_aux
        Acal = np.block([[self.A_tilde, real.Abar], [np.zeros((b.n, nt)), b.A]])
        Bcal = np.vstack([real.Btilde, b.B])
        Ccal = np.block([[self.C_tilde, real.Cbar], [np.zeros((b.m, nt)), b.C]])
        return Acal, Bcal, Ccal

    def with_distributions(self, **dists):
        return replace(self, **dists)


@dataclass(frozen=True)
class NonlinearitySpec:
    """Random nonlinear auxiliary sensing ``G_k h(x_k)``; columns of G are IID."""
    dist_G: MatrixDistribution
    kind: str = "power"
    c: int = 2
    func: Optional[Callable] = None
    deriv: Optional[Callable] = None

    def __post_init__(self):
        if self.dist_G.axis != "columns":
            raise ValueError("G distribution must be column-wise")
        if self.kind == "power":
            if int(self.c) != self.c or self.c < 1:
                raise ValueError("power nonlinearity needs a positive integer exponent")
        elif self.kind == "custom":
            if self.func is None or self.deriv is None:
                raise ValueError("custom nonlinearity needs func and deriv")
        else:
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")

    def h(self, x):
        x = np.asarray(x, dtype=float)
        out = x ** int(self.c) if self.kind == "power" else np.asarray(self.func(x), dtype=float)
        if not np.all(np.isfinite(out)):
            raise DivergenceError("nonlinearity is not finite at the evaluated state")
        return out

    def dh(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            c = int(self.c)
            out = c * x ** (c - 1)
        else:
            out = np.asarray(self.deriv(x), dtype=float)
        if not np.all(np.isfinite(out)):
            raise DivergenceError("nonlinearity derivative is not finite")
        return out


# -- noise ------------------------------------------------------------------

class NoiseStreams:
    """Per-trial process/sensor noise with one child generator per block.

    The nominal blocks (w, v) come from their own streams so an extended run
    and a plain LTI run with the same seed see identical nominal noise.
    """

    def __init__(self, seed, Q, R, Q_tilde=None, R_full=None):
        ss = np.random.SeedSequence(seed)
        self._w, self._v, self._wt, self._vt = [np.random.default_rng(s) for s in ss.spawn(4)]
        self.Lq = psd_factor(Q)
        self.Lr = psd_factor(R)
        self.Lqt = None if Q_tilde is None else psd_factor(Q_tilde)
        self.cond = None
        if R_full is not None:
            m = R.shape[0]
            mt = R_full.shape[0] - m
            R12 = R_full[:mt, mt:]
            gain = np.linalg.solve(R, R12.T).T
            self.cond = (gain, psd_factor(R_full[:mt, :mt] - gain @ R12.T))

    def process(self):
        w = self.Lq @ self._w.standard_normal(self.Lq.shape[0])
        if self.Lqt is None:
            return w
        wt = self.Lqt @ self._wt.standard_normal(self.Lqt.shape[0])
        return np.concatenate([wt, w])

    def sensor(self):
        v = self.Lr @ self._v.standard_normal(self.Lr.shape[0])
        if self.cond is None:
            return v
        gain, L = self.cond
        vt = gain @ v + L @ self._vt.standard_normal(L.shape[0])
        return np.concatenate([vt, v])


# -- stepping ---------------------------------------------------------------

@dataclass
class StepResult:
    state: np.ndarray          # next (attacked) state
    y_received: np.ndarray     # output the operator sees
    y_intercepted: np.ndarray  # output before sensor bias
    real: Optional[Realization] = None
    mode: int = -1


def step_extended(model: ExtendedModel, state, u, attack=None, k=0, w=None, v=None, real=None):
    """One step of the extended plant with optional (u_a, d_a) attack."""
    state = np.asarray(state, dtype=float)
    if state.shape != (model.N,):
        raise ValueError(f"state must have length {model.N}")
    real = model.realize(k) if real is None else real
    Acal, Bcal, Ccal = model.blocks(real)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.zeros(model.N) if w is None else w
    v = np.zeros(model.M) if v is None else v
    y_int = Ccal @ state + v
    ua, da = (None, None) if attack is None else attack
    u_applied = u if ua is None else u + ua
    y_rec = y_int if da is None else y_int + da
    nxt = Acal @ state + Bcal @ u_applied + w
    check_bounded(k, state=nxt, output=y_rec)
    return StepResult(nxt, y_rec, y_int, real)


def step_nonlinear(model: ExtendedModel, nl: NonlinearitySpec, state, u, attack=None, k=0, w=None, v=None,
                   real=None):
    """As ``step_extended`` with ``G_k h(x_k)`` added to the auxiliary outputs."""
    real = model.realize(k, nl) if real is None else real
    res = step_extended(model, state, u, attack, k, w, v, real)
    x = np.asarray(state, dtype=float)[model.n_aux:]
    extra = np.zeros(model.M)
    extra[:model.m_aux] = real.G @ nl.h(x)
    res.y_intercepted = res.y_intercepted + extra
    res.y_received = res.y_received + extra
    check_bounded(k, output=res.y_received)
    return res


def sensor_attack_matrix(m, sensors):
    """D^a with a unit column per attacked sensor (sensor indices are 0-based)."""
    sensors = list(sensors)
    if any(s < 0 or s >= m for s in sensors):
        raise ValueError(f"sensor index outside 0..{m - 1}")
    D = np.zeros((m, len(sensors)))
    for i, s in enumerate(sensors):
        D[s, i] = 1.0
    return D


def step_hybrid(modes: HybridModeSet, state, u=None, attack=None, sensors=(), k=0, w=None, v=None):
    """One step of the switched plant; ``attack`` is d^a_k over ``sensors``."""
    i = modes.mode_at(k)
    A, B, C = modes.modes[i]
    state = np.asarray(state, dtype=float)
    y = C @ state
    if v is not None:
        y = y + v
    y_int = y.copy()
    if attack is not None and len(sensors):
        y = y + sensor_attack_matrix(modes.m, sensors) @ np.atleast_1d(attack)
    nxt = A @ state
    if u is not None and B.shape[1]:
        nxt = nxt + B @ np.atleast_1d(u)
    if w is not None:
        nxt = nxt + w
    check_bounded(k, state=nxt, output=y)
    return StepResult(nxt, y, y_int, None, i)


# -- trajectory record ------------------------------------------------------

@dataclass
class TrajectoryRecord:
    x: list = field(default_factory=list)            # attacked plant state (full)
    u: list = field(default_factory=list)
    ua: list = field(default_factory=list)
    da: list = field(default_factory=list)
    y_received: list = field(default_factory=list)
    y_intercepted: list = field(default_factory=list)
    mode: list = field(default_factory=list)
    real: list = field(default_factory=list)

    def append(self, x, u, y_received, y_intercepted, ua=None, da=None, mode=-1, real=None):
        self.x.append(np.array(x, dtype=float))
        self.u.append(np.atleast_1d(np.array(u, dtype=float)))
        self.y_received.append(np.array(y_received, dtype=float))
        self.y_intercepted.append(np.array(y_intercepted, dtype=float))
        self.ua.append(None if ua is None else np.atleast_1d(np.array(ua, dtype=float)))
        self.da.append(None if da is None else np.atleast_1d(np.array(da, dtype=float)))
        self.mode.append(int(mode))
        self.real.append(real)

    def __len__(self):
        return len(self.x)

    def write_csv(self, path, n, n_aux=0, m_aux=0):
        """Columns ``k, x_1..x_n, xtilde_1.., u_1.., y_1.., ytilde_1.., mode``."""
        p = len(self.u[0]) if self.u else 0
        m = (len(self.y_received[0]) - m_aux) if self.y_received else 0
        header = (["k"] + [f"x_{i + 1}" for i in range(n)] + [f"xtilde_{i + 1}" for i in range(n_aux)]
                  + [f"u_{i + 1}" for i in range(p)] + [f"y_{i + 1}" for i in range(m)]
                  + [f"ytilde_{i + 1}" for i in range(m_aux)] + ["mode"])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for k in range(len(self)):
                x, y = self.x[k], self.y_received[k]
                row = ([k] + list(x[n_aux:]) + list(x[:n_aux]) + list(self.u[k])
                       + list(y[m_aux:]) + list(y[:m_aux]) + [self.mode[k]])
                wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

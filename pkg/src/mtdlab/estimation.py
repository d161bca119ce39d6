"""Kalman / extended Kalman filtering, per-sensor decomposition and MVUB fusion."""
import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .model_core import HybridModeSet, observability_matrix, symmetrize


@dataclass
class FilterState:
    x_prior: np.ndarray                 # x_hat_{k|k-1}
    P_prior: np.ndarray                 # P_{k|k-1}
    x_post: Optional[np.ndarray] = None  # x_hat_{k|k}
    P_post: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None      # residue used in the last update
    S: Optional[np.ndarray] = None      # its covariance

    @classmethod
    def initial(cls, dim, P0=None, x0=None):
        x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
        P0 = np.eye(dim) if P0 is None else np.asarray(P0, dtype=float)
        return cls(x0.copy(), P0.copy())


def kf_update(fs: FilterState, C, R, y, H=None, offset=None):
    """Measurement update.  ``H`` overrides the linearized map used for the
    gain (EKF); ``offset`` is added to the output prediction."""
    H = C if H is None else H
    pred = C @ fs.x_prior
    if offset is not None:
        pred = pred + offset
    z = np.asarray(y, dtype=float) - pred
    PHt = fs.P_prior @ H.T
    S = symmetrize(H @ PHt + R)
    try:
        cf = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is not positive definite") from exc
    K = np.linalg.solve(cf.T, np.linalg.solve(cf, PHt.T)).T
    if not np.all(np.isfinite(K)):
        raise FloatingPointError("non-finite Kalman gain")
    x_post = fs.x_prior + K @ z
    P_post = symmetrize(fs.P_prior - K @ H @ fs.P_prior)
    return replace(fs, x_post=x_post, P_post=P_post, K=K, z=z, S=S)


def kf_predict(fs: FilterState, A, B, Q, u):
    x_prior = A @ fs.x_post
    if B is not None and np.size(u):
        x_prior = x_prior + B @ np.atleast_1d(u)
    P_prior = symmetrize(A @ fs.P_post @ A.T + Q)
    return replace(fs, x_prior=x_prior, P_prior=P_prior)


def kf_step(A, B, C, Q, R, fs: FilterState, u, y):
    """Update with y_k then predict to k+1 with u_k."""
    return kf_predict(kf_update(fs, C, R, y), A, B, Q, u)


def ekf_terms(C, nl, G, x_prior, n_aux, m_aux):
    """Linearized output map Phi_k and the nonlinear prediction offset."""
    x = x_prior[n_aux:]
    Phi = C.copy()
    Phi[:m_aux, n_aux:] += G * nl.dh(x)[None, :]
    offset = np.zeros(C.shape[0])
    offset[:m_aux] = G @ nl.h(x)
    if not np.all(np.isfinite(Phi)):
        raise FloatingPointError("non-finite EKF Jacobian")
    return Phi, offset


def ekf_update(fs, C, R, y, nl, G, n_aux, m_aux):
    Phi, offset = ekf_terms(C, nl, G, fs.x_prior, n_aux, m_aux)
    return kf_update(fs, C, R, y, H=Phi, offset=offset)


def ekf_step(A, B, C, Q, R, nl, G, fs, u, y, n_aux, m_aux):
    return kf_predict(ekf_update(fs, C, R, y, nl, G, n_aux, m_aux), A, B, Q, u)


def write_filter_trace(path, states):
    """CSV with ``k, xhat_prior..., trace_P, gain_fro_norm`` (one row per state)."""
    dim = len(states[0].x_prior) if states else 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k"] + [f"xhat_prior_{i + 1}" for i in range(dim)] + ["trace_P", "gain_fro_norm"])
        for k, fs in enumerate(states):
            gain = np.nan if fs.K is None else np.linalg.norm(fs.K)
            wr.writerow([k] + [repr(float(v)) for v in fs.x_prior]
                        + [repr(float(np.trace(fs.P_prior))), repr(float(gain))])


# -- per-sensor decomposition -------------------------------------------------

@dataclass(frozen=True)
class SensorDecomposition:
    sensor: int
    T_uo: np.ndarray        # n x n_uo, orthonormal basis of the unobservable subspace
    T_o: np.ndarray         # n x n_o, orthonormal completion
    A_red: tuple            # per-mode reduced dynamics on the observable coordinates
    C_red: tuple            # per-mode reduced 1 x n_o output rows

    @property
    def n_obs(self):
        return self.T_o.shape[1]

    def split(self, x):
        return self.T_uo.T @ x, self.T_o.T @ x

    def reconstruct(self, zeta_uo, zeta):
        return self.T_uo @ zeta_uo + self.T_o @ zeta


def _subspaces_equal(U, V, tol):
    if U.shape[1] != V.shape[1]:
        return False
    if U.shape[1] == 0:
        return True
    return np.linalg.norm(U @ U.T - V @ V.T) <= tol


def _null_basis(M, tol=None):
    _, sv, Vt = np.linalg.svd(M)
    if tol is None:
        tol = max(M.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    return Vt[rank:].T


def decompose_sensor(modes, s, tol=1e-9):
    """Kalman observability decomposition for sensor ``s`` shared by all modes.

    ``modes`` is a HybridModeSet or a sequence of (A, C) pairs.
    """
    pairs = [(A, C) for A, _, C in modes.modes] if isinstance(modes, HybridModeSet) else list(modes)
    n = pairs[0][0].shape[0]
    if not 0 <= s < pairs[0][1].shape[0]:
        raise ValueError(f"sensor index {s} out of range")
    bases = [_null_basis(observability_matrix(A, C[s:s + 1], n)) for A, C in pairs]
    for i, U in enumerate(bases[1:], start=1):
        if not _subspaces_equal(bases[0], U, 1e-6):
            raise ValueError(f"sensor {s}: unobservable subspace of mode {i} differs from mode 0")
    T_uo = bases[0]
    T_o = _null_basis(T_uo.T) if T_uo.shape[1] else np.eye(n)
    A_red = tuple(T_o.T @ A @ T_o for A, _ in pairs)
    C_red = tuple(C[s:s + 1] @ T_o for _, C in pairs)
    for i, (Ar, Cr) in enumerate(zip(A_red, C_red)):
        if T_o.shape[1] and np.linalg.matrix_rank(observability_matrix(Ar, Cr), tol=1e-9) < T_o.shape[1]:
            raise ValueError(f"sensor {s}: reduced pair of mode {i} is not observable")
    return SensorDecomposition(s, T_uo, T_o, A_red, C_red)


# -- fusion --------------------------------------------------------------------

@dataclass
class FusionState:
    decomps: list
    Q: np.ndarray
    R: np.ndarray
    B_modes: Optional[list] = None
    sigma: float = 1e-6
    zeta: list = field(default_factory=list)        # per-sensor a priori estimates
    P: list = field(default_factory=list)           # P[s1][s2] a priori cross covariances
    zeta_post: list = field(default_factory=list)
    P_post: list = field(default_factory=list)
    x_fused: Optional[np.ndarray] = None
    excluded: set = field(default_factory=set)

    @classmethod
    def initial(cls, decomps, Q, R, x0=None, P0=None, sigma=1e-6, B_modes=None):
        n = decomps[0].T_o.shape[0]
        x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
        P0 = np.eye(n) if P0 is None else np.asarray(P0, dtype=float)
        if sigma <= 0:
            raise ValueError("fusion jitter sigma must be positive")
        fu = cls(list(decomps), np.asarray(Q, float), np.asarray(R, float), B_modes, sigma)
        fu.zeta = [d.T_o.T @ x0 for d in decomps]
        fu.P = [[d1.T_o.T @ P0 @ d2.T_o for d2 in decomps] for d1 in decomps]
        return fu


def stacked_weights(T_uo, n):
    """W with block row s equal to [0 .. -T_uo[s] .. 0, I]."""
    cols = [t.shape[1] for t in T_uo]
    W = np.zeros((n * len(T_uo), sum(cols) + n))
    c = 0
    for s, t in enumerate(T_uo):
        W[s * n:(s + 1) * n, c:c + cols[s]] = -t
        W[s * n:(s + 1) * n, -n:] = np.eye(n)
        c += cols[s]
    return W


def mvub_fuse(estimates, T_uo, Upsilon):
    """Minimum variance unbiased combination of per-sensor estimates.

    ``estimates[s]`` approximates ``x - T_uo[s] zeta_uo[s]``; returns the
    recovered x (last n entries of the weighted least-squares solution).
    """
    n = len(estimates[0])
    W = stacked_weights(T_uo, n)
    y = np.concatenate(estimates)
    Ui_W = np.linalg.solve(Upsilon, W)
    Ui_y = np.linalg.solve(Upsilon, y)
    normal = W.T @ Ui_W
    if np.linalg.matrix_rank(W) < W.shape[1]:
        sol = np.linalg.pinv(normal) @ (W.T @ Ui_y)
    else:
        sol = np.linalg.solve(normal, W.T @ Ui_y)
    return sol[-n:]


def fusion_step(fu: FusionState, y, mode, u=None):
    """Advance every per-sensor filter with y_k, fuse, and predict to k+1.

    Returns (fused estimate x*_k, normalized per-sensor residues z_{k,s}).
    """
    m = len(fu.decomps)
    y = np.asarray(y, dtype=float)
    K, Cs, z = [], [], np.zeros(m)
    fu.zeta_post = []
    for s, d in enumerate(fu.decomps):
        C = d.C_red[mode]
        Pss = fu.P[s][s]
        S = (C @ Pss @ C.T).item() + fu.R[d.sensor, d.sensor]
        gain = (Pss @ C.T / S).ravel()
        r = y[d.sensor] - (C @ fu.zeta[s]).item()
        z[s] = r / np.sqrt(S)
        fu.zeta_post.append(fu.zeta[s] + gain * r)
        K.append(gain[:, None])
        Cs.append(C)
    imkc = [np.eye(fu.decomps[s].n_obs) - K[s] @ Cs[s] for s in range(m)]
    fu.P_post = [[None] * m for _ in range(m)]
    for a in range(m):
        for b in range(m):
            r_ab = fu.R[fu.decomps[a].sensor, fu.decomps[b].sensor]
            Pab = imkc[a] @ fu.P[a][b] @ imkc[b].T + r_ab * (K[a] @ K[b].T)
            fu.P_post[a][b] = symmetrize(Pab) if a == b else Pab

    n = fu.decomps[0].T_o.shape[0]
    use = [s for s in range(m) if s not in fu.excluded]
    if len(use) < m:
        W = stacked_weights([fu.decomps[s].T_uo for s in use], n) if use else np.zeros((0, 1))
        if not use or np.linalg.matrix_rank(W) < W.shape[1]:
            use = list(range(m))   # remaining sensors cannot recover x; keep all
    fu.x_fused = _fuse(fu, use)

    fu.zeta, fu.P = [], [[None] * m for _ in range(m)]
    for s, d in enumerate(fu.decomps):
        zeta = d.A_red[mode] @ fu.zeta_post[s]
        if u is not None and fu.B_modes is not None:
            zeta = zeta + d.T_o.T @ fu.B_modes[mode] @ np.atleast_1d(u)
        fu.zeta.append(zeta)
    for a, da in enumerate(fu.decomps):
        for b, db in enumerate(fu.decomps):
            Pab = da.A_red[mode] @ fu.P_post[a][b] @ db.A_red[mode].T + da.T_o.T @ fu.Q @ db.T_o
            fu.P[a][b] = symmetrize(Pab) if a == b else Pab
    return fu.x_fused, z


def _fuse(fu, use):
    n = fu.decomps[0].T_o.shape[0]
    blocks = [[fu.decomps[a].T_o @ fu.P_post[a][b] @ fu.decomps[b].T_o.T + (fu.sigma * np.eye(n) if a == b else 0)
               for b in use] for a in use]
    Ups = symmetrize(np.block(blocks))
    if np.linalg.cond(Ups) > 1e15:
        raise np.linalg.LinAlgError("fusion covariance is numerically singular; increase sigma")
    est = [fu.decomps[s].T_o @ fu.zeta_post[s] for s in use]
    return mvub_fuse(est, [fu.decomps[s].T_uo for s in use], Ups)

"""Fisher information of the auxiliary measurements: what the operator learns
about the attacked state and what a strong adversary learns about the
time-varying matrices."""
import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import block_diag, solve_discrete_are

from .model_core import ExtendedModel, NonlinearitySpec, symmetrize


@dataclass
class StackedMaps:
    H_D: np.ndarray        # propagation of coupling inputs into later auxiliary outputs
    H_W: np.ndarray        # propagation of [x_tilde_0; w_tilde_0..] into auxiliary outputs
    Sigma_Q: np.ndarray    # BlkDiag(P_tilde_0, Q_tilde, ...)
    Sigma_R: np.ndarray    # BlkDiag(R_tilde, ...)
    n_aux: int
    m_aux: int
    horizon: int           # number of stacked steps (k + 1)

    @property
    def Sigma_N(self):
        return symmetrize(self.H_W @ self.Sigma_Q @ self.H_W.T + self.Sigma_R)

    def block_rows(self, t):
        return slice(t * self.m_aux, (t + 1) * self.m_aux)

    def block_cols(self, t):
        return slice(t * self.n_aux, (t + 1) * self.n_aux)


def aux_prior_covariance(model: ExtendedModel):
    """Steady-state a priori error covariance of the auxiliary subsystem alone."""
    Rt = model.R_full[:model.m_aux, :model.m_aux]
    return symmetrize(solve_discrete_are(model.A_tilde.T, model.C_tilde.T, model.Q_tilde, Rt))


def build_stacked_maps(A_tilde, C_tilde, Q_tilde, R_tilde, horizon, P0=None):
    """H_D, H_W, Sigma_Q, Sigma_R over ``horizon`` steps."""
    At = np.atleast_2d(A_tilde)
    Ct = np.atleast_2d(C_tilde)
    nt, mt = At.shape[0], Ct.shape[0]
    if horizon < 1:
        raise ValueError("horizon must be positive")
    powers = [Ct]
    for _ in range(horizon):
        powers.append(powers[-1] @ At)
    H_D = np.zeros((horizon * mt, horizon * nt))
    H_W = np.zeros((horizon * mt, horizon * nt))
    for r in range(horizon):
        for c in range(horizon):
            if c < r:
                H_D[r * mt:(r + 1) * mt, c * nt:(c + 1) * nt] = powers[r - 1 - c]
            if c <= r:
                H_W[r * mt:(r + 1) * mt, c * nt:(c + 1) * nt] = powers[r - c]
    P0 = np.zeros((nt, nt)) if P0 is None else np.atleast_2d(P0)
    Sigma_Q = block_diag(P0, *[np.atleast_2d(Q_tilde)] * (horizon - 1))
    Sigma_R = block_diag(*[np.atleast_2d(R_tilde)] * horizon)
    return StackedMaps(H_D, H_W, Sigma_Q, Sigma_R, nt, mt, horizon)


def stacked_maps_for(model: ExtendedModel, horizon):
    Rt = model.R_full[:model.m_aux, :model.m_aux]
    return build_stacked_maps(model.A_tilde, model.C_tilde, model.Q_tilde, Rt, horizon, aux_prior_covariance(model))


@dataclass
class CouplingBlocks:
    J: list     # (i,i) blocks of H_D' Sigma_N^-1 H_D, each n_aux x n_aux
    S: list     # (i,i) blocks of Sigma_N^-1, each m_aux x m_aux
    F: list     # (i,i) blocks of H_D' Sigma_N^-1, each n_aux x m_aux


def coupling_blocks(sm: StackedMaps):
    Si = np.linalg.inv(sm.Sigma_N)
    Jfull = sm.H_D.T @ Si @ sm.H_D
    Ffull = sm.H_D.T @ Si
    J, S, F = [], [], []
    for t in range(sm.horizon):
        rc, cc = sm.block_rows(t), sm.block_cols(t)
        J.append(symmetrize(Jfull[cc, cc]))
        S.append(symmetrize(Si[rc, rc]))
        F.append(Ffull[cc, rc])
    return CouplingBlocks(J, S, F)


@dataclass
class FimReport:
    value: np.ndarray
    norm: float
    psd: bool
    horizon: int


def _report(M, horizon, tol=1e-9):
    M = symmetrize(M)
    low = np.linalg.eigvalsh(M).min() if M.size else 0.0
    return FimReport(M, float(np.linalg.norm(M, 2)) if M.size else 0.0,
                     bool(low >= -tol * max(1.0, np.abs(M).max())), horizon)


def _observation_map(sm: StackedMaps, Abar_seq, Cbar_seq):
    """H_A + H_C for realized coupling matrices (each n_aux x n / m_aux x n)."""
    return sm.H_D @ block_diag(*Abar_seq) + block_diag(*Cbar_seq)


def defender_fim_linear(sm: StackedMaps, Abar_seq=None, Cbar_seq=None, law=None):
    """Information the auxiliary outputs carry about the attacked states.

    With realized matrices the value is (H_A+H_C)' Sigma_N^-1 (H_A+H_C).
    With ``law = (mu_A, Sigma_A, mu_C, Sigma_C)`` the expectation over IID rows
    is returned instead.
    """
    Si = np.linalg.inv(sm.Sigma_N)
    if law is None:
        H = _observation_map(sm, Abar_seq, Cbar_seq)
        return _report(H.T @ Si @ H, sm.horizon)
    mu_A, Sig_A, mu_C, Sig_C = (np.asarray(a, float) for a in law)
    T = sm.horizon
    EH = _observation_map(sm, [np.tile(mu_A, (sm.n_aux, 1))] * T, [np.tile(mu_C, (sm.m_aux, 1))] * T)
    cb = coupling_blocks(sm)
    extra = block_diag(*[np.trace(cb.J[t]) * Sig_A + np.trace(cb.S[t]) * Sig_C for t in range(T)])
    return _report(EH.T @ Si @ EH + extra, T)


def coupling_diagonal_blocks(cb: CouplingBlocks, mu_A, Sig_A, mu_C, Sig_C):
    """Omega_A + Omega_C + Omega_AC + Omega_AC' per step (the design constraint blocks)."""
    out = []
    for J, S, F in zip(cb.J, cb.S, cb.F):
        EA = np.tile(mu_A, (J.shape[0], 1))
        EC = np.tile(mu_C, (S.shape[0], 1))
        cross = EA.T @ F @ EC
        out.append(symmetrize(np.trace(J) * Sig_A + np.sum(J) * np.outer(mu_A, mu_A) + np.trace(S) * Sig_C
                              + np.sum(S) * np.outer(mu_C, mu_C) + cross + cross.T))
    return out


# -- attacker information about the matrices --------------------------------------

@dataclass
class AttackerStacks:
    H: np.ndarray          # [H_X H_U H_E]
    H_F: np.ndarray
    h_energy: np.ndarray   # sum_i h(x_t(i))^2 per step
    Sigma_theta: np.ndarray
    Sigma_N: np.ndarray


def build_attacker_stacks(sm: StackedMaps, xA, uA, Sig_A, Sig_B, Sig_C, nl: Optional[NonlinearitySpec] = None):
    """Stacks for a known attacked trajectory ``xA`` (T x n) and inputs ``uA`` (T x p).

    Parameter order: all vec(Abar_t') then vec(Btilde_t') then vec(Cbar_t').
    """
    xA = np.atleast_2d(np.asarray(xA, float))
    uA = np.atleast_2d(np.asarray(uA, float))
    T = sm.horizon
    if xA.shape[0] != T or uA.shape[0] != T:
        raise ValueError(f"trajectory length must equal the stacked horizon {T}")
    It, Im = np.eye(sm.n_aux), np.eye(sm.m_aux)
    H_X = sm.H_D @ block_diag(*[np.kron(It, x[None, :]) for x in xA])
    H_U = sm.H_D @ block_diag(*[np.kron(It, u[None, :]) for u in uA])
    H_E = block_diag(*[np.kron(Im, x[None, :]) for x in xA])
    H = np.hstack([H_X, H_U, H_E])
    if nl is None:
        hx = np.zeros_like(xA)
    else:
        hx = nl.h(xA)
    H_F = block_diag(*[np.kron(h[None, :], Im) for h in hx])
    Sigma_theta = block_diag(*([np.kron(It, Sig_A)] * T + [np.kron(It, Sig_B)] * T + [np.kron(Im, Sig_C)] * T))
    return AttackerStacks(H, H_F, np.sum(hx ** 2, axis=1), Sigma_theta, sm.Sigma_N)


def attacker_fim(st: AttackerStacks, Sig_G=None, woodbury=False):
    """(I_NL, I_L, Delta) for the strong adversary's Bayesian information."""
    prior = 0.5 * np.linalg.inv(st.Sigma_theta)
    SN = st.Sigma_N
    I_L = st.H.T @ np.linalg.solve(SN, st.H) + prior
    if Sig_G is None or not np.any(st.h_energy):
        return symmetrize(I_L), symmetrize(I_L), np.zeros_like(I_L)
    Sig_G = np.atleast_2d(Sig_G)
    inner = SN + block_diag(*[e * Sig_G for e in st.h_energy])
    I_NL = st.H.T @ np.linalg.solve(inner, st.H) + prior
    if not woodbury:
        return symmetrize(I_NL), symmetrize(I_L), symmetrize(I_L - I_NL)
    # Delta = H' SN^-1 H_F (Sg^-1 + H_F' SN^-1 H_F)^-1 H_F' SN^-1 H; only steps with h != 0 contribute
    mt = Sig_G.shape[0]
    keep = np.repeat(st.h_energy > 0, mt)
    sq = np.sqrt(st.h_energy[st.h_energy > 0])
    Fred = block_diag(*[s * np.eye(mt) for s in sq])          # H_F (I (x) L_G) collapsed per step
    E = np.zeros((SN.shape[0], Fred.shape[1]))
    E[keep] = Fred
    Lg = np.linalg.cholesky(Sig_G)
    E = E @ block_diag(*[Lg] * len(sq))
    SNi_H = np.linalg.solve(SN, st.H)
    SNi_E = np.linalg.solve(SN, E)
    core = np.eye(E.shape[1]) + E.T @ SNi_E
    delta = SNi_H.T @ E @ np.linalg.solve(core, E.T @ SNi_H)
    return symmetrize(I_L - delta), symmetrize(I_L), symmetrize(delta)


def defender_fim_nonlinear(sm: StackedMaps, xA, nl: NonlinearitySpec, law, mu_G, Sig_G):
    """Expected operator information with the random nonlinearity.

    Returns (FimReport of E[I_bar], E[F_G] diagonal, Tr E[Omega_G]).  The first
    part is the linear expectation; the second adds
    dh' E[H_G' Sigma_N^-1 H_G] dh with E[F_G] diagonal.
    """
    base = defender_fim_linear(sm, law=law)
    xA = np.atleast_2d(np.asarray(xA, float))
    n = xA.shape[1]
    cb = coupling_blocks(sm)
    mu_G = np.asarray(mu_G, float)
    Sig_G = np.atleast_2d(Sig_G)
    diagF = np.concatenate([np.full(n, np.trace((Sig_G + np.outer(mu_G, mu_G)) @ S)) for S in cb.S])
    d = nl.dh(xA).ravel()
    # E[H_G' Sigma_N^-1 H_G] has off-diagonal entries from the means
    Si = np.linalg.inv(sm.Sigma_N)
    T = sm.horizon
    EHG = block_diag(*[np.tile(mu_G[:, None], (1, n))] * T)
    EF = EHG.T @ Si @ EHG
    EF[np.diag_indices_from(EF)] = diagF
    omega_G = d[:, None] * EF * d[None, :]
    cross_mean = defender_cross_terms(sm, law, EHG, d)
    total = base.value + omega_G + cross_mean + cross_mean.T
    return _report(total, T), diagF, float(d @ (diagF * d))


def defender_cross_terms(sm, law, EHG, d):
    """E[(H_A + H_C)' Sigma_N^-1 H_G dh]; independent factors so only means enter."""
    mu_A, _, mu_C, _ = (np.asarray(a, float) for a in law)
    T = sm.horizon
    EH = _observation_map(sm, [np.tile(mu_A, (sm.n_aux, 1))] * T, [np.tile(mu_C, (sm.m_aux, 1))] * T)
    return EH.T @ np.linalg.solve(sm.Sigma_N, EHG) * d[None, :]


def write_fim_csv(path, rows):
    """CSV ``k, norm_I_NL, norm_I_L, norm_delta, psd_ok``; rows are tuples in that order."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "norm_I_NL", "norm_I_L", "norm_delta", "psd_ok"])
        for k, a, b, c, ok in rows:
            wr.writerow([int(k), repr(float(a)), repr(float(b)), repr(float(c)), int(bool(ok))])

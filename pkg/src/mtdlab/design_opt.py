"""Covariance design as small semidefinite programs.

Problems are stated in a light canonical form (scalar variables, symmetric
matrix variables, affine LMIs) and handed to cvxpy; slacks are recomputed in
numpy from the returned point so the reported feasibility does not depend on
the solver's own tolerances.
"""
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .information import CouplingBlocks
from .model_core import is_psd, symmetrize


class SdpInfeasible(RuntimeError):
    pass


class SdpUnbounded(RuntimeError):
    pass


class SdpNumericalError(RuntimeError):
    pass


@dataclass
class LMI:
    """const + sum of terms >= 0.

    term kinds: ("scalar", s, F) adds s*F; ("scaled", X, a) adds a*X;
    ("trace", X, S) adds tr(S X) (1x1 LMIs only).
    """
    name: str
    const: np.ndarray
    terms: list = field(default_factory=list)

    def __post_init__(self):
        self.const = symmetrize(np.atleast_2d(np.asarray(self.const, float)))
        for kind, _, coef in self.terms:
            if kind == "scalar" and np.shape(coef) != self.const.shape:
                raise ValueError(f"{self.name}: scalar coefficient shape {np.shape(coef)} != {self.const.shape}")
            if kind == "scalar" and not np.allclose(coef, np.transpose(coef)):
                raise ValueError(f"{self.name}: coefficient matrices must be symmetric")

    @property
    def dim(self):
        return self.const.shape[0]


@dataclass
class SdpProblem:
    scalars: list                         # names; all constrained >= 0
    matrices: dict                        # name -> dimension; all constrained PSD
    lmis: list
    objective: dict                       # scalar name -> weight (maximized)

    def __post_init__(self):
        for lmi in self.lmis:
            for kind, var, coef in lmi.terms:
                if kind == "scalar" and var not in self.scalars:
                    raise ValueError(f"{lmi.name}: unknown scalar {var}")
                if kind in ("scaled", "trace") and var not in self.matrices:
                    raise ValueError(f"{lmi.name}: unknown matrix {var}")
                if kind == "scaled" and self.matrices[var] != lmi.dim:
                    raise ValueError(f"{lmi.name}: matrix {var} has dimension {self.matrices[var]}, LMI {lmi.dim}")
                if kind == "trace" and (lmi.dim != 1 or np.shape(coef) != (self.matrices[var],) * 2):
                    raise ValueError(f"{lmi.name}: bad trace term")

    def evaluate(self, lmi: LMI, values):
        M = lmi.const.copy()
        for kind, var, coef in lmi.terms:
            if kind == "scalar":
                M = M + values[var] * np.asarray(coef, float)
            elif kind == "scaled":
                M = M + coef * values[var]
            else:
                M = M + np.trace(np.asarray(coef) @ values[var])
        return symmetrize(M)


@dataclass
class DesignSolution:
    values: dict                # scalars and matrices
    objective: float
    slacks: dict                # LMI name -> min eigenvalue of the residual
    status: str

    def covariance(self, name):
        return self.values[name]

    def to_dict(self):
        enc = {k: (np.asarray(v).tolist() if np.ndim(v) else float(v)) for k, v in self.values.items()}
        return {"values": enc, "objective": self.objective, "slacks": self.slacks, "status": self.status}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        vals = {k: (np.array(v) if isinstance(v, list) else float(v)) for k, v in d["values"].items()}
        return cls(vals, float(d["objective"]), {k: float(v) for k, v in d["slacks"].items()}, d["status"])


def solve_sdp(prob: SdpProblem, tol=1e-6, raise_on_failure=True, solver="CLARABEL"):
    """Maximize the weighted scalars subject to the LMIs."""
    import cvxpy as cp

    s = {name: cp.Variable(name=name) for name in prob.scalars}
    X = {name: cp.Variable((d, d), symmetric=True, name=name) for name, d in prob.matrices.items()}
    cons = [v >= 0 for v in s.values()] + [v >> 0 for v in X.values()]
    for lmi in prob.lmis:
        # dividing by a positive scale leaves the feasible set unchanged and helps conditioning
        scale = max([1.0, np.abs(lmi.const).max()] + [np.abs(np.asarray(c, float)).max() for _, _, c in lmi.terms])
        expr = lmi.const / scale
        for kind, var, coef in lmi.terms:
            coef = np.asarray(coef, float) / scale
            if kind == "scalar":
                expr = expr + s[var] * coef
            elif kind == "scaled":
                expr = expr + coef * X[var]
            else:
                expr = expr + cp.reshape(cp.trace(coef @ X[var]), (1, 1), order="F")
        cons.append(0.5 * (expr + expr.T) >> 0)
    obj = cp.Maximize(sum(w * s[name] for name, w in prob.objective.items()))
    problem = cp.Problem(obj, cons)
    try:
        problem.solve(solver=solver)
    except cp.error.SolverError as exc:
        if raise_on_failure:
            raise SdpNumericalError(str(exc)) from exc
        return DesignSolution({}, np.nan, {}, "solver_error")
    status = problem.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        if raise_on_failure:
            raise SdpInfeasible("design problem is infeasible")
        return DesignSolution({}, np.nan, {}, "infeasible")
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        if raise_on_failure:
            raise SdpUnbounded("design problem is unbounded")
        return DesignSolution({}, np.inf, {}, "unbounded")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        if raise_on_failure:
            raise SdpNumericalError(f"solver returned status {status}")
        return DesignSolution({}, np.nan, {}, str(status))

    values = {k: max(float(v.value), 0.0) for k, v in s.items()}
    for k, v in X.items():
        M = symmetrize(np.asarray(v.value))
        w, V = np.linalg.eigh(M)
        if w.min() < -tol:
            raise SdpNumericalError(f"returned {k} is not PSD (min eigenvalue {w.min():.3g})")
        values[k] = symmetrize((V * np.clip(w, 0, None)) @ V.T)   # clip round-off negatives
    slacks = {lmi.name: float(np.linalg.eigvalsh(prob.evaluate(lmi, values)).min()) for lmi in prob.lmis}
    objective = float(sum(w * values[n] for n, w in prob.objective.items()))
    return DesignSolution(values, objective, slacks, "optimal" if status == cp.OPTIMAL else "optimal_inaccurate")


# -- bounds ------------------------------------------------------------------------

@dataclass
class DesignBounds:
    N_B: Optional[np.ndarray] = None
    N_t: Optional[list] = None          # N_1 .. N_T
    Theta_A: Optional[np.ndarray] = None
    Theta_C: Optional[np.ndarray] = None
    Theta_i: Optional[list] = None      # Theta_0 .. Theta_{T-1}
    M_G: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("N_B", "Theta_A", "Theta_C", "M_G"):
            v = getattr(self, name)
            if v is not None and not is_psd(np.atleast_2d(v)):
                raise ValueError(f"{name} must be symmetric PSD")
        for name in ("N_t", "Theta_i"):
            v = getattr(self, name)
            if v is not None and not all(is_psd(np.atleast_2d(b)) for b in v):
                raise ValueError(f"{name} blocks must be symmetric PSD")

    @classmethod
    def reference(cls, p, n, m_aux, T):
        """11' + 0.5 I upper bounds, N_t = t I, Theta_i = I."""
        ones = lambda d: np.ones((d, d)) + 0.5 * np.eye(d)
        return cls(N_B=ones(p), N_t=[t * np.eye(p) for t in range(1, T + 1)], Theta_A=ones(n), Theta_C=ones(n),
                   Theta_i=[np.eye(n) for _ in range(T)], M_G=ones(m_aux))


# -- auxiliary actuator covariance -------------------------------------------------

@dataclass
class ActuatorTerm:
    """One residue's contribution to a lag-t constraint: E[Btilde' W Btilde] + cross + const."""
    W: np.ndarray          # D_tilde' C' Sigma^-1 C D_tilde  (n_aux x n_aux)
    X: np.ndarray          # D_tilde' C' Sigma^-1 C D_bar B  (n_aux x p)
    K: np.ndarray          # B' D_bar' C' Sigma^-1 C D_bar B (p x p)


def actuator_term(Ccal, Sigma, D, B, n_aux):
    Dt, Db = D[:, :n_aux], D[:, n_aux:]
    L = np.linalg.solve(Sigma, Ccal)                  # Sigma^-1 C
    CtSC = Ccal.T @ L
    return ActuatorTerm(Dt.T @ CtSC @ Dt, Dt.T @ CtSC @ Db @ B, B.T @ Db.T @ CtSC @ Db @ B)


def actuator_terms_steady(Acal, Ccal, K, Sigma, B, n_aux, T):
    """Terms for a time-invariant mean model: lag d = 1..T uses (A(I-KC))^(d-1)."""
    N = Acal.shape[0]
    Phi = Acal @ (np.eye(N) - K @ Ccal)
    D = np.eye(N)
    out = []
    for _ in range(T):
        out.append(actuator_term(Ccal, Sigma, D, B, n_aux))
        D = Phi @ D
    return out                                        # index d - 1


def actuator_terms_window(Acal_seq, Ccal_seq, K_seq, Sigma_seq, B, n_aux, k, T):
    """Terms for the step-k variable with realized/expected sequences indexed by absolute step.

    Lag t of the window pairs the step-k input with residues i = k+1 .. k+T-t.
    """
    from .attacks import transition_product
    lags = []
    for t in range(T):
        terms = []
        for i in range(k + 1, k + T - t + 1):
            D = transition_product(Acal_seq, Ccal_seq, K_seq, k, i)
            terms.append(actuator_term(Ccal_seq[i], Sigma_seq[i], D, B, n_aux))
        lags.append(terms)
    return lags


def build_actuator_design(lag_terms, mu_B, bounds: DesignBounds):
    """max eps s.t. Sigma_B <= N_B and, for each window lag t,
    1/2 sum_terms [Tr(W) Sigma_B + Sum(W) mu mu' + M'X + X'M + K] >= eps N_(t+1)
    where M = [mu .. mu]'.

    ``lag_terms[t]`` lists the ActuatorTerm objects of lag t.
    """
    mu_B = np.asarray(mu_B, float)
    p = mu_B.size
    if bounds.N_B is None or bounds.N_t is None:
        raise ValueError("actuator design needs N_B and N_t")
    N_B = np.atleast_2d(bounds.N_B)
    if N_B.shape != (p, p):
        raise ValueError(f"N_B must be {p}x{p}")
    if len(bounds.N_t) < len(lag_terms):
        raise ValueError("need one N_t per window lag")
    lmis = [LMI("upper_bound", N_B, [("scaled", "Sigma_B", -1.0)])]
    for t, terms in enumerate(lag_terms):
        Nt = np.atleast_2d(bounds.N_t[t])
        if Nt.shape != (p, p):
            raise ValueError("N_t dimension mismatch")
        trW, const = 0.0, np.zeros((p, p))
        for tm in terms:
            Mmu = np.tile(mu_B[:, None], (1, tm.W.shape[0]))        # p x n_aux
            cross = Mmu @ tm.X
            trW += np.trace(tm.W)
            const = const + np.sum(tm.W) * np.outer(mu_B, mu_B) + cross + cross.T + tm.K
        lmis.append(LMI(f"lag_{t}", 0.5 * const, [("scaled", "Sigma_B", 0.5 * trW), ("scalar", "eps", -Nt)]))
    return SdpProblem(["eps"], {"Sigma_B": p}, lmis, {"eps": 1.0})


# -- coupling covariances --------------------------------------------------------

def _coupling_const(cb: CouplingBlocks, i, mu_A, mu_C):
    J, S, F = cb.J[i], cb.S[i], cb.F[i]
    EA = np.tile(mu_A, (J.shape[0], 1))
    EC = np.tile(mu_C, (S.shape[0], 1))
    cross = EA.T @ F @ EC
    return np.sum(J) * np.outer(mu_A, mu_A) + np.sum(S) * np.outer(mu_C, mu_C) + cross + cross.T


def build_coupling_design(cb: CouplingBlocks, mu_A, mu_C, bounds: DesignBounds):
    mu_A, mu_C = np.asarray(mu_A, float), np.asarray(mu_C, float)
    n = mu_A.size
    if bounds.Theta_A is None or bounds.Theta_C is None or bounds.Theta_i is None:
        raise ValueError("coupling design needs Theta_A, Theta_C and Theta_i")
    if np.shape(bounds.Theta_A) != (n, n) or np.shape(bounds.Theta_C) != (n, n):
        raise ValueError(f"Theta_A and Theta_C must be {n}x{n}")
    lmis = [LMI("upper_A", bounds.Theta_A, [("scaled", "Sigma_A", -1.0)]),
            LMI("upper_C", bounds.Theta_C, [("scaled", "Sigma_C", -1.0)])]
    for i in range(len(cb.J)):
        lmis.append(LMI(f"step_{i}", _coupling_const(cb, i, mu_A, mu_C),
                        [("scaled", "Sigma_A", float(np.trace(cb.J[i]))),
                         ("scaled", "Sigma_C", float(np.trace(cb.S[i]))),
                         ("scalar", "gamma", -np.atleast_2d(bounds.Theta_i[i]))]))
    return SdpProblem(["gamma"], {"Sigma_A": n, "Sigma_C": n}, lmis, {"gamma": 1.0})


def baseline_iid_coupling(cb: CouplingBlocks, mu_A, mu_C, bounds: DesignBounds, gamma_star, **kw):
    """max xi1 + xi2 with Sigma_A = xi1 I, Sigma_C = xi2 I and the gamma* constraints pinned."""
    mu_A, mu_C = np.asarray(mu_A, float), np.asarray(mu_C, float)
    n = mu_A.size
    I = np.eye(n)
    lmis = [LMI("upper_A", bounds.Theta_A, [("scalar", "xi1", -I)]),
            LMI("upper_C", bounds.Theta_C, [("scalar", "xi2", -I)])]
    for i in range(len(cb.J)):
        const = _coupling_const(cb, i, mu_A, mu_C) - gamma_star * np.atleast_2d(bounds.Theta_i[i])
        lmis.append(LMI(f"step_{i}", const, [("scalar", "xi1", np.trace(cb.J[i]) * I),
                                            ("scalar", "xi2", np.trace(cb.S[i]) * I)]))
    sol = solve_sdp(SdpProblem(["xi1", "xi2"], {}, lmis, {"xi1": 1.0, "xi2": 1.0}), **kw)
    if sol.status in ("optimal", "optimal_inaccurate"):
        sol.values["Sigma_A"] = sol.values["xi1"] * I
        sol.values["Sigma_C"] = sol.values["xi2"] * I
    return sol


# -- nonlinearity covariance -------------------------------------------------------

def build_nonlinearity_design(S_blocks, mu_G, bounds: DesignBounds):
    """max beta s.t. Sigma_G <= M and Tr((Sigma_G + mu mu') S_ii) >= beta for each i."""
    mu_G = np.asarray(mu_G, float)
    mt = mu_G.size
    if bounds.M_G is None:
        raise ValueError("nonlinearity design needs the bound M")
    if np.shape(bounds.M_G) != (mt, mt):
        raise ValueError(f"M must be {mt}x{mt}")
    lmis = [LMI("upper_G", bounds.M_G, [("scaled", "Sigma_G", -1.0)])]
    for i, S in enumerate(S_blocks):
        S = np.atleast_2d(S)
        lmis.append(LMI(f"step_{i}", [[float(mu_G @ S @ mu_G)]],
                        [("trace", "Sigma_G", S), ("scalar", "beta", -np.eye(1))]))
    return SdpProblem(["beta"], {"Sigma_G": mt}, lmis, {"beta": 1.0})


def baseline_iid_nonlinearity(M):
    """Largest phi with phi I <= M."""
    M = np.atleast_2d(M)
    if not is_psd(M):
        raise ValueError("M must be symmetric PSD")
    return max(float(np.linalg.eigvalsh(symmetrize(M)).min()), 0.0)

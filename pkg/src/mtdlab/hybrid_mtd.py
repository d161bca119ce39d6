"""Identifiability checks for the switched (hybrid) moving target and the
per-sensor identification pipeline."""
import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .detection import SensorDetectorState, sensor_chi2_update, threshold_for_far
from .estimation import FusionState, decompose_sensor, fusion_step
from .model_core import HybridModeSet, NoiseStreams, numerical_rank, observability_matrix, step_hybrid


def observability_ladder(A, C, s, depth):
    """Rows C^s, C^s A, ..., C^s A^(depth-1) for sensor s (0-based)."""
    Cs = np.atleast_2d(np.atleast_2d(C)[s])
    return observability_matrix(A, Cs, depth)


# -- identifiability on a realized mode sequence ----------------------------------

@dataclass
class Verdict:
    status: str                         # "identifiable", "ambiguous" or "no_attack"
    x0: Optional[np.ndarray] = None     # least-squares initial condition
    residual: float = 0.0
    first_step: int = -1                # first t at which the signal stops being explainable

    @property
    def identifiable(self):
        return self.status == "identifiable"


def stacked_map(maps):
    """Rows C_t Phi(t, 0) for a sequence of (A_t, C_t) pairs."""
    n = np.atleast_2d(maps[0][0]).shape[0]
    Phi = np.eye(n)
    rows = []
    for A, C in maps:
        rows.append(np.atleast_2d(C) @ Phi)
        Phi = np.atleast_2d(A) @ Phi
    return np.vstack(rows)


def check_identifiable_t(signal, maps, tol=1e-8):
    """Can the sensor signal be explained by a healthy initial condition?

    ``signal[t]`` is the attack-induced part of the sensor output at step t
    (equivalently the output with the healthy contribution removed) and
    ``maps[t] = (A_t, C_t^s)`` the realized mode.  Returns ``ambiguous`` when
    some x0* reproduces the signal to ``tol`` (relative) and the fit is nonzero.
    """
    d = np.asarray(signal, dtype=float).reshape(len(maps), -1)
    scale = max(1.0, np.abs(d).max())
    if np.abs(d).max() <= tol * scale:
        return Verdict("no_attack")
    first = -1
    for t in range(1, len(maps) + 1):
        O = stacked_map(maps[:t])
        x0, *_ = np.linalg.lstsq(O, d[:t].ravel(), rcond=None)
        res = float(np.linalg.norm(O @ x0 - d[:t].ravel()))
        if res > tol * scale:
            first = t - 1
            return Verdict("identifiable", x0, res, first)
    return Verdict("ambiguous", x0, res, first)


# -- Jordan structure ---------------------------------------------------------------

@dataclass
class EigenStructure:
    eigenvalues: list            # distinct (clustered) eigenvalues
    chains: dict                 # index into eigenvalues -> list of (n x r) chain matrices [v_1 .. v_r]
    multiplicity: list
    cluster_tol: float

    def lengths(self, i):
        return [c.shape[1] for c in self.chains[i]]

    def max_length(self, i):
        return max(self.lengths(i))


def cluster_tolerance(A):
    """Defective eigenvalues split by about (eps ||A||)^(1/r); allow for the worst case r = n."""
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A, 2))
    return max(1e-8 * scale, 10.0 * (np.finfo(float).eps * scale) ** (1.0 / n))


def _cluster(vals, tol):
    groups = []
    for v in sorted(vals, key=lambda z: (z.real, z.imag)):
        for g in groups:
            if abs(v - np.mean(g)) <= tol:
                g.append(v)
                break
        else:
            groups.append([v])
    return groups


def _null(M, tol):
    _, s, Vh = np.linalg.svd(M)
    r = int(np.sum(s > tol))
    return Vh[r:].conj().T


def _orth(M, tol):
    if M.shape[1] == 0:
        return M
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    return U[:, :int(np.sum(s > tol))]


def jordan_chains(A, tol=None, rank_tol=1e-8):
    """Jordan chains for every distinct eigenvalue of A.

    Chains come from the nested kernels of (A - lambda I)^j: tops are picked
    greedily from the longest length down as complements of the lower kernel
    plus the images of longer chains.
    """
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    tol = cluster_tolerance(A) if tol is None else tol
    groups = _cluster(np.linalg.eigvals(A), tol)
    normA = max(1.0, np.linalg.norm(A, 2))
    eigs, chains, mult = [], {}, []
    for gi, g in enumerate(groups):
        lam = complex(np.mean(g))
        if abs(lam.imag) <= tol:
            lam = complex(lam.real, 0.0)
        a = len(g)
        Nm = A - lam * np.eye(n)
        kernels = [np.zeros((n, 0), dtype=complex)]
        P = np.eye(n, dtype=complex)
        for j in range(1, a + 1):
            P = Nm @ P
            kernels.append(_null(P, rank_tol * normA ** j))
            if kernels[-1].shape[1] >= a:
                break
        if kernels[-1].shape[1] != a:
            raise np.linalg.LinAlgError(
                f"eigenvalue cluster near {lam:.6g} has multiplicity {a} but generalized eigenspace of "
                f"dimension {kernels[-1].shape[1]}; adjust the clustering or rank tolerance")
        depth = len(kernels) - 1
        found = []                                   # (top vector, length)
        for j in range(depth, 0, -1):
            span = [kernels[j - 1]]
            for top, r in found:
                span.append((np.linalg.matrix_power(Nm, r - j) @ top)[:, None])
            S = _orth(np.hstack(span), 1e-8)
            Kj = kernels[j]
            resid = Kj - S @ (S.conj().T @ Kj) if S.shape[1] else Kj
            U, s, _ = np.linalg.svd(resid, full_matrices=False)
            need = (kernels[j].shape[1] - kernels[j - 1].shape[1]) - sum(1 for _, r in found if r > j)
            if need < 0 or (need and s[need - 1] <= 1e-8):
                raise np.linalg.LinAlgError(f"inconsistent Jordan structure near {lam:.6g}; adjust tolerance")
            for q in range(need):
                found.append((U[:, q], j))
        mats = []
        for top, r in found:
            cols = [top]
            for _ in range(r - 1):
                cols.append(Nm @ cols[-1])
            V = np.column_stack(cols[::-1])          # [v_1 .. v_r], v_1 an eigenvector
            err = np.linalg.norm(A @ V[:, 1:] - lam * V[:, 1:] - V[:, :-1]) if r > 1 else 0.0
            err = max(err, np.linalg.norm(A @ V[:, 0] - lam * V[:, 0]))
            if err > max(1e-6, 1e3 * tol) * normA:
                raise np.linalg.LinAlgError(f"Jordan chain check failed near {lam:.6g} (error {err:.3g})")
            mats.append(V)
        eigs.append(lam)
        chains[gi] = mats
        mult.append(a)
    return EigenStructure(eigs, chains, mult, tol)


def build_V(es: EigenStructure, i, Cs, rows=None):
    """Stacked upper-triangular Toeplitz blocks for eigenvalue i; block (d, q) is C^s v_(q-d)."""
    Cs = np.atleast_2d(Cs)
    rM = es.max_length(i) if rows is None else rows
    ms = Cs.shape[0]
    blocks = []
    for V in es.chains[i]:
        r = V.shape[1]
        out = np.zeros((rM * ms, r), dtype=complex)
        CV = Cs @ V
        for d in range(r):
            for q in range(d, r):
                out[d * ms:(d + 1) * ms, q] = CV[:, q - d]
        blocks.append(out)
    return np.hstack(blocks)


def _nullity(M, tol):
    return M.shape[1] - numerical_rank(M, tol)


@dataclass
class EigenTestOutcome:
    exists_unidentifiable: bool
    witness: Optional[tuple] = None     # (eigenvalue in mode 1, eigenvalue in mode 2)


def eigen_identifiability_test(mode1, mode2, s, tol=None, rank_tol=None):
    """Is there an attack on sensor s, generated with mode 2 while mode 1 runs,
    that stays unidentifiable forever?  Shared eigenvalues are compared through
    the null spaces of their chain matrices, zero padded to a common height."""
    (A1, C1), (A2, C2) = mode1, mode2
    C1s = np.atleast_2d(np.atleast_2d(C1)[s])
    C2s = np.atleast_2d(np.atleast_2d(C2)[s])
    e1 = jordan_chains(A1, tol)
    e2 = jordan_chains(A2, tol)
    match = max(e1.cluster_tol, e2.cluster_tol)
    for i1, l1 in enumerate(e1.eigenvalues):
        for i2, l2 in enumerate(e2.eigenvalues):
            if abs(l1 - l2) > match:
                continue
            rows = max(e1.max_length(i1), e2.max_length(i2))
            V1 = build_V(e1, i1, C1s, rows)
            V2 = build_V(e2, i2, C2s, rows)
            both = np.hstack([V1, V2])
            rt = rank_tol
            if rt is None:
                rt = max(both.shape) * np.finfo(float).eps * max(1.0, np.linalg.norm(both, 2)) * 1e3
            if _nullity(both, rt) > _nullity(V1, rt) + _nullity(V2, rt):
                return EigenTestOutcome(True, (l1, l2))
    return EigenTestOutcome(False, None)


def output_matching_search(mode1, mode2, s, horizon=None, tol=1e-9):
    """Brute-force oracle: do nonzero output sequences of the two modes coincide
    over ``horizon`` (default 2n) steps?  Checks whether the ranges of the two
    observability maps intersect."""
    (A1, C1), (A2, C2) = mode1, mode2
    n = np.atleast_2d(A1).shape[0]
    horizon = 2 * n if horizon is None else horizon
    O1 = observability_ladder(A1, C1, s, horizon)
    O2 = observability_ladder(A2, C2, s, horizon)
    scale = max(1.0, np.abs(O1).max(), np.abs(O2).max())
    t = tol * scale * horizon
    # least-squares feasibility of O1 x1 = O2 x2 with O2 x2 != 0
    B1 = _orth(O1, t)
    B2 = _orth(O2, t)
    if B1.shape[1] == 0 or B2.shape[1] == 0:
        return False
    cosines = np.linalg.svd(B1.T @ B2, compute_uv=False)
    return bool(cosines.size and cosines[0] > 1 - 1e-8)


def attack_unidentifiable(modes: HybridModeSet, s, tol=None):
    """OR of the pairwise test over ordered mode pairs."""
    for i, (A1, _, C1) in enumerate(modes.modes):
        for j, (A2, _, C2) in enumerate(modes.modes):
            if i != j and eigen_identifiability_test((A1, C1), (A2, C2), s, tol).exists_unidentifiable:
                return True
    return False


# -- design recommendations ---------------------------------------------------------

@dataclass
class RecommendationReport:
    checks: dict = field(default_factory=dict)    # name -> (ok, diagnostic)

    @property
    def ok(self):
        return all(ok for ok, _ in self.checks.values())

    def table(self):
        width = max(len(k) for k in self.checks)
        lines = [f"{'recommendation':<{width}}  status  detail"]
        for name, (ok, msg) in self.checks.items():
            lines.append(f"{name:<{width}}  {'pass' if ok else 'FAIL':<6}  {msg}")
        return "\n".join(lines)


def validate_recommendations(modes: HybridModeSet, tol=1e-8):
    n = modes.n
    spectra = [np.linalg.eigvals(A) for A, _, _ in modes.modes]
    rep = RecommendationReport()

    gap = np.inf
    for i in range(len(spectra)):
        for j in range(i + 1, len(spectra)):
            gap = min(gap, np.abs(spectra[i][:, None] - spectra[j][None, :]).min())
    rep.checks["disjoint_spectra"] = (bool(gap > tol), f"min eigenvalue gap across modes {gap:.3g}")

    rep.checks["dwell_time"] = (modes.dwell >= 2 * n, f"kappa = {modes.dwell}, need >= {2 * n}")

    random_sched = modes.schedule_seed is not None and modes.n_modes > 1
    detail = "seeded IID schedule" if random_sched else "schedule is constant or deterministic"
    rep.checks["unguessable_schedule"] = (random_sched, detail)

    ranks = [numerical_rank(observability_matrix(A, C)) for A, _, C in modes.modes]
    rep.checks["observable_modes"] = (all(r == n for r in ranks), f"observability ranks {ranks} (n = {n})")

    smallest = min(np.abs(sp).min() for sp in spectra)
    rep.checks["no_zero_eigenvalue"] = (bool(smallest > tol), f"smallest |eigenvalue| {smallest:.3g}")
    return rep


# -- identification pipeline ---------------------------------------------------------

@dataclass
class HybridScenario:
    modes: HybridModeSet
    Q: np.ndarray
    R: np.ndarray
    horizon: int = 300
    window: int = 10
    false_alarm_rate: float = 1e-5      # per window, per sensor
    exclude_after: int = 5
    attack_start: int = 50
    attack_stop: Optional[int] = None
    bias: float = 1.0
    P0: Optional[np.ndarray] = None

    @property
    def threshold(self):
        return threshold_for_far(self.window, self.false_alarm_rate)


def recommended_three_sensor(dwell=None, seed=0):
    """Two-state, two-mode, three-sensor design meeting every recommendation.

    Each sensor alone observes each mode so every per-sensor filter sees the
    full state.
    """
    A1 = np.array([[0.6, 0.2], [0.1, 0.8]])     # eigenvalues 0.527, 0.873
    A2 = np.array([[0.7, -0.1], [0.3, 0.5]])    # eigenvalues 0.6 +- 0.141i
    C1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    C2 = np.array([[1.0, 0.5], [0.4, 1.0], [1.0, -1.0]])
    modes = HybridModeSet(((A1, np.zeros((2, 0)), C1), (A2, np.zeros((2, 0)), C2)),
                          dwell=4 if dwell is None else dwell, schedule_seed=seed)
    return HybridScenario(modes, Q=0.01 * np.eye(2), R=0.01 * np.eye(3))


def identify_run(sc: HybridScenario, sensors=(), seed=0, record=None):
    """Simulate the switched plant with a constant bias on ``sensors`` and
    return the set of sensors the exclusion policy flags.

    ``record`` (a list) receives per-step rows (k, mode, g_1..g_m).
    """
    modes = sc.modes
    n, m = modes.n, modes.m
    sensors = tuple(sensors)
    decomps = [decompose_sensor(modes, s) for s in range(m)]
    fu = FusionState.initial(decomps, sc.Q, sc.R, P0=sc.P0)
    det = [SensorDetectorState(sc.window, sc.threshold, sc.exclude_after) for _ in range(m)]
    noise = NoiseStreams(seed, sc.Q, sc.R)
    P0 = np.eye(n) if sc.P0 is None else sc.P0
    x = np.linalg.cholesky(P0) @ np.random.default_rng([seed, 1]).standard_normal(n)
    for k in range(sc.horizon):
        on = k >= sc.attack_start and (sc.attack_stop is None or k < sc.attack_stop)
        atk = np.full(len(sensors), sc.bias) if on and sensors else None
        res = step_hybrid(modes, x, None, atk, sensors, k, noise.process(), noise.sensor())
        fu.excluded = {s for s in range(m) if det[s].excluded}
        _, z = fusion_step(fu, res.y_received, res.mode)
        for s in range(m):
            sensor_chi2_update(det[s], z[s], k)
        if record is not None:
            record.append([k, res.mode] + [d.g for d in det])
        x = res.state
    return {s for s in range(m) if det[s].excluded}


def write_identification_csv(path, rows, m):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "mode"] + [f"g_s{s + 1}" for s in range(m)])
        for r in rows:
            wr.writerow([int(r[0]), int(r[1])] + [repr(float(v)) for v in r[2:]])

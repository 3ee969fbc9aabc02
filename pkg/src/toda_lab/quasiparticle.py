"""Quasiparticle positions, local charges and currents, and the residuals of
the approximate identities that tie them to the Lax spectrum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, sparse
from scipy.special import logsumexp

from .lattice import FlaschkaState, TodaState, Trajectory, state_from_flaschka
from .localization import LocalizationAssignment
from .spectral import LaxMatrix, SpectralDecomposition, build_lax, coupling, eig_tridiag


# ---------------------------------------------------------------------------
# Positions
# ---------------------------------------------------------------------------

def quasiparticle_positions(assignment: LocalizationAssignment, state: TodaState) -> np.ndarray:
    """Q_k = q at the center site of eigenvalue k."""
    return state.q[assignment.phi - state.domain.n1]


def bulk_collar(n: int, T: float, fraction: float = 0.1, cap: float = 0.25) -> int:
    """Sites dropped at each end: max(fraction*N, T log N) with T log N capped at cap*N."""
    tl = T * math.log(n) if n > 1 else 0.0
    return int(math.ceil(max(fraction * n, min(tl, cap * n))))


def bulk_mask(phi: np.ndarray, n1: int, n2: int, collar: int) -> np.ndarray:
    return (phi >= n1 + collar) & (phi <= n2 - collar)


@dataclass(frozen=True)
class QuasiparticleTrack:
    lam: float
    times: np.ndarray
    positions: np.ndarray
    sites: np.ndarray
    bulk_flag: bool


def quasiparticle_tracks(traj: Trajectory, assignments: list[LocalizationAssignment],
                         eigenvalues: np.ndarray, collar: int) -> list[QuasiparticleTrack]:
    dom = traj.domain
    phi = np.array([a.phi for a in assignments])
    Q = np.array([traj.positions(s)[phi[s] - dom.n1] for s in range(len(traj))])
    bulk = bulk_mask(phi[0], dom.n1, dom.n2, collar)
    return [QuasiparticleTrack(float(eigenvalues[k]), traj.times, Q[:, k], phi[:, k], bool(bulk[k]))
            for k in range(len(eigenvalues))]


# ---------------------------------------------------------------------------
# Local charges and currents
# ---------------------------------------------------------------------------

def _window_power_column(L: LaxMatrix, i: int, m: int) -> tuple[np.ndarray, list]:
    """Column i of L^m restricted to the sites within distance m of i."""
    dom = L.domain
    n = L.n
    li = dom.local(i)
    if dom.periodic:
        if 2 * m + 1 >= n:
            idx = list(range(n))
        else:
            idx = [(li + o) % n for o in range(-m, m + 1)]
    else:
        idx = list(range(max(0, li - m), min(n - 1, li + m) + 1))
    M = np.array([[L.dense_entry(r, c) for c in idx] for r in idx])
    v = np.zeros(len(idx))
    v[idx.index(li)] = 1.0
    for _ in range(m):
        v = M @ v
    return v, idx


def local_charge(L: LaxMatrix, i: int, m: int) -> float:
    """[L^m]_{ii}."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    v, idx = _window_power_column(L, i, m)
    return float(v[idx.index(L.domain.local(i))])


def local_current(L: LaxMatrix, i: int, m: int) -> float:
    """a_{i-1} [L^m]_{i,i-1}; zero at the left end of an open interval."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    dom = L.domain
    if not dom.periodic and i == dom.n1:
        return 0.0
    if not dom.periodic and i == dom.n2 + 1:
        return 0.0
    a_prev = coupling(L, i - 1)
    if a_prev == 0.0:
        return 0.0
    # [L^m]_{i,i-1} = [L^m]_{i-1,i}: read row i-1 of column i
    v, idx = _window_power_column(L, i, m)
    lp = dom.local(i - 1)
    if lp not in idx:
        return 0.0
    return float(a_prev * v[idx.index(lp)])


@dataclass(frozen=True)
class ChargeCurrentField:
    m: int
    charges: np.ndarray
    currents: np.ndarray


def _sparse_lax(L: LaxMatrix) -> sparse.csr_matrix:
    n = L.n
    if L.domain.periodic:
        return sparse.csr_matrix(L.dense())
    return sparse.diags([L.offdiag, L.diag, L.offdiag], [-1, 0, 1], shape=(n, n), format="csr")


def charge_current_field(L: LaxMatrix, m: int) -> ChargeCurrentField:
    """All local charges and currents of order m.

    ``currents[i]`` is the current into local site i from the left; on an
    open interval ``currents[0] = 0``.
    """
    if m < 0:
        raise ValueError("m must be nonnegative")
    n = L.n
    S = _sparse_lax(L)
    P = sparse.identity(n, format="csr")
    for _ in range(m):
        P = P @ S
    P = P.toarray() if n <= 4096 else P
    kk = np.array(P.diagonal(), dtype=float)
    jj = np.zeros(n)
    if n > 1:
        idx = np.arange(1, n)
        jj[1:] = L.offdiag * np.asarray(P[idx, idx - 1]).ravel()
    if L.domain.periodic:
        if n == 1:
            jj[0] = L.corner * kk[0]
        else:
            jj[0] = L.corner * P[0, n - 1]
    return ChargeCurrentField(m, kk, jj)


def _field_series(traj: Trajectory, m: int) -> tuple[np.ndarray, np.ndarray]:
    K = []
    J = []
    for s in range(len(traj)):
        fld = charge_current_field(build_lax(traj.sample(s)), m)
        K.append(fld.charges)
        J.append(fld.currents)
    return np.array(K), np.array(J)


def _outflow(J: np.ndarray, periodic: bool) -> np.ndarray:
    """J_i - J_{i+1} along the last axis (no current past an open right end)."""
    right = np.roll(J, -1, axis=-1)
    if not periodic:
        right[..., -1] = 0.0
    return J - right


def charge_continuity_residual(traj: Trajectory, i: int, m: int) -> float:
    """max over interior samples of |dk_i/dt - (j_i - j_{i+1})|, central differences."""
    if len(traj) < 3:
        raise ValueError("need at least 3 samples")
    t = traj.times
    li = traj.domain.local(i)
    K, J = _field_series(traj, m)
    flux = _outflow(J, traj.domain.periodic)[:, li]
    dk = (K[2:, li] - K[:-2, li]) / (t[2:] - t[:-2])
    return float(np.max(np.abs(dk - flux[1:-1])))


def continuity_m1_gap(f: FlaschkaState) -> float:
    """max|(j_i - j_{i+1}) - db_i/dt| for m = 1; the two are the same expression."""
    from .lattice import toda_rhs

    fld = charge_current_field(build_lax(f), 1)
    _, db = toda_rhs(f)
    return float(np.max(np.abs(_outflow(fld.currents, f.domain.periodic) - db)))


@dataclass(frozen=True)
class WindowSums:
    charge_sum: float
    eig_sum: float
    residual: float
    relative_residual: float
    particles: int
    quasiparticles: int


def charge_window_vs_eigsum(sample: FlaschkaState, assignment: LocalizationAssignment,
                            eigenvalues: np.ndarray, window: tuple[float, float],
                            m: int) -> WindowSums:
    """Compare sum of k_i over particles in a position window with sum of lambda^m
    over quasiparticles in the same window.

    The relative residual divides by sum |k_i| over the window's particles.
    """
    lo, hi = window
    state = state_from_flaschka(sample)
    q = state.q
    inside = (q >= lo) & (q <= hi)
    if not inside.any():
        raise ValueError("empty window")
    fld = charge_current_field(build_lax(sample), m)
    Q = quasiparticle_positions(assignment, state)
    qin = (Q >= lo) & (Q <= hi)
    cs = float(np.sum(fld.charges[inside]))
    es = float(np.sum(np.asarray(eigenvalues)[qin] ** m))
    res = abs(cs - es)
    scale = float(np.sum(np.abs(fld.charges[inside])))
    rel = res / scale if scale > 0 else (0.0 if res == 0 else math.inf)
    return WindowSums(cs, es, res, rel, int(inside.sum()), int(qin.sum()))


def bulk_window_residuals(sample: FlaschkaState, dec: SpectralDecomposition,
                          assignment: LocalizationAssignment, width: float, m: int,
                          central: float = 0.5) -> np.ndarray:
    """Relative window residuals for consecutive position windows of ``width``
    tiling the central fraction of the particles."""
    q = state_from_flaschka(sample).q
    n = len(q)
    lo_i = int((0.5 - central / 2) * n)
    hi_i = int((0.5 + central / 2) * n) - 1
    lo, hi = float(min(q[lo_i], q[hi_i])), float(max(q[lo_i], q[hi_i]))
    out = []
    for e in np.arange(lo, hi - width, width):
        try:
            w = charge_window_vs_eigsum(sample, assignment, dec.eigenvalues,
                                        (float(e), float(e + width)), m)
        except ValueError:
            continue
        out.append(w.relative_residual)
    return np.array(out)


@dataclass(frozen=True)
class FluxReport:
    integrated_current: float
    flux_now: float
    flux_start: float
    residual: float
    exact_residual: float
    under_resolved: bool


def integrated_current_vs_flux(traj: Trajectory, k_site: int, m: int,
                               assignments: tuple[LocalizationAssignment, LocalizationAssignment],
                               eigenvalues: np.ndarray, upto: int = -1) -> FluxReport:
    """Time-integrated current through site k versus the change in the spectral
    mass of quasiparticles to the left of the tracer particle k.

    ``exact_residual`` uses the particle charges to the left of k instead of
    quasiparticles and vanishes up to quadrature error.
    """
    n_s = len(traj)
    stop = n_s if upto == -1 else upto + 1
    lk = traj.domain.local(k_site)
    K, J = _field_series(traj, m)
    t = traj.times[:stop]
    jk = J[:stop, lk]
    if stop == 1:
        integ = 0.0
        under = False
    else:
        integ = float(integrate.trapezoid(jk, t))
        if stop >= 3:
            simp = float(integrate.simpson(jk, x=t))
            under = abs(simp - integ) > 1e-3 * max(1.0, abs(integ))
        else:
            under = False
    lam_m = np.asarray(eigenvalues) ** m
    s0 = state_from_flaschka(traj.sample(0))
    st = state_from_flaschka(traj.sample(stop - 1))
    Q0 = quasiparticle_positions(assignments[0], s0)
    Qt = quasiparticle_positions(assignments[1], st)
    flux_start = float(np.sum(lam_m[Q0 < s0.q[lk]]))
    flux_now = float(np.sum(lam_m[Qt < st.q[lk]]))
    exact = integ + float(np.sum(K[stop - 1, :lk])) - float(np.sum(K[0, :lk]))
    return FluxReport(integ, flux_now, flux_start, integ + flux_now - flux_start, exact, under)


# ---------------------------------------------------------------------------
# First-entry (Moser) evolution and eigenvector decay relations
# ---------------------------------------------------------------------------

def c_of_t(eigenvalues: np.ndarray, log_u_first0: np.ndarray, t: float) -> float:
    """log sum_j exp(-lambda_j t) u_j(first; 0)^2, evaluated stably."""
    return float(logsumexp(-np.asarray(eigenvalues) * t + 2.0 * np.asarray(log_u_first0)))


@dataclass(frozen=True)
class MoserReport:
    times: np.ndarray
    residuals: np.ndarray     # (samples, N): |log u_k(first;t)^2 - closed form|
    c_t: np.ndarray
    anchor_residual: np.ndarray   # |q_first(0) - q_first(t) - C(t)|


def moser_first_entry_check(traj: Trajectory, dec0: SpectralDecomposition | None = None,
                            decompositions: list | None = None) -> MoserReport:
    """Compare first eigenvector entries along the flow with their closed-form evolution."""
    if traj.domain.periodic:
        raise ValueError("first-entry evolution needs an open domain")
    if decompositions is None:
        decompositions = [eig_tridiag(build_lax(s)) for s in traj.samples]
    if dec0 is None:
        dec0 = decompositions[0]
    lam = dec0.eigenvalues
    lu0 = dec0.log_abs[:, 0]
    res = []
    cs = []
    anch = []
    q0 = traj.q_first[0]
    for s, dec in enumerate(decompositions):
        t = traj.times[s] - traj.times[0]
        c = c_of_t(lam, lu0, t)
        pred = -lam * t + 2.0 * lu0 - c
        res.append(np.abs(2.0 * dec.log_abs[:, 0] - pred))
        cs.append(c)
        anch.append(abs(q0 - traj.q_first[s] - c))
    return MoserReport(np.asarray(traj.times), np.array(res), np.array(cs), np.array(anch))


@dataclass(frozen=True)
class DecayRelation:
    log_entry: float
    coupling_sum: float
    gap_sum: float
    residual: float


def eigvec_decay_relation_residual(dec: SpectralDecomposition, assignment: LocalizationAssignment,
                                   k: int, side: str = "left") -> DecayRelation:
    """log|u_k(end)| - sum of log couplings between the end and phi(k)
    + sum of log|lambda_i - lambda_k| over i centered on the same side.

    The residual is signed; left and right residuals add up to the signed
    defect of the two-end identity.
    """
    L = dec.matrix
    n1 = L.domain.n1
    c = int(assignment.phi[k]) - n1
    lam = dec.eigenvalues
    logs = np.log(np.abs(np.delete(lam, k) - lam[k]))
    others = np.delete(assignment.phi - n1, k)
    if side == "left":
        entry = float(dec.log_abs[k, 0])
        cs = float(np.sum(np.log(L.offdiag[:c])))
        gs = float(np.sum(logs[others < c]))
    elif side == "right":
        entry = float(dec.log_abs[k, -1])
        cs = float(np.sum(np.log(L.offdiag[c:])))
        gs = float(np.sum(logs[others > c]))
    else:
        raise ValueError("side must be 'left' or 'right'")
    return DecayRelation(entry, cs, gs, entry - cs + gs)


# ---------------------------------------------------------------------------
# Scattering relation
# ---------------------------------------------------------------------------

def _ranks(Q: np.ndarray, sites: np.ndarray) -> np.ndarray:
    order = np.lexsort((sites, Q))
    r = np.empty(len(Q), dtype=int)
    r[order] = np.arange(len(Q))
    return r


def _ties(Q: np.ndarray, tol: float = 1e-12) -> int:
    s = np.sort(Q)
    return int(np.sum(np.diff(s) <= tol))


@dataclass(frozen=True)
class ScatteringReport:
    t: float
    eigenvalues: np.ndarray
    Q0: np.ndarray
    Qt: np.ndarray
    residual: np.ndarray
    normalized_residual: np.ndarray
    scale: np.ndarray
    bulk: np.ndarray
    collar: int
    c_t: float
    anchor_residual: float
    ties: int
    residual_site_order: np.ndarray

    def median_normalized_bulk(self) -> float:
        return float(np.median(self.normalized_residual[self.bulk])) if self.bulk.any() else math.nan


def scattering_report(eigenvalues: np.ndarray, assign0: LocalizationAssignment,
                      assign_t: LocalizationAssignment, state0: TodaState, state_t: TodaState,
                      alpha: float, collar: int | None = None,
                      log_u_first0: np.ndarray | None = None) -> ScatteringReport:
    """Residual of the asymptotic scattering relation for every k.

    r_k = lambda_k t - Q_k(t) + Q_k(0) - 2 s sum_{Q_i(t) < Q_k(t)} log|lambda_k - lambda_i|
          + 2 s sum_{Q_i(0) < Q_k(0)} log|lambda_k - lambda_i|,  s = sign(alpha).
    Q-ties are broken by site index.
    """
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    lam = np.asarray(eigenvalues, dtype=float)
    n = len(lam)
    dom = state0.domain
    t = state_t.t - state0.t
    if collar is None:
        collar = bulk_collar(n, t)
    Q0 = quasiparticle_positions(assign0, state0)
    Qt = quasiparticle_positions(assign_t, state_t)
    D = np.abs(lam[:, None] - lam[None, :])
    np.fill_diagonal(D, 1.0)
    ell = np.log(D)
    r0 = _ranks(Q0, assign0.phi)
    rt = _ranks(Qt, assign_t.phi)
    left0 = np.sum(np.where(r0[None, :] < r0[:, None], ell, 0.0), axis=1)
    leftt = np.sum(np.where(rt[None, :] < rt[:, None], ell, 0.0), axis=1)
    s = math.copysign(1.0, alpha)
    res = lam * t - Qt + Q0 - 2.0 * s * leftt + 2.0 * s * left0
    # same relation with the ordering taken from center sites instead of positions
    p0, pt = assign0.phi, assign_t.phi
    site0 = np.sum(np.where(p0[None, :] < p0[:, None], ell, 0.0), axis=1)
    sitet = np.sum(np.where(pt[None, :] < pt[:, None], ell, 0.0), axis=1)
    res_site = lam * t - Qt + Q0 - 2.0 * s * sitet + 2.0 * s * site0
    bulk = bulk_mask(assign0.phi, dom.n1, dom.n2, collar)
    disp = np.abs(Qt - Q0)
    sel = disp[bulk] if bulk.any() else disp
    iqr = float(np.subtract(*np.percentile(sel, [75, 25]))) if len(sel) else 0.0
    scale = np.maximum(np.abs(lam) * t, iqr)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.where(scale > 0, np.abs(res) / scale, 0.0)
    c_t = math.nan
    anchor = math.nan
    if log_u_first0 is not None:
        c_t = c_of_t(lam, log_u_first0, t)
        anchor = abs(state0.q[0] - state_t.q[0] - c_t)
    return ScatteringReport(t, lam, Q0, Qt, res, norm, scale, bulk, collar, c_t, anchor,
                            _ties(Qt) + _ties(Q0), res_site)


def scattering_residual(eigenvalues, assign0, assign_t, state0, state_t, alpha, k: int,
                        collar: int | None = None) -> float:
    """Residual of the scattering relation for a single k."""
    rep = scattering_report(eigenvalues, assign0, assign_t, state0, state_t, alpha, collar)
    return float(rep.residual[k])

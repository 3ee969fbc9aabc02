"""Localization centers of Lax eigenvectors and their bijections to sites."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .lattice import Trajectory
from .matching import hopcroft_karp, matching_size
from .spectral import LaxMatrix, SpectralDecomposition, build_lax, eig_tridiag, zero_out

# log|u| below this counts as "at the floor" (exact zeros from block splits)
LOG_FLOOR = -700.0


class NoBijection(ValueError):
    def __init__(self, zeta: float, size: int, n: int):
        super().__init__(f"no zeta-bijection at zeta={zeta:.4g}; max matching size = {size} of {n}")
        self.max_matching = size


class TrackingError(RuntimeError):
    """Eigenvalue identity tracking unreliable."""


def default_zeta(n: int) -> float:
    return 1.0 / (2.0 * n)


@dataclass(frozen=True)
class LocalizationAssignment:
    """``phi[k]`` is the site label of the center of eigenvalue k (descending order)."""

    zeta: float
    phi: np.ndarray
    witness: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=int)
        w = np.array(self.witness, dtype=float)
        if len(np.unique(phi)) != len(phi):
            raise ValueError("phi is not injective")
        if np.any(w < self.zeta):
            raise ValueError("witness below zeta")
        phi.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "witness", w)

    def permuted(self, perm) -> "LocalizationAssignment":
        return LocalizationAssignment(self.zeta, self.phi[perm], self.witness[perm])


def centers(dec: SpectralDecomposition, j: int, zeta: float) -> np.ndarray:
    """Sites i with |u_j(i)| >= zeta."""
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    n1 = dec.matrix.domain.n1
    return np.flatnonzero(np.abs(dec.eigenvectors[j]) >= zeta) + n1


def _admissible(dec: SpectralDecomposition, zeta: float) -> np.ndarray:
    return np.abs(dec.eigenvectors) >= zeta


def _hk(adm: np.ndarray) -> list[int]:
    adj = [np.flatnonzero(row).tolist() for row in adm]
    return hopcroft_karp(adj, adm.shape[1])


def max_matching_size(dec: SpectralDecomposition, zeta: float) -> int:
    return matching_size(_hk(_admissible(dec, zeta)))


def center_bijection(dec: SpectralDecomposition, zeta: float | None = None,
                     weighted: bool = True) -> LocalizationAssignment:
    """A perfect matching of eigenvalues to sites inside {|u_k(i)| >= zeta}.

    Existence is decided by Hopcroft-Karp. With ``weighted`` the matching
    maximizing sum_k log|u_k(phi(k))| among all admissible ones is returned.
    """
    n = dec.n
    if zeta is None:
        zeta = default_zeta(n)
    adm = _admissible(dec, zeta)
    match = _hk(adm)
    size = matching_size(match)
    if size < n:
        raise NoBijection(zeta, size, n)
    match = np.array(match)
    if weighted:
        with np.errstate(divide="ignore"):
            cost = -np.log(np.abs(dec.eigenvectors))
        # inadmissible pairs get a penalty no admissible matching can reach
        penalty = 1.0 + n * (-math.log(zeta) + 1.0)
        cost = np.where(adm, cost, penalty)
        _, cols = linear_sum_assignment(cost)
        if np.all(adm[np.arange(n), cols]):
            match = cols
    witness = np.abs(dec.eigenvectors[np.arange(n), match])
    return LocalizationAssignment(zeta, match + dec.matrix.domain.n1, witness)


def hall_unitarity_residual(dec: SpectralDecomposition, sites) -> float:
    """|sum_{i in I} sum_k u_k(i)^2 - |I||, the counting identity behind existence."""
    idx = np.asarray(list(sites), dtype=int) - dec.matrix.domain.n1
    total = float(np.sum(dec.eigenvectors[:, idx] ** 2))
    return abs(total - len(idx))


@dataclass(frozen=True)
class DecayProfile:
    center: int
    rate: float
    residual: float
    floor_fraction: float
    collar: int


def default_collar(n: int) -> int:
    return int(math.ceil(math.log(n) ** 2 / 2.0)) if n > 1 else 0


def decay_profile(dec: SpectralDecomposition, j: int, assignment: LocalizationAssignment,
                  collar: int | None = None) -> DecayProfile:
    """Least-squares fit of log|u_j(i)| ~ c0 - rate * |i - phi(j)| off a collar.

    The rate is clipped at 0; a vector with every off-collar entry at the
    floor reports rate = +inf.
    """
    n = dec.n
    if collar is None:
        collar = default_collar(n)
    center = int(assignment.phi[j])
    sites = np.arange(n) + dec.matrix.domain.n1
    dist = np.abs(sites - center)
    keep = dist >= collar
    keep[center - dec.matrix.domain.n1] = False
    lg = dec.log_abs[j][keep]
    x = dist[keep].astype(float)
    floor = lg <= LOG_FLOOR
    floor_fraction = float(floor.mean()) if lg.size else 0.0
    usable = ~floor
    if lg.size and not usable.any():
        return DecayProfile(center, math.inf, 0.0, 1.0, collar)
    if usable.sum() < 4:
        raise ValueError("profile underdetermined")
    x, y = x[usable], lg[usable]
    A = np.column_stack((np.ones_like(x), -x))
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return DecayProfile(center, max(float(coef[1]), 0.0), resid, floor_fraction, collar)


@dataclass(frozen=True)
class CenterTrack:
    times: np.ndarray
    eigenvalues: np.ndarray
    phi: np.ndarray                 # (samples, N) site labels
    assignments: list
    step_displacement: np.ndarray   # max_k |phi_{s+1}(k) - phi_s(k)| per step
    max_displacement: float         # max_k max_s |phi_s(k) - phi_0(k)|
    center_spread: np.ndarray       # per k, max over samples of the zeta-center set diameter
    identity_drift: float


def track_centers(traj: Trajectory, zeta: float | None = None,
                  decompositions: list | None = None) -> CenterTrack:
    """Center bijection at every sample with eigenvalue identity held fixed.

    Eigenvalues are conserved, so index k in descending order names the same
    quasiparticle at all times provided the drift stays below half the
    smallest gap; otherwise tracking is refused.
    """
    if decompositions is None:
        decompositions = [eig_tridiag(build_lax(s)) for s in traj.samples]
    lam0 = decompositions[0].eigenvalues
    n = len(lam0)
    if zeta is None:
        zeta = default_zeta(n)
    drift = max(float(np.max(np.abs(d.eigenvalues - lam0))) for d in decompositions)
    min_gap = float(np.min(-np.diff(lam0))) if n > 1 else math.inf
    if drift > 0 and drift >= min_gap / 2:
        raise TrackingError(f"identity tracking unreliable: drift {drift:.3g} "
                            f">= half min gap {min_gap / 2:.3g}")
    assigns = [center_bijection(d, zeta) for d in decompositions]
    phi = np.array([a.phi for a in assigns])
    steps = np.max(np.abs(np.diff(phi, axis=0)), axis=1) if len(phi) > 1 else np.zeros(0)
    spread = np.zeros(n)
    for d in decompositions:
        for k in range(n):
            c = centers(d, k, zeta)
            spread[k] = max(spread[k], float(c.max() - c.min()))
    return CenterTrack(np.asarray(traj.times), lam0, phi, assigns, steps,
                       float(np.max(np.abs(phi - phi[0]))), spread, drift)


@dataclass(frozen=True)
class MatchedPair:
    mu: float
    lam: float
    gap: float
    center_mu: int
    center_lam: int
    ambiguous: bool


def truncation_eigen_match(L: LaxMatrix, ell: int, zeta: float | None = None,
                           dist_min: int = 1,
                           dec: SpectralDecomposition | None = None) -> list[MatchedPair]:
    """Pair eigenvalues of L with row/column ell removed to nearby eigenvalues of L.

    Only eigenvalues of the truncated matrix whose center lies at distance
    >= ``dist_min`` from ``ell`` are reported.
    """
    if dist_min < 1:
        raise ValueError("dist_min must be at least 1")
    if dec is None:
        dec = eig_tridiag(L)
    zeta = default_zeta(L.n) if zeta is None else zeta
    P = zero_out(L, [ell])
    dec_p = eig_tridiag(P)
    phi_l = center_bijection(dec, zeta).phi
    phi_p = center_bijection(dec_p, zeta).phi
    lam = dec.eigenvalues
    scale = max(1.0, float(np.max(np.abs(lam))))
    out = []
    for k, mu in enumerate(dec_p.eigenvalues):
        if abs(int(phi_p[k]) - ell) < dist_min:
            continue
        dist = np.abs(lam - mu)
        order = np.argsort(dist, kind="stable")
        best = order[0]
        amb = len(order) > 1 and dist[order[1]] - dist[best] <= 1e-12 * scale
        out.append(MatchedPair(float(mu), float(lam[best]), float(dist[best]),
                               int(phi_p[k]), int(phi_l[best]), bool(amb)))
    return out

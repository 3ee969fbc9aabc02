"""Divergence of Toda lattices on different domains started from shared data."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .lattice import Trajectory
from .thermal import ThermalParams, _as_generator, draw_a, sample_open


@dataclass(frozen=True)
class ComparisonMetrics:
    """Running suprema over ``window`` (site labels): G of the difference, H of 6x magnitudes."""

    times: np.ndarray
    G: np.ndarray
    H: np.ndarray
    window: tuple[int, int]


def overlap_divergence(traj_a: Trajectory, traj_b: Trajectory,
                       window: tuple[int, int]) -> ComparisonMetrics:
    if len(traj_a) != len(traj_b) or not np.allclose(traj_a.times, traj_b.times, rtol=0, atol=1e-12):
        raise ValueError("mismatched sampling")
    lo, hi = window
    ia = traj_a.domain.local(np.arange(lo, hi + 1))
    ib = traj_b.domain.local(np.arange(lo, hi + 1))
    da = np.abs(traj_a.a[:, ia] - traj_b.a[:, ib]).max(axis=1)
    db = np.abs(traj_a.b[:, ia] - traj_b.b[:, ib]).max(axis=1)
    mag = (np.abs(traj_a.a[:, ia]).max(axis=1) + np.abs(traj_b.a[:, ib]).max(axis=1)
           + np.abs(traj_a.b[:, ia]).max(axis=1) + np.abs(traj_b.b[:, ib]).max(axis=1))
    G = np.maximum.accumulate(da + db)
    H = 6.0 * np.maximum.accumulate(mag)
    return ComparisonMetrics(np.asarray(traj_a.times), G, H, (lo, hi))


def propagation_bound(T: float, K: int, G_outer: float, H_layers) -> float:
    """T^K / K! * G * prod H, evaluated in log space."""
    if G_outer == 0:
        return 0.0
    H_layers = np.asarray(H_layers, dtype=float)
    logb = (K * math.log(T) if T > 0 else (-math.inf if K > 0 else 0.0)) \
        - math.lgamma(K + 1) + math.log(G_outer) + float(np.sum(np.log(H_layers)))
    return math.exp(logb) if logb < 700 else math.inf


@dataclass(frozen=True)
class DecayTable:
    K: np.ndarray
    G: np.ndarray          # (replicas, len(K)) sup difference on [N1+K, N2-K] up to T
    H: np.ndarray
    median_G: np.ndarray
    rate: float

    def reference(self) -> np.ndarray:
        return np.exp(-self.K / 5.0)


def coupled_open_torus(params: ThermalParams, N: int, rng):
    """Shared thermal data for an open interval and a torus of the same N sites.

    The torus reuses every (a, b) of the open lattice and closes the loop with
    one fresh a-draw at the last site.
    """
    g = _as_generator(rng)
    f = sample_open(params, N, g, n1=0)
    closing = float(draw_a(params, 1, g)[0])
    return f, closing


def open_vs_periodic(params: ThermalParams, N: int, T: float, K_grid, rng,
                     replicas: int = 1, step: float = 1e-3) -> DecayTable:
    """Sup difference between the coupled open and periodic lattices per collar K.

    The difference is integrated directly (not as a subtraction of two
    trajectories), so values far below round-off of a and b stay meaningful.
    """
    g = _as_generator(rng)
    K = np.asarray(list(K_grid), dtype=int)
    if np.any(K < 0) or np.any(N - 1 - 2 * K < 0):
        raise ValueError("collar too large for the lattice")
    lo = K.astype(np.int64)
    hi = (N - 1 - K).astype(np.int64)
    nsteps = max(1, int(math.ceil(T / step - 1e-9)))
    h = T / nsteps if T > 0 else 0.0
    Gs = np.zeros((replicas, len(K)))
    Hs = np.zeros((replicas, len(K)))
    for r in range(replicas):
        f, closing = coupled_open_torus(params, N, g)
        a = np.array(f.a)
        b = np.array(f.b)
        da = np.zeros(N)
        db = np.zeros(N)
        da[N - 1] = closing
        gmax = np.zeros(len(K))
        hmax = np.zeros(len(K))
        # t = 0 contributes to the running suprema
        for w in range(len(K)):
            s = slice(lo[w], hi[w] + 1)
            gmax[w] = np.abs(da[s]).max() + np.abs(db[s]).max()
            hmax[w] = (np.abs(a[s]).max() + np.abs(a[s] + da[s]).max()
                       + np.abs(b[s]).max() + np.abs(b[s] + db[s]).max())
        if T > 0:
            _kernels.coupled_advance(a, b, da, db, h, nsteps, lo, hi, gmax, hmax)
        Gs[r] = gmax
        Hs[r] = 6.0 * hmax
    med = np.median(Gs, axis=0)
    return DecayTable(K, Gs, Hs, med, fitted_decay_rate(K, med))


def fitted_decay_rate(K, values) -> float:
    """Negative least-squares slope of log(values) against K (positive values only)."""
    K = np.asarray(K, dtype=float)
    v = np.asarray(values, dtype=float)
    ok = v > 0
    if ok.sum() < 2:
        return math.nan
    slope = np.polyfit(K[ok], np.log(v[ok]), 1)[0]
    return float(-slope)

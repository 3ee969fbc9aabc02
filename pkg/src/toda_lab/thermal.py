"""Thermal-equilibrium initial data and the statistics checked against it.

Under the thermal measure with inverse temperature beta and pressure-like
parameter theta, each a_i has density proportional to a^{2 theta - 1}
exp(-beta a^2), so a^2 ~ Gamma(theta, rate beta), and each b_i ~ N(0, 1/beta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .lattice import DomainSpec, FlaschkaState, IntegratorConfig, evolve, state_from_flaschka


def stretch_parameter(beta: float, theta: float) -> float:
    """alpha = log(beta) - digamma(theta), the mean spacing q_{i+1} - q_i."""
    if not (beta > 0 and theta > 0):
        raise ValueError("beta and theta must be positive")
    return float(math.log(beta) - special.digamma(theta))


@dataclass(frozen=True)
class ThermalParams:
    beta: float = 1.0
    theta: float = 1.0
    alpha: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", stretch_parameter(self.beta, self.theta))

    def require_nonzero_alpha(self, tol: float = 1e-12) -> None:
        if abs(self.alpha) <= tol:
            raise ValueError(f"degenerate thermal regime: alpha = {self.alpha:.3g}")


@dataclass(frozen=True)
class RngStream:
    """Independent, reproducible random stream keyed by (seed, stream_id)."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def draw_a(params: ThermalParams, size, rng: np.random.Generator) -> np.ndarray:
    return np.sqrt(rng.standard_gamma(params.theta, size) / params.beta)


def draw_b(params: ThermalParams, size, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(params.beta), size)


def sample_open(params: ThermalParams, N: int, rng, n1: int | None = None) -> FlaschkaState:
    """Thermal data on an open interval of N sites (centered unless n1 given).

    N-1 a-values are drawn; the last slot is exactly 0.
    """
    if N < 1:
        raise ValueError("N must be positive")
    g = _as_generator(rng)
    a = np.append(draw_a(params, N - 1, g), 0.0)
    b = draw_b(params, N, g)
    dom = DomainSpec.centered(N) if n1 is None else DomainSpec.open(n1, n1 + N - 1)
    return FlaschkaState(dom, a, b, 0.0)


def sample_periodic(params: ThermalParams, N: int, rng) -> FlaschkaState:
    """Thermal data on a torus of N sites; the period is the sum of spacings."""
    if N < 1:
        raise ValueError("N must be positive")
    g = _as_generator(rng)
    a = draw_a(params, N, g)
    b = draw_b(params, N, g)
    upsilon = float(-2.0 * np.sum(np.log(a)))
    return FlaschkaState(DomainSpec.torus(N, upsilon), a, b, 0.0, 0.0)


def sample_spacings(params: ThermalParams, size, rng) -> np.ndarray:
    """Independent spacings r = -2 log a."""
    g = _as_generator(rng)
    return -2.0 * np.log(draw_a(params, size, g))


@dataclass(frozen=True)
class SpacingSummary:
    mean_deviation: float
    max_deviation: float
    pairs: int


def spacing_statistics(q: np.ndarray, alpha: float, max_lag: int | None = None,
                       lags=None) -> SpacingSummary:
    """Deviation of q_j - q_i from alpha (j - i) over pairs with lag in ``lags``.

    By default every lag 1..min(max_lag, N-1) is used.
    """
    q = np.asarray(q, dtype=float)
    n = len(q)
    if lags is None:
        top = n - 1 if max_lag is None else min(max_lag, n - 1)
        lags = range(1, top + 1)
    total = 0.0
    worst = 0.0
    count = 0
    for d in lags:
        if not 0 < d < n:
            continue
        dev = np.abs(q[d:] - q[:-d] - alpha * d)
        total += dev.sum()
        worst = max(worst, float(dev.max()))
        count += dev.size
    return SpacingSummary(total / count if count else 0.0, worst, count)


@dataclass(frozen=True)
class MarginalTest:
    statistic: float
    pvalue: float


@dataclass(frozen=True)
class InvarianceReport:
    a: MarginalTest
    b: MarginalTest
    replicas: int
    N: int
    T: float


def invariance_test(params: ThermalParams, N: int, T: float, replicas: int, rng,
                    cfg: IntegratorConfig | None = None,
                    b_shift: float = 0.0) -> InvarianceReport:
    """Two-sample KS comparison of pooled t=0 and t=T torus marginals.

    ``b_shift`` perturbs the evolved ensemble (a control that must be rejected).
    The t=0 and t=T pools come from independent replica sets so that the two
    samples are independent, as the KS test assumes.
    """
    g = _as_generator(rng)
    if cfg is None:
        cfg = IntegratorConfig(step=1e-2, sample_every=max(T, 1e-2))
    a0, b0, aT, bT = [], [], [], []
    for _ in range(replicas):
        f = sample_periodic(params, N, g)
        a0.append(f.a)
        b0.append(f.b)
    for _ in range(replicas):
        f = sample_periodic(params, N, g)
        if T > 0:
            f = evolve(f, cfg, T).sample(-1)
        aT.append(f.a)
        bT.append(f.b + b_shift)
    if T == 0 and b_shift == 0:
        aT, bT = a0, b0
    ka = stats.ks_2samp(np.concatenate(a0), np.concatenate(aT))
    kb = stats.ks_2samp(np.concatenate(b0), np.concatenate(bT))
    return InvarianceReport(MarginalTest(float(ka.statistic), float(ka.pvalue)),
                            MarginalTest(float(kb.statistic), float(kb.pvalue)),
                            replicas, N, T)


def positions(f: FlaschkaState) -> np.ndarray:
    return state_from_flaschka(f).q

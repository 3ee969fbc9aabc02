import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toda_lab import thermal
from toda_lab.thermal import RngStream, ThermalParams

EULER_GAMMA = 0.5772156649015329


@pytest.mark.parametrize("beta, theta, expected", [
    (1.0, 1.0, EULER_GAMMA),
    (math.e, 1.0, 1.0 + EULER_GAMMA),
    (1.0, 2.0, EULER_GAMMA - 1.0),
])
def test_stretch_parameter_examples(beta, theta, expected):
    assert thermal.stretch_parameter(beta, theta) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_stretch_parameter_against_mpmath(beta, theta):
    ref = float(mpmath.log(beta) - mpmath.digamma(theta))
    assert thermal.stretch_parameter(beta, theta) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_invalid_params():
    with pytest.raises(ValueError):
        ThermalParams(0.0, 1.0)
    with pytest.raises(ValueError):
        ThermalParams(1.0, -1.0)
    # beta = exp(digamma(theta)) gives alpha = 0
    p = ThermalParams(math.exp(float(mpmath.digamma(2.0))), 2.0)
    with pytest.raises(ValueError, match="degenerate"):
        p.require_nonzero_alpha()


def test_streams_are_reproducible_and_distinct():
    x = RngStream(7, 3).generator().random(5)
    y = RngStream(7, 3).generator().random(5)
    z = RngStream(7, 4).generator().random(5)
    assert np.array_equal(x, y)
    assert not np.array_equal(x, z)


def test_sample_open_shape_and_edge():
    g = RngStream(0, 0).generator()
    f = thermal.sample_open(ThermalParams(), 9, g)
    assert f.a[-1] == 0.0
    assert np.all(f.a[:-1] > 0)
    assert f.domain.n1 == -4 and f.domain.n2 == 4
    f = thermal.sample_open(ThermalParams(), 9, g, n1=0)
    assert f.domain.n1 == 0


def _within(mean, target, std, n, k=3.0):
    return abs(mean - target) <= k * std / math.sqrt(n)


@pytest.mark.parametrize("beta, theta", [(1.0, 1.0), (2.0, 0.5), (0.7, 3.0)])
def test_open_moments(beta, theta):
    p = ThermalParams(beta, theta)
    g = RngStream(1, 0).generator()
    f = thermal.sample_open(p, 100_001, g)
    a2 = f.a[:-1] ** 2
    assert _within(a2.mean(), theta / beta, math.sqrt(theta) / beta, a2.size)
    b = f.b
    assert _within(b.mean(), 0.0, 1 / math.sqrt(beta), b.size)
    # variance of the sample variance of a Gaussian is 2 sigma^4 / n
    assert abs(b.var() - 1 / beta) <= 3 * math.sqrt(2) / beta / math.sqrt(b.size)


def test_periodic_sample():
    p = ThermalParams(1.0, 1.0)
    f = thermal.sample_periodic(p, 64, RngStream(2, 0).generator())
    assert np.all(f.a > 0)
    assert math.isfinite(f.domain.upsilon)
    assert f.domain.upsilon == pytest.approx(-2 * np.log(f.a).sum())
    assert f.q_first == 0.0


@pytest.mark.parametrize("beta, theta", [(1.0, 1.0), (1.0, 2.0), (3.0, 0.8)])
def test_spacing_mean_is_alpha(beta, theta):
    p = ThermalParams(beta, theta)
    r = thermal.sample_spacings(p, 100_000, RngStream(3, 0).generator())
    assert _within(r.mean(), p.alpha, r.std(ddof=1), r.size)


def test_spacing_statistics_deterministic_lattice():
    q = 0.4 * np.arange(50)
    s = thermal.spacing_statistics(q, 0.4)
    assert s.max_deviation == pytest.approx(0.0, abs=1e-12)
    assert s.pairs == 49 * 50 // 2


def test_spacing_deviation_grows_sublinearly():
    p = ThermalParams()
    f = thermal.sample_open(p, 4001, RngStream(4, 0).generator(), n1=0)
    q = thermal.positions(f)
    short = thermal.spacing_statistics(q, p.alpha, lags=[10]).mean_deviation
    long_ = thermal.spacing_statistics(q, p.alpha, lags=[1000]).mean_deviation
    # diffusive growth: ratio near sqrt(100) = 10, far below the linear 100
    assert 3 < long_ / short < 30


def test_invariance_trivial_and_control():
    p = ThermalParams()
    rep = thermal.invariance_test(p, 16, 0.0, 5, RngStream(5, 0).generator())
    assert rep.a.statistic == 0.0 and rep.b.statistic == 0.0
    shifted = thermal.invariance_test(p, 64, 1.0, 50, RngStream(5, 1).generator(), b_shift=1.0)
    assert shifted.b.pvalue < 1e-6


def test_invariance_accepts_evolved_measure():
    rep = thermal.invariance_test(ThermalParams(), 64, 2.0, 60, RngStream(6, 0).generator())
    assert rep.a.pvalue > 0.01 and rep.b.pvalue > 0.01

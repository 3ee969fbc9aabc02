import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from toda_lab import hydro, localization, quasiparticle as qp, spectral, thermal

P = thermal.ThermalParams()


def _thermal_dec(seed, n):
    f = thermal.sample_open(P, n, thermal.RngStream(seed, 0).generator())
    return f, spectral.eig_tridiag(spectral.build_lax(f))


def test_density_single_bump():
    est = hydro.empirical_density(np.full(16, 0.7), 0.1)
    assert est.integral() == pytest.approx(1.0, abs=1e-12)
    assert est.grid[np.argmax(est.density)] == pytest.approx(0.7, abs=est.grid[1] - est.grid[0])


def test_density_bimodal():
    lam = np.concatenate((np.full(20, -5.0), np.full(20, 5.0)))
    est = hydro.empirical_density(lam, 0.3)
    left = est.grid < 0
    mass_left = trapezoid(est.density[left], est.grid[left])
    assert mass_left == pytest.approx(0.5, abs=1e-3)


def test_density_rejects_small_input():
    with pytest.raises(ValueError):
        hydro.empirical_density(np.zeros(5), 0.1)


def test_density_stable_under_bandwidth_halving():
    changes = []
    for seed in range(3):
        _, dec = _thermal_dec(seed, 1024)
        h = hydro.silverman_bandwidth(dec.eigenvalues)
        changes.append(hydro.density_l1_change(hydro.empirical_density(dec.eigenvalues, h),
                                               hydro.empirical_density(dec.eigenvalues, h / 2)))
    assert np.median(changes) <= 0.05


def test_lyapunov_prediction_shift_invariant():
    _, dec = _thermal_dec(1, 64)
    g = hydro.predicted_lyapunov(dec.eigenvalues, P.alpha)
    assert np.allclose(hydro.predicted_lyapunov(dec.eigenvalues + 3.3, P.alpha), g, atol=1e-12)


def test_lyapunov_matches_fitted_decay():
    f, dec = _thermal_dec(2, 1024)
    a = localization.center_bijection(dec)
    bulk = np.flatnonzero(qp.bulk_mask(a.phi, f.domain.n1, f.domain.n2, 102))
    chk = hydro.lyapunov_thouless_check(dec, a, P, bulk)
    assert np.all(chk.predicted <= 0)
    assert chk.correlation() >= 0.9


def test_velocity_single():
    assert hydro.effective_velocity_solve([0.37], 1.0) == pytest.approx([0.37])


def test_velocity_two_by_two():
    v = hydro.effective_velocity_solve([1.0, -1.0], 1.0)
    assert v[0] - v[1] == pytest.approx(2 / (1 + 2 * math.log(2)), rel=1e-14)
    assert v[0] + v[1] == pytest.approx(0.0, abs=1e-15)


def test_velocity_weak_coupling_limit():
    _, dec = _thermal_dec(3, 64)
    v = hydro.effective_velocity_solve(dec.eigenvalues, 1e8)
    assert np.max(np.abs(v - dec.eigenvalues)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.floats(0.2, 5.0), st.booleans(), st.floats(-4, 4),
       st.integers(0, 2**31))
def test_velocity_identities(n, alpha_abs, negative, shift, seed):
    alpha = -alpha_abs if negative else alpha_abs
    rng = np.random.default_rng(seed)
    lam = np.sort(rng.normal(size=n))[::-1]
    try:
        v = hydro.effective_velocity_solve(lam, alpha)
    except hydro.VelocitySolveError:
        return
    scale = max(1.0, np.max(np.abs(lam)))
    assert hydro.velocity_row_residual(lam, alpha, v) <= 1e-8 * scale
    # each row of the system has zero-sum off-diagonal coupling, so the mean velocity is conserved
    assert abs(v.mean() - lam.mean()) <= 1e-8 * scale
    v2 = hydro.effective_velocity_solve(lam + shift, alpha)
    assert np.max(np.abs(v2 - (v + shift))) <= 1e-8 * max(scale, abs(shift))


def test_velocity_errors():
    with pytest.raises(hydro.VelocitySolveError):
        hydro.effective_velocity_solve([1.0, 2.0], 0.0)
    with pytest.raises(hydro.VelocitySolveError):
        hydro.effective_velocity_solve([1.0, 1.0, 0.0], 1.0)


def test_compare_single_sentinel():
    lam = np.array([0.4])
    cmp_ = hydro.velocity_compare(hydro.VelocityField(lam, lam.copy(), lam.copy()))
    assert cmp_.correlation == 1.0 and cmp_.rms_relative_error == 0.0


def test_compare_degenerate_time_is_finite():
    _, dec = _thermal_dec(4, 64)
    lam = dec.eigenvalues
    v = hydro.effective_velocity_solve(lam, P.alpha)
    noisy = v + np.random.default_rng(0).normal(scale=10, size=64)
    cmp_ = hydro.velocity_compare(hydro.VelocityField(lam, v, noisy))
    assert math.isfinite(cmp_.correlation) and math.isfinite(cmp_.rms_relative_error)
    assert cmp_.table.shape == (64, 4)

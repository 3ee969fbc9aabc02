"""The twelve acceptance criteria at their stated sizes and tolerances.

Each test prints one PASS/FAIL line; the full list is repeated in the
terminal summary. Empirical thresholds are not tuned to the implementation:
a criterion that the dynamics do not meet at the stated size fails here.
"""
import math
import time

import numpy as np
from scipy import stats

from toda_lab import compare, hydro, localization, quasiparticle as qp, spectral, thermal
from toda_lab.experiments import gap_probability_fit
from toda_lab.lattice import IntegratorConfig, evolve, state_from_flaschka
from toda_lab.thermal import RngStream, ThermalParams

P = ThermalParams(1.0, 1.0)
SEED = 20240601


def _open(n, stream, n1=None, params=P):
    return thermal.sample_open(params, n, RngStream(SEED, stream).generator(), n1=n1)


def _eigs(f):
    return spectral.eigvals(spectral.build_lax(f))


def test_ac1_isospectrality(record):
    t0 = time.perf_counter()
    f = _open(256, 1)
    traj = evolve(f, IntegratorConfig(step=1e-3), 10.0)
    lam0 = _eigs(traj.sample(0))
    drift = max(float(np.max(np.abs(_eigs(s) - lam0))) for s in traj.samples)
    final = float(np.max(np.abs(_eigs(traj.sample(-1)) - lam0)))
    half = evolve(f, IntegratorConfig(step=5e-4, sample_every=10.0), 10.0)
    final_half = float(np.max(np.abs(_eigs(half.sample(-1)) - lam0)))
    ratio = final / final_half
    elapsed = time.perf_counter() - t0
    ok = drift <= 1e-7 and ratio >= 8 and elapsed < 60
    assert record("AC1", ok, max_drift=drift, halving_ratio=ratio, seconds=elapsed)


def test_ac2_moser_relation(record):
    t0 = time.perf_counter()
    f = _open(256, 1)
    traj = evolve(f, IntegratorConfig(step=1e-3), 10.0)
    decs = [spectral.eig_tridiag(spectral.build_lax(s)) for s in traj.samples]
    rep = qp.moser_first_entry_check(traj, decompositions=decs)
    a0 = localization.center_bijection(decs[0])
    bulk = qp.bulk_mask(a0.phi, f.domain.n1, f.domain.n2, qp.bulk_collar(256, 10.0))
    worst = float(rep.residuals[:, bulk].max())
    c0 = abs(float(rep.c_t[0]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and c0 <= 1e-12 and elapsed < 60
    assert record("AC2", ok, max_bulk_residual=worst, abs_c0=c0, seconds=elapsed)


def test_ac3_thouless_identity(record):
    t0 = time.perf_counter()
    rng = RngStream(SEED, 3).generator()
    worst = 0.0
    for trial in range(1000):
        n = int(rng.integers(2, 65))
        if trial % 2 == 0:
            L = spectral.build_lax(thermal.sample_open(P, n, rng, n1=0))
        else:
            L = spectral.lax_from_arrays(rng.normal(size=n), rng.uniform(0.05, 2.0, n - 1))
        worst = max(worst, spectral.thouless_identity_residual(L).max_residual)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 30
    assert record("AC3", ok, max_residual=worst, seconds=elapsed)


def test_ac4_transfer_matrices(record):
    t0 = time.perf_counter()
    rng = RngStream(SEED, 4).generator()
    closed = prop = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 33))
        L = spectral.build_lax(thermal.sample_open(P, n, rng, n1=0))
        dec = spectral.eig_tridiag(L)
        i = int(rng.integers(0, n - 1))
        j = int(rng.integers(i, n - 1))
        lo, hi = dec.eigenvalues.min() - 1, dec.eigenvalues.max() + 1
        E = float(rng.uniform(lo, hi))
        S = spectral.transfer_product(L, i, j, E)
        C = spectral.transfer_closed_form(L, i, j, E)
        closed = max(closed, float(np.max(np.abs(S - C)) / np.max(np.abs(S))))
        k = int(rng.integers(0, n))
        prop = max(prop, spectral.propagation_residual(L, dec, k, i, j).scaled)
    elapsed = time.perf_counter() - t0
    ok = closed <= 1e-8 and prop <= 1e-9 and elapsed < 30
    assert record("AC4", ok, closed_form_relative=closed, propagation=prop, seconds=elapsed)


def test_ac5_localization_bijection(record):
    t0 = time.perf_counter()
    matched = 0
    for r in range(100):
        dec = spectral.eig_tridiag(spectral.build_lax(_open(256, 1000 + r)))
        try:
            localization.center_bijection(dec, 1 / 512)
            matched += 1
        except localization.NoBijection:
            pass
    elapsed = time.perf_counter() - t0
    ok = matched == 100 and elapsed < 120
    assert record("AC5", ok, matched=f"{matched}/100", seconds=elapsed)


def test_ac6_charge_continuity(record):
    t0 = time.perf_counter()
    f = _open(64, 6)
    mid = f.domain.n1 + 32
    dts = [0.02, 0.01, 0.005]
    trajs = [evolve(f, IntegratorConfig(step=1e-3, sample_every=dt), 1.0) for dt in dts]
    slopes = {}
    for m in (1, 2, 3):
        errs = [qp.charge_continuity_residual(tr, mid, m) for tr in trajs]
        slopes[m] = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    gap = qp.continuity_m1_gap(f)
    elapsed = time.perf_counter() - t0
    ok = min(slopes.values()) >= 1.9 and gap == 0.0 and elapsed < 60
    assert record("AC6", ok, slope_m1=slopes[1], slope_m2=slopes[2], slope_m3=slopes[3],
                  m1_symbolic_gap=gap, seconds=elapsed)


def test_ac7_charge_window_sums(record):
    t0 = time.perf_counter()
    N = 512
    T = N**0.4
    trace = 0.0
    pooled = {0: [], 1: [], 2: []}
    for r in range(32):
        f = _open(N, 7000 + r)
        sT = evolve(f, IntegratorConfig(step=1e-3, sample_every=T), T).sample(-1)
        dec = spectral.eig_tridiag(spectral.build_lax(sT))
        a = localization.center_bijection(dec)
        for m in pooled:
            ks = qp.charge_current_field(dec.matrix, m).charges
            scale = max(1.0, float(np.sum(np.abs(dec.eigenvalues) ** m)))
            trace = max(trace, abs(float(ks.sum()) - float(np.sum(dec.eigenvalues**m))) / scale)
            pooled[m].extend(qp.bulk_window_residuals(sT, dec, a, T, m).tolist())
    medians = {m: float(np.median(v)) for m, v in pooled.items()}
    elapsed = time.perf_counter() - t0
    ok = trace <= 1e-8 and max(medians.values()) <= 0.02 and elapsed < 300
    assert record("AC7", ok, trace_residual=trace, median_m0=medians[0], median_m1=medians[1],
                  median_m2=medians[2], windows=len(pooled[1]), seconds=elapsed)


def test_ac8_scattering_relation(record):
    t0 = time.perf_counter()
    N, T = 512, 20.0
    t0_max = 0.0
    norm = []
    for r in range(16):
        f = _open(N, 8000 + r)
        traj = evolve(f, IntegratorConfig(step=1e-3, sample_every=T), T)
        d0 = spectral.eig_tridiag(spectral.build_lax(traj.sample(0)))
        dT = spectral.eig_tridiag(spectral.build_lax(traj.sample(-1)))
        a0 = localization.center_bijection(d0)
        aT = localization.center_bijection(dT)
        s0 = state_from_flaschka(traj.sample(0))
        sT = state_from_flaschka(traj.sample(-1))
        at_zero = qp.scattering_report(d0.eigenvalues, a0, a0, s0, s0, P.alpha)
        t0_max = max(t0_max, float(np.max(np.abs(at_zero.residual))))
        rep = qp.scattering_report(d0.eigenvalues, a0, aT, s0, sT, P.alpha)
        norm.extend(rep.normalized_residual[rep.bulk].tolist())
    med = float(np.median(norm))
    elapsed = time.perf_counter() - t0
    ok = t0_max == 0.0 and med <= 0.05 and elapsed < 600
    assert record("AC8", ok, t0_max_abs=t0_max, median_normalized_bulk=med, seconds=elapsed)


def test_ac9_domain_comparison(record):
    t0 = time.perf_counter()
    K = list(range(10, 81, 10))
    tab = compare.open_vs_periodic(P, 256, 5.0, K, RngStream(SEED, 9).generator(), replicas=32)
    elapsed = time.perf_counter() - t0
    ok = tab.rate >= 0.2 and elapsed < 300
    assert record("AC9", ok, fitted_rate=tab.rate, reference_rate=0.2, seconds=elapsed)


def test_ac10_effective_velocity(record):
    t0 = time.perf_counter()
    N, T = 1024, 32.0
    f = _open(N, 10)
    traj = evolve(f, IntegratorConfig(step=1e-3, sample_every=T), T)
    d0 = spectral.eig_tridiag(spectral.build_lax(traj.sample(0)))
    dT = spectral.eig_tridiag(spectral.build_lax(traj.sample(-1)))
    lam = d0.eigenvalues
    v = hydro.effective_velocity_solve(lam, P.alpha)
    scale = max(1.0, float(np.max(np.abs(lam))))
    row = hydro.velocity_row_residual(lam, P.alpha, v) / scale
    momentum = abs(float(v.mean() - lam.mean()))
    c = 1.2345
    affine = float(np.max(np.abs(hydro.effective_velocity_solve(lam + c, P.alpha) - (v + c))))
    a0 = localization.center_bijection(d0)
    aT = localization.center_bijection(dT)
    Q0 = qp.quasiparticle_positions(a0, state_from_flaschka(traj.sample(0)))
    QT = qp.quasiparticle_positions(aT, state_from_flaschka(traj.sample(-1)))
    bulk = qp.bulk_mask(a0.phi, f.domain.n1, f.domain.n2, qp.bulk_collar(N, T))
    cmp_ = hydro.velocity_compare(hydro.VelocityField(lam, v, (QT - Q0) / T), bulk)
    elapsed = time.perf_counter() - t0
    ok = max(row, momentum, affine) <= 1e-8 and cmp_.correlation >= 0.99 and elapsed < 600
    assert record("AC10", ok, row_residual=row, momentum=momentum, affine=affine,
                  correlation=cmp_.correlation, rms_relative=cmp_.rms_relative_error,
                  seconds=elapsed)


def test_ac11_thermal_statistics(record):
    t0 = time.perf_counter()
    r = thermal.sample_spacings(P, 100_000, RngStream(SEED, 11).generator())
    se = float(r.std(ddof=1) / math.sqrt(r.size))
    dev = abs(float(r.mean()) - P.alpha)
    inv = thermal.invariance_test(P, 64, 10.0, 200, RngStream(SEED, 12).generator())
    elapsed = time.perf_counter() - t0
    ok = dev <= 3 * se and inv.a.pvalue > 0.01 and inv.b.pvalue > 0.01 and elapsed < 300
    assert record("AC11", ok, mean_deviation_in_se=dev / se, ks_p_a=inv.a.pvalue,
                  ks_p_b=inv.b.pvalue, seconds=elapsed)


def test_ac12_gap_statistics(record):
    t0 = time.perf_counter()
    g = RngStream(SEED, 13).generator()
    N, reps = 128, 10_000
    gaps = []
    for chunk in range(10):
        a2 = g.gamma(P.theta, 1 / P.beta, size=(reps // 10, N - 1))
        b = g.normal(0.0, 1 / math.sqrt(P.beta), size=(reps // 10, N))
        gaps.append(spectral.min_gaps_batch(b, np.sqrt(a2)))
    gaps = np.concatenate(gaps)
    fit = gap_probability_fit(gaps, np.logspace(-6, -3, 13))
    elapsed = time.perf_counter() - t0
    ok = fit["r2"] >= 0.95 and elapsed < 600
    assert record("AC12", ok, r2=fit["r2"], slope=fit["slope"],
                  p_at_1e_3=fit["probabilities"][-1], seconds=elapsed)

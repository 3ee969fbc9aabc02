"""Replica-parallel experiment drivers with CSV/JSON artifacts.

Every replica draws from its own stream ``RngStream(seed, replica_offset + r)``
and writes ``replica_XXXX/rows.csv`` in long format (experiment, replica,
time, key, value), plus experiment tables where defined. ``summary.json``
holds pooled statistics and the acceptance verdicts; ``manifest.json`` the
config hash and seed. Output depends only on (config, seed).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import compare, hydro, lattice, localization, quasiparticle, spectral, thermal
from .lattice import IntegratorConfig, evolve, state_from_flaschka
from .thermal import RngStream, ThermalParams

ACCEPTANCE_KEYS = [f"AC{i}" for i in range(1, 13)]

NUMERICAL_ERRORS = (
    lattice.IntegrationError,
    lattice.LatticeError,
    spectral.EigensolverError,
    spectral.TransferError,
    localization.NoBijection,
    localization.TrackingError,
    hydro.VelocitySolveError,
    FloatingPointError,
    ValueError,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    beta: float = 1.0
    theta: float = 1.0
    N: int = 64
    T: float = 1.0
    step: float = 1e-3
    scheme: str = "rk4"
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    sample_every: float | None = None
    zeta_mode: str | float = "two_n_inverse"
    collar_mode: str = "fraction"
    collar_value: float = 0.1
    replicas: int = 1
    seed: int = 0
    replica_offset: int = 0
    output_dir: str = "toda_out"
    m_max: int = 2
    K_grid: tuple = (10, 20, 30, 40, 50, 60, 70, 80)
    deltas: tuple = ()
    transfer_trials: int = 20
    continuity_T: float = 1.0
    continuity_dt: float = 0.01
    check_order: bool = True

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in data:
            raise ConfigError("missing 'experiment'")
        data = dict(data)
        for key in ("K_grid", "deltas"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.experiment not in DRIVERS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        pos = {"beta": self.beta, "theta": self.theta, "step": self.step,
               "rel_tol": self.rel_tol, "abs_tol": self.abs_tol,
               "continuity_T": self.continuity_T, "continuity_dt": self.continuity_dt}
        for name, val in pos.items():
            if not _is_number(val) or not val > 0:
                raise ConfigError(f"{name} must be a positive number")
        for name in ("N", "replicas", "m_max", "transfer_trials", "seed", "replica_offset"):
            val = getattr(self, name)
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{name} must be an integer")
        if self.N < 1 or self.replicas < 1 or self.m_max < 0 or self.seed < 0 or self.replica_offset < 0:
            raise ConfigError("N, replicas must be >= 1; m_max, seed, replica_offset >= 0")
        if not _is_number(self.T) or self.T < 0:
            raise ConfigError("T must be nonnegative")
        if self.sample_every is not None and (not _is_number(self.sample_every) or self.sample_every <= 0):
            raise ConfigError("sample_every must be positive")
        if self.scheme not in ("rk4", "rk45"):
            raise ConfigError("scheme must be 'rk4' or 'rk45'")
        if self.zeta_mode != "two_n_inverse" and not (
                _is_number(self.zeta_mode) and 0 < self.zeta_mode <= 1):
            raise ConfigError("zeta_mode must be 'two_n_inverse' or a number in (0, 1]")
        if self.collar_mode not in ("fraction", "sites") or not _is_number(self.collar_value) \
                or self.collar_value < 0:
            raise ConfigError("collar_mode must be 'fraction' or 'sites' with collar_value >= 0")
        if any(not isinstance(k, int) or k < 0 for k in self.K_grid):
            raise ConfigError("K_grid must hold nonnegative integers")
        if self.experiment in ALPHA_REQUIRED:
            try:
                self.params().require_nonzero_alpha()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def params(self) -> ThermalParams:
        return ThermalParams(float(self.beta), float(self.theta))

    def integrator(self, step: float | None = None, sample_every: float | None = None) -> IntegratorConfig:
        return IntegratorConfig(step=self.step if step is None else step, scheme=self.scheme,
                                rel_tol=self.rel_tol, abs_tol=self.abs_tol,
                                sample_every=self.sample_every if sample_every is None else sample_every)

    def zeta(self, n: int) -> float:
        return localization.default_zeta(n) if self.zeta_mode == "two_n_inverse" else float(self.zeta_mode)

    def collar(self, n: int, T: float) -> int:
        if self.collar_mode == "sites":
            return int(self.collar_value)
        return quasiparticle.bulk_collar(n, T, fraction=float(self.collar_value))

    def to_json(self, include_output: bool = True) -> str:
        data = dataclasses.asdict(self)
        if not include_output:
            del data["output_dir"]
        return json.dumps(data, sort_keys=True, default=list)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


@dataclass
class ReplicaResult:
    replica: int
    rows: list = field(default_factory=list)          # (time, key, value)
    tables: dict = field(default_factory=dict)        # name -> (header, rows)
    payload: dict = field(default_factory=dict)       # pooled by the summary step
    error: str | None = None

    def add(self, key: str, value, time: float = 0.0) -> None:
        self.rows.append((float(time), key, value))


# ---------------------------------------------------------------------------
# Drivers: (cfg, generator, result) -> None
# ---------------------------------------------------------------------------

def _bulk_flags(dec, zeta, n1, n2, collar):
    assign = localization.center_bijection(dec, zeta)
    return assign, quasiparticle.bulk_mask(assign.phi, n1, n2, collar)


def drive_sample(cfg, g, res):
    p = cfg.params()
    f = thermal.sample_open(p, cfg.N, g)
    r = -2.0 * np.log(f.a[:-1])
    res.add("alpha", p.alpha)
    res.add("mean_spacing", float(r.mean()) if len(r) else math.nan)
    res.add("mean_a2", float(np.mean(f.a[:-1] ** 2)) if len(r) else math.nan)
    res.add("mean_b", float(f.b.mean()))
    res.add("var_b", float(f.b.var()))
    res.add("last_a", float(f.a[-1]))
    res.payload["spacings"] = r


def drive_evolve(cfg, g, res):
    p = cfg.params()
    f = thermal.sample_open(p, cfg.N, g)
    traj = evolve(f, cfg.integrator(), cfg.T)
    lam0 = spectral.eigvals(spectral.build_lax(traj.sample(0)))
    drift = final_drift = 0.0
    for s in range(len(traj)):
        t = float(traj.times[s])
        lam = spectral.eigvals(spectral.build_lax(traj.sample(s)))
        final_drift = float(np.max(np.abs(lam - lam0)))
        drift = max(drift, final_drift)
        res.add("eigenvalue_drift", final_drift, t)
        for key in ("hamiltonian_drift", "trace_L_drift", "trace_L2_drift"):
            res.add(key, float(traj.conserved_drift[key][s]), t)
    ab = traj.a.max(axis=1) + np.abs(traj.b).max(axis=1)
    res.add("entry_bound_ratio", float(ab.max() / ab.min()), float(traj.times[-1]))
    res.add("max_eigenvalue_drift", drift, float(traj.times[-1]))
    if cfg.check_order and cfg.scheme == "rk4" and cfg.T > 0:
        half = evolve(f, cfg.integrator(step=cfg.step / 2, sample_every=cfg.T), cfg.T)
        d_half = float(np.max(np.abs(spectral.eigvals(spectral.build_lax(half.sample(-1))) - lam0)))
        res.add("final_drift_half_step", d_half, cfg.T)
        ratio = final_drift / d_half if d_half > 0 else math.inf
        res.add("halving_ratio", ratio, cfg.T)
        res.payload["halving_ratio"] = ratio
    res.payload["max_drift"] = drift
    if cfg.N >= 2:
        decs = [spectral.eig_tridiag(spectral.build_lax(s)) for s in traj.samples]
        _, bulk = _bulk_flags(decs[0], cfg.zeta(cfg.N), f.domain.n1, f.domain.n2,
                              cfg.collar(cfg.N, cfg.T))
        mr = quasiparticle.moser_first_entry_check(traj, decompositions=decs)
        for s in range(len(traj)):
            t = float(traj.times[s])
            res.add("moser_max_bulk_residual",
                    float(mr.residuals[s, bulk].max()) if bulk.any() else 0.0, t)
            res.add("c_t", float(mr.c_t[s]), t)
            res.add("anchor_residual", float(mr.anchor_residual[s]), t)
        res.payload["moser"] = float(mr.residuals[:, bulk].max()) if bulk.any() else 0.0
        res.payload["c0"] = abs(float(mr.c_t[0]))


def drive_spectrum(cfg, g, res):
    f = thermal.sample_open(cfg.params(), cfg.N, g, n1=0)
    L = spectral.build_lax(f)
    dec = spectral.eig_tridiag(L)
    diag = spectral.spectral_diagnostics(L, dec.eigenvalues)
    res.add("orthogonality_residual", dec.orthogonality_residual())
    res.add("eigen_residual", dec.eigen_residual())
    res.add("min_gap", diag.min_gap)
    res.add("max_abs_entry", diag.max_abs_entry)
    res.add("max_abs_eigenvalue", diag.max_abs_eigenvalue)
    res.payload["min_gap"] = diag.min_gap
    if cfg.N >= 2 and cfg.transfer_trials > 0:
        closed = prop_abs = prop = 0.0
        for _ in range(cfg.transfer_trials):
            i = int(g.integers(0, cfg.N - 1))
            j = int(g.integers(i, cfg.N - 1))
            E = float(g.uniform(dec.eigenvalues.min() - 1, dec.eigenvalues.max() + 1))
            P = spectral.transfer_product(L, i, j, E)
            C = spectral.transfer_closed_form(L, i, j, E)
            closed = max(closed, float(np.max(np.abs(P - C)) / np.max(np.abs(P))))
            k = int(g.integers(0, cfg.N))
            pr = spectral.propagation_residual(L, dec, k, i, j)
            prop_abs = max(prop_abs, pr.absolute)
            prop = max(prop, pr.scaled)
        res.add("transfer_closed_form_relative", closed)
        res.add("propagation_residual", prop)
        res.add("propagation_residual_absolute", prop_abs)
        res.payload["transfer"] = (closed, prop)


def drive_thouless(cfg, g, res):
    f = thermal.sample_open(cfg.params(), cfg.N, g, n1=0)
    L = spectral.build_lax(f)
    if cfg.N < 2:
        res.add("max_residual", 0.0)
        res.payload["thouless"] = 0.0
        return
    tr = spectral.thouless_identity_residual(L)
    res.add("max_residual", tr.max_residual)
    res.add("underflow_guarded", "underflow_guarded" if tr.underflow_guarded else 0)
    res.payload["thouless"] = tr.max_residual


def drive_centers(cfg, g, res):
    f = thermal.sample_open(cfg.params(), cfg.N, g)
    zeta = cfg.zeta(cfg.N)
    if cfg.T > 0:
        traj = evolve(f, cfg.integrator(), cfg.T)
        decs = [spectral.eig_tridiag(spectral.build_lax(s)) for s in traj.samples]
    else:
        traj = None
        decs = [spectral.eig_tridiag(spectral.build_lax(f))]
    dec = decs[0]
    try:
        assign = localization.center_bijection(dec, zeta)
    except localization.NoBijection as exc:
        res.add("perfect_matching", 0)
        res.add("max_matching_size", exc.max_matching)
        res.payload["matched"] = False
        return
    res.add("perfect_matching", 1)
    res.add("max_matching_size", cfg.N)
    res.payload["matched"] = True
    sizes = [len(localization.centers(dec, k, zeta)) for k in range(cfg.N)]
    res.add("median_center_set_size", float(np.median(sizes)))
    res.add("hall_residual", localization.hall_unitarity_residual(dec, range(f.domain.n1, f.domain.n2 + 1)))
    if cfg.N >= 16:
        bulk = quasiparticle.bulk_mask(assign.phi, f.domain.n1, f.domain.n2, cfg.collar(cfg.N, 0.0))
        rates = []
        for k in np.flatnonzero(bulk):
            try:
                rates.append(localization.decay_profile(dec, int(k), assign).rate)
            except ValueError:
                continue
        if rates:
            res.add("median_decay_rate", float(np.median(rates)))
    if traj is not None:
        track = localization.track_centers(traj, zeta, decs)
        for s, t in enumerate(traj.times[1:]):
            res.add("step_displacement", float(track.step_displacement[s]), float(t))
        res.add("max_displacement", track.max_displacement, cfg.T)
        res.add("max_center_spread", float(track.center_spread.max()), cfg.T)


def drive_charges(cfg, g, res):
    p = cfg.params()
    f = thermal.sample_open(p, cfg.N, g)
    mid = f.domain.n1 + cfg.N // 2
    res.add("m1_symbolic_gap", quasiparticle.continuity_m1_gap(f))
    res.payload["m1_gap"] = quasiparticle.continuity_m1_gap(f)
    slopes = {}
    dts = [cfg.continuity_dt * 2, cfg.continuity_dt, cfg.continuity_dt / 2]
    trajs = [evolve(f, cfg.integrator(sample_every=dt), cfg.continuity_T) for dt in dts]
    for m in (1, 2, 3):
        errs = [quasiparticle.charge_continuity_residual(tr, mid, m) for tr in trajs]
        slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0]) if min(errs) > 0 else math.inf
        slopes[m] = slope
        res.add(f"continuity_slope_m{m}", slope)
        res.add(f"continuity_residual_m{m}", errs[-1])
    res.payload["slopes"] = slopes
    traj = evolve(f, cfg.integrator(sample_every=cfg.T if cfg.T > 0 else None), cfg.T)
    sT = traj.sample(-1)
    dec = spectral.eig_tridiag(spectral.build_lax(sT))
    assign = localization.center_bijection(dec, cfg.zeta(cfg.N))
    width = max(cfg.T, 1.0)
    rel = {}
    full = 0.0
    for m in range(cfg.m_max + 1):
        tr_res = abs(float(np.sum(quasiparticle.charge_current_field(dec.matrix, m).charges))
                     - float(np.sum(dec.eigenvalues ** m)))
        full = max(full, tr_res / max(1.0, float(np.sum(np.abs(dec.eigenvalues) ** m))))
        vals = quasiparticle.bulk_window_residuals(sT, dec, assign, width, m).tolist()
        rel[m] = vals
        if vals:
            res.add(f"window_relative_residual_median_m{m}", float(np.median(vals)), cfg.T)
    res.add("trace_identity_residual", full, cfg.T)
    res.payload["windows"] = rel
    res.payload["trace"] = full


def drive_scattering(cfg, g, res):
    p = cfg.params()
    f = thermal.sample_open(p, cfg.N, g)
    traj = evolve(f, cfg.integrator(sample_every=cfg.T if cfg.T > 0 else None), cfg.T)
    decs = [spectral.eig_tridiag(spectral.build_lax(traj.sample(0))),
            spectral.eig_tridiag(spectral.build_lax(traj.sample(-1)))]
    drift = float(np.max(np.abs(decs[1].eigenvalues - decs[0].eigenvalues)))
    gaps = -np.diff(decs[0].eigenvalues)
    if len(gaps) and drift >= gaps.min() / 2:
        raise localization.TrackingError("identity tracking unreliable")
    zeta = cfg.zeta(cfg.N)
    a0 = localization.center_bijection(decs[0], zeta)
    aT = localization.center_bijection(decs[1], zeta)
    s0 = state_from_flaschka(traj.sample(0))
    sT = state_from_flaschka(traj.sample(-1))
    collar = cfg.collar(cfg.N, cfg.T)
    lam = decs[0].eigenvalues
    rep = quasiparticle.scattering_report(lam, a0, aT, s0, sT, p.alpha, collar,
                                          log_u_first0=decs[0].log_abs[:, 0])
    rep0 = quasiparticle.scattering_report(lam, a0, a0, s0, s0, p.alpha, collar)
    res.add("t0_max_abs_residual", float(np.max(np.abs(rep0.residual))), 0.0)
    res.add("median_normalized_residual", rep.median_normalized_bulk(), cfg.T)
    bulk = rep.bulk
    res.add("median_abs_residual", float(np.median(np.abs(rep.residual[bulk]))) if bulk.any() else math.nan, cfg.T)
    res.add("median_abs_residual_site_order",
            float(np.median(np.abs(rep.residual_site_order[bulk]))) if bulk.any() else math.nan, cfg.T)
    res.add("collar", collar, cfg.T)
    res.add("c_t", rep.c_t, cfg.T)
    res.add("anchor_residual", rep.anchor_residual, cfg.T)
    res.add("ties", rep.ties, cfg.T)
    res.tables["scattering_report.csv"] = (
        ["k", "lambda", "Q0", "QT", "residual", "normalized_residual", "bulk_flag"],
        [[k, lam[k], rep.Q0[k], rep.Qt[k], rep.residual[k], rep.normalized_residual[k],
          int(bulk[k])] for k in range(len(lam))])
    res.payload["t0"] = float(np.max(np.abs(rep0.residual)))
    res.payload["normalized"] = rep.normalized_residual[bulk]
    res.payload["site_order"] = np.abs(rep.residual_site_order[bulk]) / rep.scale[bulk]


def drive_velocity(cfg, g, res):
    p = cfg.params()
    f = thermal.sample_open(p, cfg.N, g)
    traj = evolve(f, cfg.integrator(sample_every=cfg.T if cfg.T > 0 else None), cfg.T)
    d0 = spectral.eig_tridiag(spectral.build_lax(traj.sample(0)))
    dT = spectral.eig_tridiag(spectral.build_lax(traj.sample(-1)))
    zeta = cfg.zeta(cfg.N)
    a0 = localization.center_bijection(d0, zeta)
    aT = localization.center_bijection(dT, zeta)
    lam = d0.eigenvalues
    v = hydro.effective_velocity_solve(lam, p.alpha)
    Q0 = quasiparticle.quasiparticle_positions(a0, state_from_flaschka(traj.sample(0)))
    QT = quasiparticle.quasiparticle_positions(aT, state_from_flaschka(traj.sample(-1)))
    emp = (QT - Q0) / cfg.T if cfg.T > 0 else lam.copy()
    bulk = quasiparticle.bulk_mask(a0.phi, f.domain.n1, f.domain.n2, cfg.collar(cfg.N, cfg.T))
    cmp_ = hydro.velocity_compare(hydro.VelocityField(lam, v, emp), bulk)
    scale = max(1.0, float(np.max(np.abs(lam))))
    row = hydro.velocity_row_residual(lam, p.alpha, v) / scale
    momentum = abs(float(np.mean(v) - np.mean(lam)))
    c = 1.2345
    affine = float(np.max(np.abs(hydro.effective_velocity_solve(lam + c, p.alpha) - (v + c))))
    res.add("row_residual", row, cfg.T)
    res.add("momentum_identity", momentum, cfg.T)
    res.add("affine_covariance", affine, cfg.T)
    res.add("correlation", cmp_.correlation, cfg.T)
    res.add("rms_relative_error", cmp_.rms_relative_error, cfg.T)
    res.tables["velocity.csv"] = (["k", "lambda", "v_solved", "v_empirical"],
                                  [[k, lam[k], v[k], emp[k]] for k in range(len(lam))])
    res.payload["exact"] = max(row, momentum, affine)
    res.payload["correlation"] = cmp_.correlation


def drive_compare(cfg, g, res):
    tab = compare.open_vs_periodic(cfg.params(), cfg.N, cfg.T, cfg.K_grid, g, replicas=1,
                                   step=cfg.step)
    for K, G in zip(tab.K, tab.G[0]):
        res.add(f"G_K{int(K)}", float(G), cfg.T)
    res.payload["G"] = tab.G[0]


def drive_invariance(cfg, g, res):
    p = cfg.params()
    f0 = thermal.sample_periodic(p, cfg.N, g)
    f1 = thermal.sample_periodic(p, cfg.N, g)
    if cfg.T > 0:
        f1 = evolve(f1, cfg.integrator(sample_every=cfg.T), cfg.T).sample(-1)
    res.add("mean_a_t0", float(f0.a.mean()), 0.0)
    res.add("mean_b_t0", float(f0.b.mean()), 0.0)
    res.add("mean_a_T", float(f1.a.mean()), cfg.T)
    res.add("mean_b_T", float(f1.b.mean()), cfg.T)
    res.payload["a0"], res.payload["b0"] = f0.a, f0.b
    res.payload["aT"], res.payload["bT"] = f1.a, f1.b


DRIVERS: dict[str, Callable] = {
    "sample": drive_sample,
    "evolve": drive_evolve,
    "spectrum": drive_spectrum,
    "centers": drive_centers,
    "charges": drive_charges,
    "scattering": drive_scattering,
    "thouless": drive_thouless,
    "velocity": drive_velocity,
    "compare-domains": drive_compare,
    "invariance": drive_invariance,
}
ALPHA_REQUIRED = {"scattering", "velocity"}


# ---------------------------------------------------------------------------
# Acceptance verdicts from pooled payloads
# ---------------------------------------------------------------------------

def _verdict(ok: bool, **info) -> dict:
    return {"status": "pass" if ok else "fail", **info}


def _pooled(results, key):
    return [r.payload[key] for r in results if key in r.payload]


def acceptance(cfg: ExperimentConfig, results: list[ReplicaResult]) -> dict:
    out = {k: {"status": "not_evaluated"} for k in ACCEPTANCE_KEYS}
    ok_results = [r for r in results if r.error is None]
    if not ok_results:
        return out
    e = cfg.experiment
    if e == "evolve":
        drift = max(_pooled(ok_results, "max_drift"))
        ratios = _pooled(ok_results, "halving_ratio")
        ok = drift <= 1e-7 and (not ratios or min(ratios) >= 8)
        out["AC1"] = _verdict(ok, max_drift=drift, min_halving_ratio=min(ratios) if ratios else None)
        moser = _pooled(ok_results, "moser")
        if moser:
            c0 = max(_pooled(ok_results, "c0"))
            out["AC2"] = _verdict(max(moser) <= 1e-6 and c0 <= 1e-12,
                                  max_bulk_residual=max(moser), abs_c0=c0)
    elif e == "thouless":
        m = max(_pooled(ok_results, "thouless"))
        out["AC3"] = _verdict(m <= 1e-9, max_residual=m)
    elif e == "spectrum":
        tr = _pooled(ok_results, "transfer")
        if tr and cfg.N <= 32:
            c = max(x[0] for x in tr)
            pr = max(x[1] for x in tr)
            out["AC4"] = _verdict(c <= 1e-8 and pr <= 1e-9, closed_form=c, propagation=pr)
        gaps = np.array(_pooled(ok_results, "min_gap"))
        deltas = np.array(cfg.deltas) if cfg.deltas else np.logspace(-6, -3, 13)
        fit = gap_probability_fit(gaps, deltas)
        out["AC12"] = _verdict(fit["r2"] >= 0.95, **fit)
    elif e == "centers":
        matched = _pooled(ok_results, "matched")
        out["AC5"] = _verdict(all(matched) and len(matched) == len(results),
                              matched=int(sum(matched)), replicas=len(results))
    elif e == "charges":
        slopes = [min(s.values()) for s in _pooled(ok_results, "slopes")]
        gap = max(_pooled(ok_results, "m1_gap"))
        out["AC6"] = _verdict(min(slopes) >= 1.9 and gap == 0.0, min_slope=min(slopes), m1_gap=gap)
        per_m = {}
        for w in _pooled(ok_results, "windows"):
            for m, vals in w.items():
                per_m.setdefault(m, []).extend(vals)
        medians = {f"m{m}": float(np.median(v)) for m, v in per_m.items() if v}
        trace = max(_pooled(ok_results, "trace"))
        out["AC7"] = _verdict(trace <= 1e-8 and all(v <= 0.02 for v in medians.values()),
                              trace_residual=trace, window_medians=medians)
    elif e == "scattering":
        t0 = max(_pooled(ok_results, "t0"))
        norm = np.concatenate(_pooled(ok_results, "normalized"))
        med = float(np.median(norm)) if norm.size else math.nan
        site = np.concatenate(_pooled(ok_results, "site_order"))
        out["AC8"] = _verdict(t0 == 0.0 and med <= 0.05, t0_max=t0, median_normalized=med,
                              median_normalized_site_order=float(np.median(site)) if site.size else None)
    elif e == "compare-domains":
        G = np.array(_pooled(ok_results, "G"))
        med = np.median(G, axis=0)
        rate = compare.fitted_decay_rate(cfg.K_grid, med)
        out["AC9"] = _verdict(rate >= 0.2, fitted_rate=rate)
    elif e == "velocity":
        ex = max(_pooled(ok_results, "exact"))
        corr = min(_pooled(ok_results, "correlation"))
        out["AC10"] = _verdict(ex <= 1e-8 and corr >= 0.99, exact_max=ex, min_correlation=corr)
    elif e == "sample":
        r = np.concatenate(_pooled(ok_results, "spacings"))
        if r.size > 1:
            se = float(r.std(ddof=1) / math.sqrt(r.size))
            dev = abs(float(r.mean()) - cfg.params().alpha)
            out["AC11"] = _verdict(dev <= 3 * se, part="spacing_mean", deviation=dev, standard_error=se)
    elif e == "invariance":
        from scipy import stats

        pa = stats.ks_2samp(np.concatenate(_pooled(ok_results, "a0")),
                            np.concatenate(_pooled(ok_results, "aT"))).pvalue
        pb = stats.ks_2samp(np.concatenate(_pooled(ok_results, "b0")),
                            np.concatenate(_pooled(ok_results, "bT"))).pvalue
        out["AC11"] = _verdict(min(pa, pb) > 0.01, part="invariance", p_a=float(pa), p_b=float(pb))
    return out


def gap_probability_fit(min_gaps: np.ndarray, deltas: np.ndarray) -> dict:
    """Least-squares line through the origin for P[min_gap < delta] against delta."""
    P = np.array([(min_gaps < d).mean() for d in deltas])
    slope = float(np.sum(P * deltas) / np.sum(deltas**2))
    ss_tot = float(np.sum((P - P.mean()) ** 2))
    r2 = 1.0 - float(np.sum((P - slope * deltas) ** 2)) / ss_tot if ss_tot > 0 else math.nan
    return {"slope": slope, "r2": r2, "probabilities": P.tolist(), "deltas": deltas.tolist()}


# ---------------------------------------------------------------------------
# Running and writing
# ---------------------------------------------------------------------------

def run_replica(cfg: ExperimentConfig, index: int) -> ReplicaResult:
    rid = cfg.replica_offset + index
    res = ReplicaResult(rid)
    g = RngStream(cfg.seed, rid).generator()
    try:
        DRIVERS[cfg.experiment](cfg, g, res)
    except NUMERICAL_ERRORS as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def worker_count() -> int:
    raw = os.environ.get("TODA_LAB_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def run_replicas(cfg: ExperimentConfig) -> list[ReplicaResult]:
    workers = min(worker_count(), cfg.replicas)
    if workers <= 1:
        return [run_replica(cfg, i) for i in range(cfg.replicas)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_replica, [cfg] * cfg.replicas, range(cfg.replicas)))


SENTINELS = {"nan": "undefined", "inf": "inf", "-inf": "neg_inf"}


def format_value(value, key: str = "") -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    x = float(value)
    if math.isnan(x):
        return "undefined"
    if math.isinf(x):
        if key.endswith("rate"):
            return "inf_rate" if x > 0 else "neg_inf_rate"
        return "inf" if x > 0 else "neg_inf"
    return format(x, ".17g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v, header[i]) for i, v in enumerate(row)])


def write_replica(out: Path, cfg: ExperimentConfig, res: ReplicaResult) -> None:
    d = out / f"replica_{res.replica:04d}"
    d.mkdir(parents=True, exist_ok=True)
    seen = set()
    rows = []
    for t, key, val in res.rows:
        if (t, key) in seen:
            raise RuntimeError(f"duplicate row {key} at t={t}")
        seen.add((t, key))
        rows.append([cfg.experiment, res.replica, format_value(t), key, format_value(val, key)])
    with open(d / "rows.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "replica", "time", "key", "value"])
        w.writerows(rows)
    for name, (header, trows) in res.tables.items():
        _write_csv(d / name, header, trows)
    if res.error:
        (d / "FAILED").write_text(res.error + "\n")


def _json_safe(x):
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else format_value(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def summarize(cfg: ExperimentConfig, results: list[ReplicaResult]) -> dict:
    finals: dict[str, list[float]] = {}
    for r in results:
        last: dict[str, tuple[float, object]] = {}
        for t, key, val in r.rows:
            if key not in last or t >= last[key][0]:
                last[key] = (t, val)
        for key, (_, val) in last.items():
            if isinstance(val, (int, float, np.integer, np.floating)) and not isinstance(val, bool):
                finals.setdefault(key, []).append(float(val))
    stats_ = {}
    for key in sorted(finals):
        v = np.array(finals[key])
        v = v[np.isfinite(v)]
        if v.size == 0:
            stats_[key] = {"median": "undefined"}
            continue
        q = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
        stats_[key] = {"median": float(q[2]), "q05": float(q[0]), "q25": float(q[1]),
                       "q75": float(q[3]), "q95": float(q[4]), "count": int(v.size)}
    summary = {
        "experiment": cfg.experiment,
        "replicas": cfg.replicas,
        "failed_replicas": [r.replica for r in results if r.error],
        "status": "partial" if any(r.error for r in results) else "complete",
        "statistics": stats_,
        "acceptance": acceptance(cfg, results),
    }
    if cfg.experiment == "scattering":
        summary["median_normalized_residual"] = summary["acceptance"]["AC8"].get("median_normalized")
    return _json_safe(summary)


def run(cfg: ExperimentConfig) -> int:
    """Execute the configured experiment and write all artifacts; returns the exit status."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_replicas(cfg)
    for res in results:
        write_replica(out, cfg, res)
    summary = summarize(cfg, results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    text = cfg.to_json(include_output=False)
    manifest = {"config": json.loads(cfg.to_json()),
                "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
                "seed": cfg.seed, "replica_streams": [r.replica for r in results],
                "package_version": _version()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 3 if any(r.error for r in results) else 0


def _version() -> str:
    from . import __version__

    return __version__

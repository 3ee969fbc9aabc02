"""Spectral density, Lyapunov exponents and the effective-velocity equation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.integrate import trapezoid

from .localization import LocalizationAssignment, decay_profile
from .spectral import SpectralDecomposition, log_gap_sums
from .thermal import ThermalParams

MAX_CONDITION = 1e12


class VelocitySolveError(ValueError):
    def __init__(self, msg: str, condition: float = math.nan):
        super().__init__(msg)
        self.condition = condition


@dataclass(frozen=True)
class SpectralDensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))


def silverman_bandwidth(eigenvalues) -> float:
    """0.9 min(sd, IQR/1.34) N^{-1/5}."""
    lam = np.asarray(eigenvalues, dtype=float)
    iqr = float(np.subtract(*np.percentile(lam, [75, 25])))
    spread = min(float(lam.std(ddof=1)), iqr / 1.34) if iqr > 0 else float(lam.std(ddof=1))
    return 0.9 * spread * len(lam) ** -0.2


def empirical_density(eigenvalues, bandwidth: float, points: int = 1024) -> SpectralDensityEstimate:
    """Gaussian kernel density of the eigenvalues, normalized on its own grid."""
    lam = np.asarray(eigenvalues, dtype=float)
    if len(lam) < 16:
        raise ValueError("need at least 16 eigenvalues")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(lam.min() - 3 * bandwidth, lam.max() + 3 * bandwidth, points)
    z = (grid[:, None] - lam[None, :]) / bandwidth
    dens = np.exp(-0.5 * z**2).sum(axis=1) / (len(lam) * bandwidth * math.sqrt(2 * math.pi))
    dens /= trapezoid(dens, grid)
    return SpectralDensityEstimate(grid, dens, float(bandwidth))


def density_l1_change(est: SpectralDensityEstimate, other: SpectralDensityEstimate) -> float:
    """L1 distance between two estimates, the second interpolated onto the first grid."""
    g = np.interp(est.grid, other.grid, other.density, left=0.0, right=0.0)
    return float(trapezoid(np.abs(est.density - g), est.grid))


@dataclass(frozen=True)
class LyapunovCheck:
    k: np.ndarray
    fitted: np.ndarray
    predicted: np.ndarray
    gap: np.ndarray

    def correlation(self) -> float:
        ok = np.isfinite(self.fitted)
        if ok.sum() < 2:
            return math.nan
        return float(np.corrcoef(self.fitted[ok], self.predicted[ok])[0, 1])


def predicted_lyapunov(eigenvalues, alpha: float) -> np.ndarray:
    """-alpha/2 - (1/N) sum_{i != k} log|lambda_k - lambda_i|."""
    lam = np.asarray(eigenvalues, dtype=float)
    return -alpha / 2.0 - log_gap_sums(lam) / len(lam)


def lyapunov_thouless_check(dec: SpectralDecomposition, assignment: LocalizationAssignment,
                            params: ThermalParams, ks=None,
                            collar: int | None = None) -> LyapunovCheck:
    """Fitted decay exponents (negated decay rates) next to their Thouless prediction."""
    if ks is None:
        ks = range(dec.n)
    ks = np.asarray(list(ks), dtype=int)
    pred_all = predicted_lyapunov(dec.eigenvalues, params.alpha)
    fitted = np.array([-decay_profile(dec, int(k), assignment, collar).rate for k in ks])
    pred = pred_all[ks]
    return LyapunovCheck(ks, fitted, pred, np.abs(fitted - pred))


def velocity_system(eigenvalues, alpha: float) -> np.ndarray:
    """Matrix of the linear system  A v = lambda.

    Row k: v_k (1 + c sum_{i != k} l_ki) - c sum_{i != k} l_ki v_i with
    c = 2 / (alpha N) and l_ki = log|lambda_k - lambda_i|.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    n = len(lam)
    D = np.abs(lam[:, None] - lam[None, :])
    np.fill_diagonal(D, 1.0)
    ell = np.log(D)
    c = 2.0 / (alpha * n)
    A = -c * ell
    A[np.diag_indices(n)] = 1.0 + c * ell.sum(axis=1)
    return A


def effective_velocity_solve(eigenvalues, alpha: float, refine: int = 3) -> np.ndarray:
    """Solve the dressing equation for the effective velocities v(lambda_k)."""
    lam = np.asarray(eigenvalues, dtype=float)
    if alpha == 0 or not math.isfinite(alpha):
        raise VelocitySolveError("alpha must be finite and nonzero")
    if len(lam) > 1 and np.min(np.abs(np.diff(np.sort(lam)))) == 0.0:
        raise VelocitySolveError("coincident eigenvalues")
    A = velocity_system(lam, alpha)
    lu, piv = linalg.lu_factor(A, check_finite=True)
    anorm = np.linalg.norm(A, 1)
    rcond, info = linalg.lapack.dgecon(lu, anorm, norm="1")
    cond = math.inf if rcond == 0 else 1.0 / rcond
    if info != 0 or cond > MAX_CONDITION:
        raise VelocitySolveError(f"ill-conditioned system (condition ~ {cond:.3g})", cond)
    v = linalg.lu_solve((lu, piv), lam)
    for _ in range(refine):
        r = lam - A @ v
        v = v + linalg.lu_solve((lu, piv), r)
    return v


def velocity_row_residual(eigenvalues, alpha: float, v) -> float:
    lam = np.asarray(eigenvalues, dtype=float)
    return float(np.max(np.abs(velocity_system(lam, alpha) @ np.asarray(v) - lam)))


@dataclass(frozen=True)
class VelocityField:
    eigenvalues: np.ndarray
    solved: np.ndarray
    empirical: np.ndarray | None = None


@dataclass(frozen=True)
class VelocityComparison:
    correlation: float
    rms_relative_error: float
    table: np.ndarray    # columns: k, lambda, v_solved, v_empirical


def velocity_compare(field: VelocityField, bulk: np.ndarray | None = None) -> VelocityComparison:
    """Correlation and RMS relative error ||v_emp - v_solved|| / ||v_solved|| on bulk k."""
    if field.empirical is None:
        raise ValueError("empirical velocities missing")
    n = len(field.eigenvalues)
    sel = np.ones(n, dtype=bool) if bulk is None else np.asarray(bulk, dtype=bool)
    vs = field.solved[sel]
    ve = field.empirical[sel]
    table = np.column_stack((np.arange(n), field.eigenvalues, field.solved, field.empirical))[sel]
    if len(vs) < 2 or np.std(vs) == 0 or np.std(ve) == 0:
        corr = 1.0 if np.allclose(vs, ve) else math.nan
    else:
        corr = float(np.corrcoef(vs, ve)[0, 1])
    denom = float(np.linalg.norm(vs))
    rms = float(np.linalg.norm(ve - vs)) / denom if denom > 0 else 0.0
    return VelocityComparison(corr, rms, table)

"""Lax matrices, their eigendecomposition, truncations and transfer matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels
from .lattice import DomainSpec, FlaschkaState

QL_MAXIT = 60
# Entries at least this large are taken as computed by the eigensolver.
# Smaller ones lose relative accuracy and are rebuilt from the three-term
# recurrence in log space.
DIRECT_FLOOR = 1e-2
UNDERFLOW_FLAG = 1e-280


class EigensolverError(RuntimeError):
    def __init__(self, block: tuple[int, int], iterations: int):
        super().__init__(f"QL iteration did not converge in block {block} "
                         f"after {iterations} sweeps")
        self.block = block


class TransferError(ValueError):
    """Transfer matrix undefined (zero off-diagonal)."""


@dataclass(frozen=True)
class LaxMatrix:
    """Symmetric tridiagonal Lax matrix, plus a corner coupling on the torus.

    ``offdiag[i]`` couples local sites i and i+1 (length N-1); ``corner``
    couples the last and first sites.
    """

    domain: DomainSpec
    diag: np.ndarray
    offdiag: np.ndarray
    corner: float | None = None

    def __post_init__(self):
        d = np.array(self.diag, dtype=float)
        e = np.array(self.offdiag, dtype=float)
        if e.shape != (max(d.shape[0] - 1, 0),) or d.shape != (self.domain.n,):
            raise ValueError("diag must have length N and offdiag length N-1")
        d.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "offdiag", e)
        if self.domain.periodic and self.corner is None:
            raise ValueError("torus Lax matrix needs a corner entry")

    @property
    def n(self) -> int:
        return self.domain.n

    def dense(self) -> np.ndarray:
        n = self.n
        M = np.diag(self.diag)
        if n > 1:
            idx = np.arange(n - 1)
            M[idx, idx + 1] = self.offdiag
            M[idx + 1, idx] = self.offdiag
        if self.corner is not None:
            M[0, n - 1] += self.corner
            M[n - 1, 0] += self.corner
        return M

    def entry(self, i: int, j: int) -> float:
        """M_{ij} by site label (0 outside an open domain)."""
        dom = self.domain
        if not dom.periodic and not (dom.n1 <= i <= dom.n2 and dom.n1 <= j <= dom.n2):
            return 0.0
        return float(self.dense_entry(dom.local(i), dom.local(j)))

    def dense_entry(self, li: int, lj: int) -> float:
        n = self.n
        if li == lj:
            return float(self.diag[li] + (2 * self.corner if self.corner is not None and n == 1 else 0.0))
        lo, hi = min(li, lj), max(li, lj)
        val = 0.0
        if hi == lo + 1:
            val += self.offdiag[lo]
        if self.corner is not None and lo == 0 and hi == n - 1:
            val += self.corner
        return float(val)

    def shifted(self, c: float) -> "LaxMatrix":
        return LaxMatrix(self.domain, self.diag + c, self.offdiag, self.corner)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues in descending order; ``eigenvectors[k]`` is the unit vector u_k.

    Each u_k is nonnegatively normalized: its first nonzero entry is positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    matrix: LaxMatrix
    _log_abs: np.ndarray | None = None

    def __post_init__(self):
        for name in ("eigenvalues", "eigenvectors"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    @cached_property
    def log_abs(self) -> np.ndarray:
        """log|u_k(i)| as an (N, N) array, accurate far below double underflow."""
        if self._log_abs is not None:
            return self._log_abs
        with np.errstate(divide="ignore"):
            return np.log(np.abs(self.eigenvectors))

    def vector(self, k: int) -> np.ndarray:
        return self.eigenvectors[k]

    def orthogonality_residual(self) -> float:
        U = self.eigenvectors
        return float(np.max(np.abs(U @ U.T - np.eye(self.n))))

    def eigen_residual(self) -> float:
        """max_k ||L u_k - lambda_k u_k||_inf / max(1, |lambda_k|)."""
        M = self.matrix.dense()
        R = self.eigenvectors @ M - self.eigenvalues[:, None] * self.eigenvectors
        scale = np.maximum(1.0, np.abs(self.eigenvalues))
        return float(np.max(np.max(np.abs(R), axis=1) / scale))


def build_lax(f: FlaschkaState) -> LaxMatrix:
    a = np.asarray(f.a)
    if f.domain.periodic:
        return LaxMatrix(f.domain, f.b, a[:-1], float(a[-1]))
    return LaxMatrix(f.domain, f.b, a[:-1])


def lax_from_arrays(diag, offdiag, n1: int = 0) -> LaxMatrix:
    """Open Lax matrix on sites n1..n1+N-1 from raw diagonal/off-diagonal."""
    diag = np.asarray(diag, dtype=float)
    return LaxMatrix(DomainSpec.open(n1, n1 + len(diag) - 1), diag, offdiag)


def _blocks(offdiag: np.ndarray, n: int) -> list[tuple[int, int]]:
    cuts = np.flatnonzero(offdiag == 0.0)
    starts = np.concatenate(([0], cuts + 1))
    ends = np.concatenate((cuts, [n - 1]))
    return list(zip(starts.tolist(), ends.tolist()))


def _normalize_signs(U: np.ndarray) -> np.ndarray:
    # first entry above a relative noise floor is made positive
    mags = np.abs(U)
    thresh = 1e-8 * mags.max(axis=1, keepdims=True)
    first = np.argmax(mags > thresh, axis=1)
    s = np.sign(U[np.arange(U.shape[0]), first])
    s[s == 0] = 1.0
    return U * s[:, None]


def eig_tridiag(L: LaxMatrix, log_space: bool = True) -> SpectralDecomposition:
    """Full eigendecomposition.

    Open matrices are split at exact zero couplings and each block is solved
    by implicit QL. The torus corner breaks tridiagonality, so periodic
    matrices go through a dense symmetric solver.
    """
    n = L.n
    if L.domain.periodic:
        lam, V = np.linalg.eigh(L.dense())
        order = np.argsort(-lam, kind="stable")
        U = _normalize_signs(V[:, order].T)
        return SpectralDecomposition(lam[order], U, L)

    lam = np.empty(n)
    U = np.zeros((n, n))
    logU = np.full((n, n), -np.inf) if log_space else None
    for lo, hi in _blocks(L.offdiag, n):
        m = hi - lo + 1
        d = np.array(L.diag[lo:hi + 1])
        e = np.zeros(m)
        e[: m - 1] = L.offdiag[lo:hi]
        z = np.eye(m)
        status = _kernels.tql_implicit(d, e, z, True, QL_MAXIT)
        if status >= 0:
            raise EigensolverError((L.domain.n1 + lo, L.domain.n1 + hi), QL_MAXIT)
        z = _normalize_signs(z)
        lam[lo:hi + 1] = d
        if log_space and m > 1:
            lead = np.empty(m)
            lz = _kernels.log_abs_eigvecs(np.array(L.diag[lo:hi + 1]),
                                          np.array(L.offdiag[lo:hi]), d, z,
                                          DIRECT_FLOOR, lead)
            z *= lead[:, None]
            logU[lo:hi + 1, lo:hi + 1] = lz
        elif log_space:
            logU[lo, lo] = 0.0
        U[lo:hi + 1, lo:hi + 1] = z
    order = np.argsort(-lam, kind="stable")
    U = U[order]
    if log_space:
        logU = logU[order]
    return SpectralDecomposition(lam[order], U, L, logU)


def eigvals(L: LaxMatrix) -> np.ndarray:
    """Eigenvalues only, descending."""
    if L.domain.periodic:
        return np.sort(np.linalg.eigvalsh(L.dense()))[::-1]
    return eigvals_batch(L.diag[None, :], L.offdiag[None, :])[0]


def eigvals_batch(diag: np.ndarray, offdiag: np.ndarray) -> np.ndarray:
    """Descending eigenvalues of a stack of open tridiagonals (rows)."""
    diag = np.ascontiguousarray(diag, dtype=float)
    reps, n = diag.shape
    off = np.zeros((reps, n))
    off[:, : n - 1] = offdiag
    out = _kernels.batch_eigvals(diag, off, QL_MAXIT)
    if np.isnan(out).any():
        bad = int(np.flatnonzero(np.isnan(out).any(axis=1))[0])
        raise EigensolverError((bad, bad), QL_MAXIT)
    return out


# ---------------------------------------------------------------------------
# Truncations
# ---------------------------------------------------------------------------

def principal_submatrix(L: LaxMatrix, k: int, l: int) -> LaxMatrix:
    """Restriction of L to sites k..l (labels), as an open Lax matrix."""
    dom = L.domain
    if l < k:
        raise ValueError("empty restriction")
    if not (dom.n1 <= k and l <= dom.n2):
        raise ValueError(f"[{k}, {l}] not inside [{dom.n1}, {dom.n2}]")
    lk, ll = k - dom.n1, l - dom.n1
    return LaxMatrix(DomainSpec.open(k, l), L.diag[lk:ll + 1], L.offdiag[lk:ll])


def zero_out(L: LaxMatrix, sites) -> LaxMatrix:
    """Set every entry in the rows and columns of the given sites to 0."""
    dom = L.domain
    d = np.array(L.diag)
    e = np.array(L.offdiag)
    corner = L.corner
    n = L.n
    for s in sites:
        i = dom.local(s)
        d[i] = 0.0
        if i > 0:
            e[i - 1] = 0.0
        if i < n - 1:
            e[i] = 0.0
        if corner is not None and i in (0, n - 1):
            corner = 0.0
    return LaxMatrix(dom, d, e, corner)


# ---------------------------------------------------------------------------
# Transfer matrices
# ---------------------------------------------------------------------------

def coupling(L: LaxMatrix, i: int) -> float:
    """M_{i,i+1} by site label; zero past the ends of an open domain."""
    dom = L.domain
    if dom.periodic:
        li = dom.local(i)
        if li == L.n - 1:
            return float(L.corner)
        return float(L.offdiag[li])
    if dom.n1 <= i < dom.n2:
        return float(L.offdiag[i - dom.n1])
    return 0.0


def transfer_matrix(L: LaxMatrix, k: int, E: float) -> np.ndarray:
    """S_k(E), mapping (u_{k-1}, u_k) to (u_k, u_{k+1}) for solutions of Lu = Eu."""
    right = coupling(L, k)
    if right == 0.0:
        raise TransferError(f"transfer matrix undefined: zero coupling at site {k}")
    left = coupling(L, k - 1)
    diag = L.diag[L.domain.local(k)]
    return np.array([[0.0, 1.0], [-left / right, (E - diag) / right]])


def transfer_product(L: LaxMatrix, i: int, j: int, E: float) -> np.ndarray:
    """S_j(E) ... S_i(E)."""
    if j < i:
        return np.eye(2)
    S = np.eye(2)
    for k in range(i, j + 1):
        S = transfer_matrix(L, k, E) @ S
    return S


def _char_poly(L: LaxMatrix, k: int, l: int, E: float) -> float:
    if l < k:
        return 1.0
    mu = eigvals(principal_submatrix(L, k, l))
    return float(np.prod(E - mu))


def transfer_closed_form(L: LaxMatrix, i: int, j: int, E: float) -> np.ndarray:
    """S_{[i,j]}(E) through characteristic polynomials of truncations.

    Entries are products of (E - mu) over eigenvalues mu of the restrictions
    to [i+1, j-1], [i, j-1], [i+1, j] and [i, j], scaled by products of
    couplings. The top-left entry vanishes for a single step.
    """
    if j < i:
        return np.eye(2)
    left = coupling(L, i - 1)
    inv_short = 1.0 / np.prod([coupling(L, k) for k in range(i, j)]) if j > i else 1.0
    inv_long = inv_short / coupling(L, j)
    tl = 0.0 if j == i else -left * inv_short * _char_poly(L, i + 1, j - 1, E)
    tr = inv_short * _char_poly(L, i, j - 1, E)
    bl = -left * inv_long * _char_poly(L, i + 1, j, E)
    br = inv_long * _char_poly(L, i, j, E)
    return np.array([[tl, tr], [bl, br]])


@dataclass(frozen=True)
class PropagationResidual:
    absolute: float
    scaled: float       # absolute / max(1, ||S||_inf ||w_i||_inf)


def propagation_residual(L: LaxMatrix, dec: SpectralDecomposition, k: int, i: int,
                         j: int) -> PropagationResidual:
    """|S_{[i,j]}(lambda_k) w_i - w_{j+1}|_inf with w_m = (u_k(m-1), u_k(m)).

    Forming S w_i in floating point costs about ||S|| ||w_i|| eps, and ||S||
    grows exponentially along a decaying eigenvector, so the scaled value is
    the meaningful accuracy figure.
    """
    dom = L.domain
    u = dec.eigenvectors[k]

    def val(site):
        if dom.n1 <= site <= dom.n2:
            return u[site - dom.n1]
        return 0.0

    w_i = np.array([val(i - 1), val(i)])
    w_j = np.array([val(j), val(j + 1)])
    S = transfer_product(L, i, j, dec.eigenvalues[k])
    err = float(np.max(np.abs(S @ w_i - w_j)))
    amp = float(np.max(np.sum(np.abs(S), axis=1)) * np.max(np.abs(w_i)))
    return PropagationResidual(err, err / max(1.0, amp))


# ---------------------------------------------------------------------------
# Spectral identities and diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThoulessResult:
    residuals: np.ndarray
    max_residual: float
    underflow_guarded: bool


def log_gap_sums(lam: np.ndarray) -> np.ndarray:
    """sum_{i != k} log|lambda_k - lambda_i| for every k."""
    D = np.abs(lam[:, None] - lam[None, :])
    np.fill_diagonal(D, 1.0)
    return np.sum(np.log(D), axis=1)


def thouless_identity_residual(L: LaxMatrix,
                               dec: SpectralDecomposition | None = None) -> ThoulessResult:
    """Residual of log|u(first)| + log|u(last)| = sum log|couplings| - sum log gaps."""
    if L.domain.periodic:
        raise ValueError("identity is stated for open matrices")
    if np.any(L.offdiag == 0.0):
        raise ValueError("all couplings must be nonzero")
    if dec is None:
        dec = eig_tridiag(L)
    lg = dec.log_abs
    lhs = lg[:, 0] + lg[:, -1]
    rhs = np.sum(np.log(np.abs(L.offdiag))) - log_gap_sums(dec.eigenvalues)
    res = np.abs(lhs - rhs)
    guarded = bool(np.any(np.minimum(lg[:, 0], lg[:, -1]) < math.log(UNDERFLOW_FLAG)))
    return ThoulessResult(res, float(res.max()), guarded)


@dataclass(frozen=True)
class SpectralDiagnostics:
    min_gap: float
    max_abs_entry: float
    max_abs_eigenvalue: float


def spectral_diagnostics(L: LaxMatrix, lam: np.ndarray | None = None) -> SpectralDiagnostics:
    if lam is None:
        lam = eigvals(L)
    gap = float(np.min(-np.diff(lam))) if len(lam) > 1 else math.inf
    return SpectralDiagnostics(gap, float(np.max(np.abs(L.dense()))),
                               float(np.max(np.abs(lam))))


def min_gaps_batch(diag: np.ndarray, offdiag: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue gap of each open tridiagonal in a stack."""
    lam = eigvals_batch(diag, offdiag)
    return np.min(-np.diff(lam, axis=1), axis=1)

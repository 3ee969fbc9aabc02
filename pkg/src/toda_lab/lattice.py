"""Toda lattice states, coordinate changes and the Hamiltonian flow.

States are integrated in Flaschka variables (a, b). On the open interval the
last ``a`` is identically zero, so the boundary condition is exact and the
right-hand side is polynomial. Positions are reconstructed on demand; the
position of the first site is integrated alongside so that q(t) is available
at every sample, not only up to a global shift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels

OPEN = "open"
TORUS = "torus"


class LatticeError(ValueError):
    """Invalid lattice data (non-finite spacings, degenerate gaps, ...)."""


class IntegrationError(RuntimeError):
    """The time integrator could not produce a finite trajectory."""


@dataclass(frozen=True)
class DomainSpec:
    """Lattice geometry.

    Open intervals cover sites ``n1..n2``. A torus of size n uses the labels
    ``n1..n1+n-1`` (``n1 = 0`` unless chosen otherwise) and carries the
    period ``upsilon`` of the positions, q_{i+n} = q_i + upsilon.
    """

    kind: Literal["open", "torus"]
    n1: int
    n2: int
    upsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in (OPEN, TORUS):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.n2 < self.n1:
            raise ValueError(f"empty domain [{self.n1}, {self.n2}]")

    @classmethod
    def open(cls, n1: int, n2: int) -> "DomainSpec":
        return cls(OPEN, int(n1), int(n2))

    @classmethod
    def centered(cls, n: int) -> "DomainSpec":
        """Open interval of n sites with 0 in the middle."""
        n1 = -(int(n) // 2)
        return cls(OPEN, n1, n1 + int(n) - 1)

    @classmethod
    def torus(cls, n: int, upsilon: float = 0.0, n1: int = 0) -> "DomainSpec":
        if n < 1:
            raise ValueError("torus size must be positive")
        return cls(TORUS, int(n1), int(n1) + int(n) - 1, float(upsilon))

    @property
    def n(self) -> int:
        return self.n2 - self.n1 + 1

    @property
    def periodic(self) -> bool:
        return self.kind == TORUS

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.n1, self.n2 + 1)

    def local(self, site) -> int | np.ndarray:
        """Array position of a site label (wrapping on the torus)."""
        idx = np.asarray(site) - self.n1
        if self.periodic:
            idx = idx % self.n
        elif np.any((idx < 0) | (idx >= self.n)):
            raise IndexError(f"site {site} outside [{self.n1}, {self.n2}]")
        return int(idx) if np.ndim(idx) == 0 else idx

    def with_upsilon(self, upsilon: float) -> "DomainSpec":
        return DomainSpec(self.kind, self.n1, self.n2, float(upsilon))


@dataclass(frozen=True)
class TodaState:
    domain: DomainSpec
    p: np.ndarray
    q: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != (self.domain.n,) or q.shape != (self.domain.n,):
            raise ValueError("p and q must have one entry per site")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class FlaschkaState:
    """Flaschka variables of one configuration.

    ``q_first`` is the position of the first site (``n1``) when known; if it
    is None, positions are anchored by q_0 = 0.
    """

    domain: DomainSpec
    a: np.ndarray
    b: np.ndarray
    t: float = 0.0
    q_first: float | None = None

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        b = np.array(self.b, dtype=float)
        n = self.domain.n
        if a.shape != (n,) or b.shape != (n,):
            raise ValueError(f"a and b must have length {n}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise LatticeError("non-finite Flaschka variables")
        if np.any(a < 0):
            raise LatticeError("a must be nonnegative")
        if not self.domain.periodic and a[-1] != 0.0:
            raise LatticeError("open lattice requires a = 0 at the right edge")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.domain.n


def flaschka_from_state(s: TodaState) -> FlaschkaState:
    dom = s.domain
    q = s.q
    if dom.periodic:
        r = np.append(np.diff(q), q[0] + dom.upsilon - q[-1])
    else:
        r = np.append(np.diff(q), np.inf)
    if not np.all(np.isfinite(r[: dom.n - (0 if dom.periodic else 1)])):
        raise LatticeError("non-finite spacing")
    a = np.exp(-r / 2.0)
    if not dom.periodic:
        a[-1] = 0.0
    return FlaschkaState(dom, a, s.p.copy(), s.t, float(q[0]))


def _spacings(f: FlaschkaState) -> np.ndarray:
    dom = f.domain
    inner = f.a if dom.periodic else f.a[:-1]
    if np.any(inner <= 0.0):
        raise LatticeError("degenerate spacing (infinite gap)")
    return -2.0 * np.log(inner)


def state_from_flaschka(f: FlaschkaState) -> TodaState:
    """Positions from spacings r_i = -2 log a_i.

    Anchored at the tracked first-site position if present, otherwise at
    q_0 = 0 (site 0 must then lie in the domain). On the torus the period is
    set to the sum of all spacings.
    """
    dom = f.domain
    r = _spacings(f)
    steps = r[:-1] if dom.periodic else r
    q = np.concatenate(([0.0], np.cumsum(steps)))
    if f.q_first is not None:
        q += f.q_first
    else:
        if not (dom.n1 <= 0 <= dom.n2):
            raise LatticeError("site 0 not in domain; cannot anchor q_0 = 0")
        q -= q[-dom.n1]
    if dom.periodic:
        dom = dom.with_upsilon(float(np.sum(r)))
    return TodaState(dom, f.b.copy(), q, f.t)


def toda_rhs(f: FlaschkaState) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives (da/dt, db/dt) of the Flaschka flow."""
    a = np.ascontiguousarray(f.a)
    b = np.ascontiguousarray(f.b)
    da = np.empty_like(a)
    db = np.empty_like(b)
    _kernels.flaschka_rhs(a, b, f.domain.periodic, da, db)
    return da, db


def hamiltonian(s: TodaState) -> float:
    q = s.q
    if s.domain.periodic:
        qn = np.append(q[1:], q[0] + s.domain.upsilon)
        pot = np.exp(q - qn)
    else:
        pot = np.exp(q[:-1] - q[1:])
    return float(0.5 * np.sum(s.p**2) + np.sum(pot))


def hamiltonian_flaschka(a: np.ndarray, b: np.ndarray) -> float:
    """(1/2) sum b^2 + sum a^2, equal to :func:`hamiltonian` of the same state."""
    return float(0.5 * np.dot(b, b) + np.dot(a, a))


def torus_invariants(f: FlaschkaState) -> tuple[float, float]:
    """The two conserved sums  sum log a_j  and  sum (2 a_j^2 + b_j^2)."""
    if not f.domain.periodic:
        raise ValueError("torus_invariants needs a periodic domain")
    if np.any(f.a == 0.0):
        raise LatticeError("log of zero")
    return float(np.sum(np.log(f.a))), float(np.sum(2.0 * f.a**2 + f.b**2))


def entry_bounds(a: np.ndarray, b: np.ndarray) -> float:
    """max|a| + max|b|, the quantity controlled by the factor-6 stability bound."""
    return float(np.max(np.abs(a)) + np.max(np.abs(b)))


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegratorConfig:
    step: float = 1e-3
    scheme: Literal["rk4", "rk45"] = "rk4"
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    sample_every: float | None = None
    min_step: float = 1e-12

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.scheme not in ("rk4", "rk45"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.sample_every is not None and not self.sample_every > 0:
            raise ValueError("sample_every must be positive")

    def sample_times(self, T: float) -> np.ndarray:
        if T == 0:
            return np.array([0.0])
        dt = self.sample_every if self.sample_every is not None else T / 100.0
        dt = max(dt, self.step)
        count = int(math.floor(T / dt + 1e-9))
        times = dt * np.arange(count + 1)
        if T - times[-1] > 1e-9 * max(1.0, T):
            times = np.append(times, T)
        else:
            times[-1] = T
        return times


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution. Arrays are (n_samples, N) and read-only."""

    domain: DomainSpec
    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    q_first: np.ndarray
    conserved_drift: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("times", "a", "b", "q_first"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def sample(self, i: int) -> FlaschkaState:
        return FlaschkaState(self.domain, self.a[i], self.b[i], float(self.times[i]),
                             float(self.q_first[i]))

    @property
    def samples(self) -> list[FlaschkaState]:
        return [self.sample(i) for i in range(len(self))]

    def positions(self, i: int) -> np.ndarray:
        return state_from_flaschka(self.sample(i)).q

    def reversed(self) -> "Trajectory":
        """Same samples in reverse order, re-timed as t -> T - t."""
        T = self.times[-1]
        return Trajectory(self.domain, T - self.times[::-1], self.a[::-1], self.b[::-1],
                          self.q_first[::-1], {})

    def max_isospectral_drift(self) -> float:
        from .spectral import build_lax, eigvals

        lam0 = eigvals(build_lax(self.sample(0)))
        return float(max(np.max(np.abs(eigvals(build_lax(self.sample(i))) - lam0))
                         for i in range(len(self))))


def _initial_q_first(f0: FlaschkaState) -> float:
    if f0.q_first is not None:
        return float(f0.q_first)
    return float(state_from_flaschka(f0).q[0])


def _drift_record(times, a, b) -> dict:
    H = 0.5 * np.sum(b**2, axis=1) + np.sum(a**2, axis=1)
    tr1 = np.sum(b, axis=1)
    tr2 = np.sum(b**2, axis=1) + 2.0 * np.sum(a**2, axis=1)
    return {
        "time": times.copy(),
        "hamiltonian": H,
        "trace_L": tr1,
        "trace_L2": tr2,
        "hamiltonian_drift": np.abs(H - H[0]),
        "trace_L_drift": np.abs(tr1 - tr1[0]),
        "trace_L2_drift": np.abs(tr2 - tr2[0]),
    }


def evolve(f0: FlaschkaState, cfg: IntegratorConfig, T: float) -> Trajectory:
    """Integrate the Flaschka flow from ``f0`` up to time ``f0.t + T``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    times = cfg.sample_times(float(T))
    dom = f0.domain
    a = np.array(f0.a, dtype=float)
    b = np.array(f0.b, dtype=float)
    q0 = np.array([_initial_q_first(f0)])
    n_s = len(times)
    A = np.empty((n_s, dom.n))
    B = np.empty((n_s, dom.n))
    Q = np.empty(n_s)
    A[0], B[0], Q[0] = a, b, q0[0]
    if cfg.scheme == "rk4":
        for s in range(1, n_s):
            seg = times[s] - times[s - 1]
            nsteps = max(1, int(math.ceil(seg / cfg.step - 1e-9)))
            _kernels.rk4_advance(a, b, q0, dom.periodic, seg / nsteps, nsteps)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise IntegrationError(f"non-finite state at t={f0.t + times[s]:.6g}")
            A[s], B[s], Q[s] = a, b, q0[0]
    else:
        A, B, Q = _evolve_adaptive(dom, a, b, q0[0], times, cfg)
    drift = _drift_record(times, A, B)
    return Trajectory(dom, f0.t + times, A, B, Q, drift)


def _evolve_adaptive(dom, a, b, q0, times, cfg):
    from scipy.integrate import RK45

    n = dom.n
    periodic = dom.periodic

    def rhs(_t, y):
        da = np.empty(n)
        db = np.empty(n)
        _kernels.flaschka_rhs(y[:n], y[n:2 * n], periodic, da, db)
        return np.concatenate((da, db, [y[n]]))

    y0 = np.concatenate((a, b, [q0]))
    Y = np.empty((len(y0), len(times)))
    Y[:, 0] = y0
    if len(times) > 1:
        solver = RK45(rhs, 0.0, y0, times[-1], rtol=cfg.rel_tol, atol=cfg.abs_tol,
                      first_step=min(cfg.step, times[-1]))
        s = 1
        while s < len(times):
            msg = solver.step()
            if solver.status == "failed" or (solver.status == "running"
                                             and solver.step_size < cfg.min_step):
                raise IntegrationError(f"stiffness failure at t={solver.t:.6g}: "
                                       f"{msg or 'step below minimum'}")
            if not np.all(np.isfinite(solver.y)):
                raise IntegrationError(f"non-finite state at t={solver.t:.6g}")
            dense = solver.dense_output()
            while s < len(times) and times[s] <= solver.t:
                Y[:, s] = solver.y if times[s] == solver.t else dense(times[s])
                s += 1
    A = Y[:n].T.copy()
    if not periodic:
        A[:, -1] = 0.0
    return A, Y[n:2 * n].T.copy(), Y[2 * n].copy()

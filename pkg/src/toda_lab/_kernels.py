"""Compiled inner loops: Flaschka RK4 stepping, implicit QL, log-space eigenvector tails.

Everything here works on plain float64 arrays in local (0-based) indexing.
The public wrappers in the sibling modules own validation and domain labels.
"""
import math

import numpy as np
from numba import njit

EPS = np.finfo(np.float64).eps


# ---------------------------------------------------------------------------
# Flaschka flow
# ---------------------------------------------------------------------------

@njit(cache=True)
def flaschka_rhs(a, b, periodic, da, db):
    n = a.shape[0]
    for j in range(n):
        if j + 1 < n:
            bn = b[j + 1]
        elif periodic:
            bn = b[0]
        else:
            bn = 0.0
        if j > 0:
            ap = a[j - 1]
        elif periodic:
            ap = a[n - 1]
        else:
            ap = 0.0
        da[j] = 0.5 * a[j] * (b[j] - bn)
        db[j] = ap * ap - a[j] * a[j]
    if not periodic:
        da[n - 1] = 0.0


@njit(cache=True)
def rk4_advance(a, b, q0, periodic, h, nsteps):
    """Advance (a, b, q_first) in place by ``nsteps`` classical RK4 steps.

    ``q0`` is a length-1 array carrying q at the first site, integrated
    alongside via dq/dt = b[0].
    """
    n = a.shape[0]
    k1a = np.empty(n)
    k1b = np.empty(n)
    k2a = np.empty(n)
    k2b = np.empty(n)
    k3a = np.empty(n)
    k3b = np.empty(n)
    k4a = np.empty(n)
    k4b = np.empty(n)
    ta = np.empty(n)
    tb = np.empty(n)
    for _ in range(nsteps):
        flaschka_rhs(a, b, periodic, k1a, k1b)
        for j in range(n):
            ta[j] = a[j] + 0.5 * h * k1a[j]
            tb[j] = b[j] + 0.5 * h * k1b[j]
        q1 = b[0]
        flaschka_rhs(ta, tb, periodic, k2a, k2b)
        q2 = tb[0]
        for j in range(n):
            ta[j] = a[j] + 0.5 * h * k2a[j]
            tb[j] = b[j] + 0.5 * h * k2b[j]
        flaschka_rhs(ta, tb, periodic, k3a, k3b)
        q3 = tb[0]
        for j in range(n):
            ta[j] = a[j] + h * k3a[j]
            tb[j] = b[j] + h * k3b[j]
        flaschka_rhs(ta, tb, periodic, k4a, k4b)
        q4 = tb[0]
        for j in range(n):
            a[j] += h / 6.0 * (k1a[j] + 2.0 * k2a[j] + 2.0 * k3a[j] + k4a[j])
            b[j] += h / 6.0 * (k1b[j] + 2.0 * k2b[j] + 2.0 * k3b[j] + k4b[j])
        q0[0] += h / 6.0 * (q1 + 2.0 * q2 + 2.0 * q3 + q4)
        if not periodic:
            a[n - 1] = 0.0


@njit(cache=True)
def _coupled_rhs(a, b, da_, db_, ka, kb, kda, kdb):
    # (a, b): open lattice, wrap-indexed (valid since a[n-1] == 0).
    # (da_, db_): torus minus open, written so no difference of nearby
    # numbers is ever formed.
    n = a.shape[0]
    for j in range(n):
        jn = j + 1 if j + 1 < n else 0
        jp = j - 1 if j > 0 else n - 1
        ka[j] = 0.5 * a[j] * (b[j] - b[jn])
        kb[j] = a[jp] * a[jp] - a[j] * a[j]
        big_a = a[j] + da_[j]
        kda[j] = 0.5 * (da_[j] * (b[j] - b[jn]) + big_a * (db_[j] - db_[jn]))
        kdb[j] = da_[jp] * (2.0 * a[jp] + da_[jp]) - da_[j] * (2.0 * a[j] + da_[j])
    ka[n - 1] = 0.0


@njit(cache=True)
def coupled_advance(a, b, da_, db_, h, nsteps, lo, hi, gmax, hmax):
    """RK4 for an open lattice and its torus-minus-open difference.

    After every step, for each window ``[lo[w], hi[w]]`` the running maxima of
    ``max|da| + max|db|`` (into ``gmax[w]``) and of
    ``max|a| + max|A| + max|b| + max|B|`` (into ``hmax[w]``) are updated.
    """
    n = a.shape[0]
    nw = lo.shape[0]
    k = np.empty((4, 4, n))
    t = np.empty((4, n))
    for _ in range(nsteps):
        _coupled_rhs(a, b, da_, db_, k[0, 0], k[0, 1], k[0, 2], k[0, 3])
        for j in range(n):
            t[0, j] = a[j] + 0.5 * h * k[0, 0, j]
            t[1, j] = b[j] + 0.5 * h * k[0, 1, j]
            t[2, j] = da_[j] + 0.5 * h * k[0, 2, j]
            t[3, j] = db_[j] + 0.5 * h * k[0, 3, j]
        _coupled_rhs(t[0], t[1], t[2], t[3], k[1, 0], k[1, 1], k[1, 2], k[1, 3])
        for j in range(n):
            t[0, j] = a[j] + 0.5 * h * k[1, 0, j]
            t[1, j] = b[j] + 0.5 * h * k[1, 1, j]
            t[2, j] = da_[j] + 0.5 * h * k[1, 2, j]
            t[3, j] = db_[j] + 0.5 * h * k[1, 3, j]
        _coupled_rhs(t[0], t[1], t[2], t[3], k[2, 0], k[2, 1], k[2, 2], k[2, 3])
        for j in range(n):
            t[0, j] = a[j] + h * k[2, 0, j]
            t[1, j] = b[j] + h * k[2, 1, j]
            t[2, j] = da_[j] + h * k[2, 2, j]
            t[3, j] = db_[j] + h * k[2, 3, j]
        _coupled_rhs(t[0], t[1], t[2], t[3], k[3, 0], k[3, 1], k[3, 2], k[3, 3])
        for j in range(n):
            a[j] += h / 6.0 * (k[0, 0, j] + 2.0 * k[1, 0, j] + 2.0 * k[2, 0, j] + k[3, 0, j])
            b[j] += h / 6.0 * (k[0, 1, j] + 2.0 * k[1, 1, j] + 2.0 * k[2, 1, j] + k[3, 1, j])
            da_[j] += h / 6.0 * (k[0, 2, j] + 2.0 * k[1, 2, j] + 2.0 * k[2, 2, j] + k[3, 2, j])
            db_[j] += h / 6.0 * (k[0, 3, j] + 2.0 * k[1, 3, j] + 2.0 * k[2, 3, j] + k[3, 3, j])
        a[n - 1] = 0.0
        for w in range(nw):
            ma = 0.0
            mb = 0.0
            xa = 0.0
            xA = 0.0
            xb = 0.0
            xB = 0.0
            for j in range(lo[w], hi[w] + 1):
                ma = max(ma, abs(da_[j]))
                mb = max(mb, abs(db_[j]))
                xa = max(xa, abs(a[j]))
                xA = max(xA, abs(a[j] + da_[j]))
                xb = max(xb, abs(b[j]))
                xB = max(xB, abs(b[j] + db_[j]))
            gmax[w] = max(gmax[w], ma + mb)
            hmax[w] = max(hmax[w], xa + xA + xb + xB)


# ---------------------------------------------------------------------------
# Symmetric tridiagonal eigensolver (implicit QL, Wilkinson-type shift)
# ---------------------------------------------------------------------------

@njit(cache=True)
def tql_implicit(d, e, z, want_vectors, maxit):
    """Diagonalize the tridiagonal (d, e) in place.

    ``e[i]`` couples i and i+1; ``e`` must have length n with ``e[n-1]``
    unused. On exit ``d`` holds eigenvalues (unsorted) and row i of ``z``
    the eigenvector of ``d[i]`` when ``want_vectors``. Returns -1 on
    success, otherwise the index l of the block that failed to converge.
    """
    n = d.shape[0]
    e[n - 1] = 0.0
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= EPS * dd:
                    break
                m += 1
            if m == l:
                break
            if it == maxit:
                return l
            it += 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            early = False
            while i >= l:
                f = s * e[i]
                bb = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    early = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * bb
                p = s * r
                d[i + 1] = g + p
                g = c * r - bb
                if want_vectors:
                    for k in range(n):
                        f = z[i + 1, k]
                        z[i + 1, k] = s * z[i, k] + c * f
                        z[i, k] = c * z[i, k] - s * f
                i -= 1
            if early:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return -1


@njit(cache=True)
def batch_eigvals(diag, off, maxit):
    """Eigenvalues (descending) for a stack of tridiagonals, one per row."""
    reps, n = diag.shape
    out = np.empty((reps, n))
    z = np.empty((1, 1))
    for r in range(reps):
        d = diag[r].copy()
        e = np.zeros(n)
        e[: n - 1] = off[r, : n - 1]
        status = tql_implicit(d, e, z, False, maxit)
        if status >= 0:
            for i in range(n):
                out[r, i] = np.nan
            continue
        d.sort()
        for i in range(n):
            out[r, i] = d[n - 1 - i]
    return out


# ---------------------------------------------------------------------------
# Log-space eigenvector entries via transfer propagation
# ---------------------------------------------------------------------------

@njit(cache=True)
def log_abs_eigvecs(d, e, lam, u, direct_floor, lead_sign):
    """log|u_k(i)| for every eigenpair, resolving entries far below round-off.

    Row k of ``u`` is the computed unit eigenvector for ``lam[k]``; all
    ``e`` (length n-1) must be nonzero. Entries whose computed magnitude is
    at least ``direct_floor`` are taken as computed. Smaller ones come from
    propagating the three-term recurrence inward from the nearer end
    (the growing direction), anchored at the entry of largest magnitude.
    ``lead_sign[k]`` receives the sign of u_k at the first site, read off the
    recurrence so it is reliable even when that entry underflows.
    """
    n = d.shape[0]
    out = np.empty((n, n))
    logpsi = np.empty(n)
    big = 1e150
    for k in range(n):
        lk = lam[k]
        m = 0
        best = 0.0
        for i in range(n):
            if abs(u[k, i]) > best:
                best = abs(u[k, i])
                m = i
        # left end -> m
        prev = 0.0
        cur = 1.0
        scale = 0.0
        logpsi[0] = 0.0
        for i in range(m):
            ep = e[i - 1] if i > 0 else 0.0
            nxt = ((lk - d[i]) * cur - ep * prev) / e[i]
            prev = cur
            cur = nxt
            ac = abs(cur)
            if ac > big or (ac < 1.0 / big and ac > 0.0):
                prev /= ac
                cur /= ac
                scale += math.log(ac)
                ac = 1.0
            logpsi[i + 1] = (math.log(ac) if ac > 0.0 else -np.inf) + scale
        sm = 1.0 if u[k, m] >= 0.0 else -1.0
        if m > 0 and cur < 0.0:
            sm = -sm
        lead_sign[k] = sm
        anchor = math.log(best)
        for i in range(m + 1):
            out[k, i] = logpsi[i] - logpsi[m] + anchor
        # right end -> m
        prev = 0.0
        cur = 1.0
        scale = 0.0
        logpsi[n - 1] = 0.0
        for i in range(n - 1, m, -1):
            en = e[i] if i < n - 1 else 0.0
            nxt = ((lk - d[i]) * cur - en * prev) / e[i - 1]
            prev = cur
            cur = nxt
            ac = abs(cur)
            if ac > big or (ac < 1.0 / big and ac > 0.0):
                prev /= ac
                cur /= ac
                scale += math.log(ac)
                ac = 1.0
            logpsi[i - 1] = (math.log(ac) if ac > 0.0 else -np.inf) + scale
        for i in range(m + 1, n):
            out[k, i] = logpsi[i] - logpsi[m] + anchor
        for i in range(n):
            ai = abs(u[k, i])
            if ai >= direct_floor:
                out[k, i] = math.log(ai)
    return out

"""Linear averaged system with a constant contraction matrix ``H``.

``calH[i, j] = prod_{r=i+1}^{j} (I + gamma_r H)`` and
``bar_calH[i, j] = sum_{r=i}^{j} (gamma_i b_r / b_i) calH[i, r]``.
The averaged system is ``Xi_n = (1/bbar_n) sum_i b_i bar_calH[i, n] D_i`` over the
averaging window.  It is evaluated with the forward recursion
``Y_r = (I + gamma_r H) Y_{r-1} + gamma_r D_r``, ``Y_{n0} = 0``, which gives
``Xi_n = (1/bbar_n) sum_r b_r Y_r`` in ``O(n)`` matrix-vector work.
"""

import numpy as np
from numba import njit

from .noise import factorize
from .schedules import burn_in, clock
from .streams import ORACLE_NOISE, fill_normals


class SingularMatrixError(ValueError):
    pass


class ProductMatrices:
    """Constant symmetric ``H`` with spectrum in ``[-C, -L]`` and a schedule."""

    def __init__(self, H, params):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        if H.shape[0] != H.shape[1] or not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ValueError("H must be a symmetric square matrix")
        w = np.linalg.eigvalsh(H)
        if w.max() >= 0:
            if np.any(w == 0):
                raise SingularMatrixError("H is singular")
            raise ValueError(f"H must be negative definite, largest eigenvalue {w.max():.3g}")
        self.H = np.ascontiguousarray(0.5 * (H + H.T))
        self.params = params
        self.L = float(-w.max())
        self.C = float(-w.min())
        self.H_inv = np.linalg.inv(self.H)
        self._eig = np.linalg.eigh(self.H)
        self._clock = {}

    @property
    def dim(self):
        return self.H.shape[0]

    def clock(self, n):
        if n not in self._clock:
            self._clock[n] = clock(n, self.params)
        return self._clock[n]

    def _sched(self):
        p = self.params
        return p.c_gamma, p.gamma_exp, float(p.rho)


def operator_norm(M):
    """Largest singular value, from the symmetric eigenproblem of ``M.T @ M``."""
    M = np.atleast_2d(M)
    return float(np.sqrt(max(np.linalg.eigvalsh(M.T @ M).max(), 0.0)))


@njit(cache=True, nogil=True)
def _gamma(r, cg, ge):
    return cg * float(r) ** -ge


@njit(cache=True, nogil=True)
def _weight(r, rho):
    return 1.0 if rho == 0.0 else float(r) ** rho


@njit(cache=True, nogil=True)
def _calH(H, i, j, cg, ge):
    d = H.shape[0]
    P = np.eye(d)
    for r in range(i + 1, j + 1):
        P = P + _gamma(r, cg, ge) * (H @ P)
    return P


@njit(cache=True, nogil=True)
def _bar_calH(H, i, j, cg, ge, rho):
    d = H.shape[0]
    P = np.eye(d)
    acc = _weight(i, rho) * np.eye(d)
    for r in range(i + 1, j + 1):
        P = P + _gamma(r, cg, ge) * (H @ P)
        acc = acc + _weight(r, rho) * P
    return (_gamma(i, cg, ge) / _weight(i, rho)) * acc


def calH(i, j, pm):
    if i > j:
        raise ValueError(f"need i <= j, got {i} > {j}")
    cg, ge, _ = pm._sched()
    return _calH(pm.H, int(i), int(j), cg, ge)


def bar_calH(i, j, pm):
    if i > j:
        raise ValueError(f"need i <= j, got {i} > {j}")
    return _bar_calH(pm.H, int(i), int(j), *pm._sched())


def check_limit(l, n, pm):
    """``|| bar_calH[l, n] + H^{-1} ||``; small once ``t_n - t_l`` is large."""
    return operator_norm(bar_calH(l, n, pm) + pm.H_inv)


@njit(cache=True, nogil=True)
def _bar_norm_sweep(w, l_min, n, cg, ge, rho):
    # in the eigenbasis of H every bar_calH[l, n] is diagonal:
    # G_n = b_n, G_l = b_l + (1 + gamma_{l+1} w) G_{l+1}, bar_calH[l, n] = gamma_l G_l / b_l
    k = w.shape[0]
    G = np.full(k, _weight(n, rho))
    out = np.empty(n - l_min + 1)
    for l in range(n, l_min - 1, -1):
        if l < n:
            g1 = _gamma(l + 1, cg, ge)
            bl = _weight(l, rho)
            for a in range(k):
                G[a] = bl + (1.0 + g1 * w[a]) * G[a]
        s = _gamma(l, cg, ge) / _weight(l, rho)
        m = 0.0
        for a in range(k):
            v = abs(s * G[a])
            if v > m:
                m = v
        out[l - l_min] = m
    return out


def bar_norms(l_min, n, pm):
    """``|| bar_calH[l, n] ||`` for ``l = l_min .. n`` in one backward sweep."""
    if not 1 <= l_min <= n:
        raise ValueError("need 1 <= l_min <= n")
    return _bar_norm_sweep(pm._eig[0], int(l_min), int(n), *pm._sched())


def uniform_bound(l_min, n, pm):
    return float(bar_norms(l_min, n, pm).max())


@njit(cache=True, nogil=True)
def _xi(H, L, n0, n, cg, ge, rho, k0, k1, scale):
    d = H.shape[0]
    Y = np.zeros(d)
    z = np.empty(d)
    D = np.empty(d)
    acc = np.zeros(d)
    HY = np.empty(d)
    bsum = 0.0
    for r in range(n0 + 1, n + 1):
        g = _gamma(r, cg, ge)
        b = _weight(r, rho)
        fill_normals(k0, k1, r, ORACLE_NOISE, z)
        for i in range(d):
            s = 0.0
            for j in range(i + 1):
                s += L[i, j] * z[j]
            D[i] = scale * s
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += H[i, j] * Y[j]
            HY[i] = s
        for i in range(d):
            Y[i] = Y[i] + g * HY[i] + g * D[i]
            acc[i] += b * Y[i]
        bsum += b
    return acc / bsum


def simulate_xi(n, pm, Gamma_theta, p=None, rng=None, scale=1.0):
    """One draw of ``Xi_n`` with Gaussian ``D_i ~ N(0, scale^2 Gamma_theta)``.

    ``p`` defaults to the schedule held by ``pm``; ``rng`` is a ``Stream``.
    """
    if rng is None:
        raise ValueError("simulate_xi needs a stream")
    p = p or pm.params
    L = factorize(np.atleast_2d(np.asarray(Gamma_theta, dtype=float)))
    if L.shape != pm.H.shape:
        raise ValueError("covariance shape does not match H")
    n0 = burn_in(n, p.beta)
    return _xi(pm.H, L, n0, int(n), p.c_gamma, p.gamma_exp, float(p.rho),
               rng.key[0], rng.key[1], float(scale))


def xi_limit_covariance(pm, Gamma_theta):
    """``H^{-1} Gamma H^{-T}``."""
    G = np.atleast_2d(np.asarray(Gamma_theta, dtype=float))
    C = pm.H_inv @ G @ pm.H_inv.T
    return 0.5 * (C + C.T)

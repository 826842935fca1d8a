"""Robbins-Monro iteration with weighted, burned-in Ruppert-Polyak averaging.

The per-step loop is compiled.  A replication keeps only prefix sums and
``K`` horizon snapshots, so memory is ``O(d * K)`` whatever the horizon.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as K
from .geometry import GeometryError, OutsideTubeError
from .noise import STATE_DEPENDENT, noise_into, sample
from .schedules import RegularityTriple, burn_in, step_size, zeta_drift_bound
from .streams import Stream

OK = 0
TUBE_EXIT = 1
DIVERGED = 2
STATUS = {OK: "ok", TUBE_EXIT: "tube_exit", DIVERGED: "diverged"}

DEFAULT_HORIZONS = tuple(int(round(10 ** e)) for e in (3, 3.5, 4, 4.5, 5))


class DivergenceError(ArithmeticError):
    def __init__(self, step):
        super().__init__(f"diverged at step {step}")
        self.step = step


def rm_step(x, n, prob, p, model, rng):
    """``x + gamma_n (f(x) + D_n)``; the gradient is evaluated before the noise draw."""
    x = np.asarray(x, dtype=float)
    g = prob.gradient(x)
    D = sample(model, x, n, rng)
    out = x + step_size(n, p) * (g + D)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(n)
    return out


@njit(cache=True, nogil=True, error_model="numpy")
def _kahan(s, comp, v):
    y = v - comp
    t = s + y
    return t, (t - s) - y


@njit(cache=True, nogil=True, error_model="numpy")
def _chart_gap(kind, dz, x, ref, t, t_ref):
    """Tangential distance between the chart coordinates of ``x`` and ``ref``.

    Negative return value: ``x`` left the chart around ``ref``.
    """
    if kind == K.FLAT:
        s = 0.0
        for i in range(dz):
            s += (x[i] - ref[i]) ** 2
        return math.sqrt(s)
    if kind == K.SPHERE:
        nx = 0.0
        nr = 0.0
        for i in range(x.shape[0]):
            nx += x[i] * x[i]
            nr += ref[i] * ref[i]
        nx = math.sqrt(nx)
        nr = math.sqrt(nr)
        dm = 0.0
        dp = 0.0
        for i in range(x.shape[0]):
            dm += (x[i] / nx - ref[i] / nr) ** 2
            dp += (x[i] / nx + ref[i] / nr) ** 2
        if dm >= dp:
            return -1.0
        # angle between unit vectors, accurate for small angles (acos is not)
        return 2.0 * math.atan2(math.sqrt(dm), math.sqrt(dp))
    return abs(t - t_ref)


@njit(cache=True, nogil=True, error_model="numpy")
def _simulate(kind, dz, A, c, x0, c_gamma, gamma_exp, rho, noise_kind, L, k0, k1,
              horizons, n0s, check_from, tube_radius, a_lo, a_hi):
    d = x0.shape[0]
    nh = horizons.shape[0]
    N = horizons[nh - 1]
    x = x0.copy()
    g = np.empty(d)
    D = np.empty(d)
    z = np.empty(d)
    S = np.zeros(d)
    Sc = np.zeros(d)
    W = 0.0
    Wc = 0.0
    S0 = np.zeros((nh, d))
    W0 = np.zeros(nh)
    refs = np.zeros((nh, d))
    ref_t = np.zeros(nh)
    drift = np.zeros(nh)
    censored = np.zeros(nh, dtype=np.bool_)
    Xh = np.full((nh, d), np.nan)
    Sh = np.full((nh, d), np.nan)
    Wh = np.full(nh, np.nan)
    dist_h = np.full(nh, np.nan)
    status = 0
    fail = 0

    dist, t = K.distance(kind, x, dz, c)
    for k in range(nh):
        if n0s[k] == 0:
            refs[k] = x
            ref_t[k] = t
    hk = 0
    for n in range(1, N + 1):
        gn = c_gamma * n ** -gamma_exp
        K.gradient_into(kind, x, dz, A, c, g)
        infl = 0.0
        if noise_kind == STATE_DEPENDENT:
            infl = min(K.distance(kind, x, dz, c)[0], 1.0)
        noise_into(noise_kind, L, infl, k0, k1, n, z, D)
        finite = True
        for i in range(d):
            x[i] = x[i] + gn * (g[i] + D[i])
            if not np.isfinite(x[i]):
                finite = False
        if not finite:
            status = 2
            fail = n
            break
        b = 1.0 if rho == 0.0 else float(n) ** rho
        for i in range(d):
            S[i], Sc[i] = _kahan(S[i], Sc[i], b * x[i])
        W, Wc = _kahan(W, Wc, b)

        dist, t = K.distance(kind, x, dz, c)
        inside = dist < tube_radius
        if kind == K.HYPERBOLA:
            inside = inside and a_lo <= t <= a_hi
        if n >= check_from and not inside:
            status = 1
            fail = n
            break

        for k in range(nh):
            if n0s[k] == n:
                for i in range(d):
                    S0[k, i] = S[i] - Sc[i]
                W0[k] = W - Wc
                refs[k] = x
                ref_t[k] = t
            elif n0s[k] < n <= horizons[k] and not censored[k]:
                gap = _chart_gap(kind, dz, x, refs[k], t, ref_t[k])
                if gap < 0:
                    censored[k] = True
                elif gap > drift[k]:
                    drift[k] = gap
        if n == horizons[hk]:
            for i in range(d):
                Xh[hk, i] = x[i]
                Sh[hk, i] = S[i] - Sc[i]
            Wh[hk] = W - Wc
            dist_h[hk] = dist
            hk += 1
    return Xh, Sh, Wh, S0, W0, dist_h, drift, censored, status, fail


@dataclass(eq=False)
class SimulationSpec:
    """Everything a replication needs besides its seed and index."""

    problem: object
    params: object
    noise: object
    horizons: tuple = DEFAULT_HORIZONS
    initial_distance: float = 0.1
    check_from: int = None      # default: first step of the first averaging window

    def __post_init__(self):
        h = tuple(int(v) for v in self.horizons)
        if any(b <= a for a, b in zip(h, h[1:])) or h[0] < 1:
            raise ValueError(f"horizons must be strictly increasing positive integers, got {h}")
        self.horizons = h
        if not 0 < self.initial_distance < self.problem.tube.tube_radius:
            raise ValueError("initial distance must lie inside the tube")
        if self.noise.dim != self.problem.dim:
            raise ValueError("noise dimension does not match the problem")
        if self.check_from is None:
            self.check_from = burn_in(h[0], self.params.beta) + 1

    @property
    def burn_ins(self):
        return tuple(burn_in(n, self.params.beta) for n in self.horizons)


@dataclass(eq=False)
class Trajectory:
    horizons: tuple
    burn_ins: tuple
    x: np.ndarray
    xbar: np.ndarray
    xbar_proj: np.ndarray
    dist: np.ndarray
    F_x: np.ndarray
    F_xbar: np.ndarray
    drift: np.ndarray
    drift_censored: np.ndarray
    status: str
    fail_step: int
    x0: np.ndarray
    seed: int
    replication: int
    problem: object = field(repr=False, default=None)
    params: object = field(repr=False, default=None)

    @property
    def converged(self):
        if self.status != "ok":
            return False
        return bool(self.dist[-1] < self.problem.tube.tube_radius)

    def index(self, n):
        try:
            return self.horizons.index(int(n))
        except ValueError:
            raise KeyError(f"{n} is not a recorded horizon {self.horizons}") from None


def run_replication(spec, seed, replication_index):
    prob, p, model = spec.problem, spec.params, spec.noise
    stream = Stream(seed, replication_index)
    x0 = prob.start_point(spec.initial_distance, stream)
    kid, dz, A, c = prob.kernel_args()
    a_lo, a_hi = getattr(prob, "a_range", (0.0, 0.0))
    Xh, Sh, Wh, S0, W0, dist, drift, cens, status, fail = _simulate(
        kid, dz, A, c, x0, p.c_gamma, p.gamma_exp, float(p.rho), model.kind_id, model.L,
        stream.key[0], stream.key[1],
        np.asarray(spec.horizons, dtype=np.int64), np.asarray(spec.burn_ins, dtype=np.int64),
        int(spec.check_from), prob.tube.tube_radius, a_lo, a_hi,
    )
    xbar = (Sh - S0) / (Wh - W0)[:, None]
    nh = len(spec.horizons)
    proj = np.full_like(xbar, np.nan)
    F_x = np.full(nh, np.nan)
    F_xbar = np.full(nh, np.nan)
    for k in range(nh):
        if np.isnan(Wh[k]):
            continue
        F_x[k] = prob.objective(Xh[k])
        F_xbar[k] = prob.objective(xbar[k])
        if prob.in_tube(xbar[k]):
            proj[k] = prob.project(xbar[k])
    return Trajectory(
        horizons=spec.horizons, burn_ins=spec.burn_ins, x=Xh, xbar=xbar, xbar_proj=proj,
        dist=dist, F_x=F_x, F_xbar=F_xbar, drift=drift, drift_censored=cens,
        status=STATUS[int(status)], fail_step=int(fail), x0=x0, seed=int(seed),
        replication=int(replication_index), problem=prob, params=p,
    )


def run_replications(spec, seed, count, workers=1, start=0):
    """Replications ``start .. start+count-1`` in index order.

    The compiled loop releases the GIL, so threads run in parallel; results
    do not depend on ``workers``.
    """
    idx = range(start, start + count)
    if workers <= 1:
        return [run_replication(spec, seed, i) for i in idx]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda i: run_replication(spec, seed, i), idx))


def rescaled_deviation(traj, n):
    """``sqrt(n) (xbar_n - proj(xbar_n))``; raises if the average left the tube."""
    k = traj.index(n)
    if np.isnan(traj.xbar_proj[k]).any():
        raise OutsideTubeError(f"average at n={n} is outside the tube (replication {traj.replication})")
    return math.sqrt(n) * (traj.xbar[k] - traj.xbar_proj[k])


def f_gap_sample(traj, n, x_inf_estimate):
    """``2n (F(x_inf) - F(xbar_n))``, where ``x_inf`` estimates the limit on the manifold."""
    k = traj.index(n)
    prob = traj.problem
    if np.isnan(traj.xbar_proj[k]).any():
        raise OutsideTubeError(f"average at n={n} is outside the tube (replication {traj.replication})")
    F_inf = prob.objective(x_inf_estimate)
    gap = abs(F_inf - prob.objective(traj.xbar_proj[k]))
    if gap > 1e-8:
        raise GeometryError(f"F is not constant on the manifold here (gap {gap:.3g})")
    return 2 * n * (F_inf - traj.F_xbar[k])


def limit_estimate(traj):
    """Projection of the last recorded iterate."""
    return traj.problem.project(traj.x[-1])


@dataclass
class Drift:
    drift: float
    bound: float
    censored: bool

    @property
    def ratio(self):
        return self.drift / self.bound


def tangential_drift(traj, n, regularity=None):
    """``sup |zeta_m - zeta_{n0(n)}|`` over the averaging window, with its order bound."""
    k = traj.index(n)
    r = regularity or RegularityTriple()
    return Drift(float(traj.drift[k]), zeta_drift_bound(n, traj.params, r), bool(traj.drift_censored[k]))

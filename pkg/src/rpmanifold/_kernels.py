"""Compiled per-point routines shared by the geometry objects and the driver."""

import math

import numpy as np
from numba import njit

FLAT = 0
SPHERE = 1
HYPERBOLA = 2

FOOT_MAXITER = 60


@njit(cache=True, nogil=True, error_model="numpy")
def _foot_dphi(t, x1, x2, c):
    return t - x1 - c * (c / t - x2) / (t * t)


@njit(cache=True, nogil=True, error_model="numpy")
def hyperbola_foot(x1, x2, c):
    """Closest point parameter ``t`` on ``{(t, c/t): t > 0}`` to ``(x1, x2)``.

    Safeguarded Newton on the stationarity condition, bisection whenever the
    Newton step leaves the current sign-change bracket.
    """
    t = max(x1, 1e-3)
    lo = t
    while _foot_dphi(lo, x1, x2, c) > 0:
        lo *= 0.5
    hi = t
    while _foot_dphi(hi, x1, x2, c) < 0:
        hi *= 2.0
    if not lo <= t <= hi:
        t = 0.5 * (lo + hi)
    for _ in range(FOOT_MAXITER):
        g = _foot_dphi(t, x1, x2, c)
        if g == 0.0:
            break
        if g < 0:
            lo = t
        else:
            hi = t
        h = 1.0 + 3.0 * c * c / t**4 - 2.0 * c * x2 / t**3
        step = g / h if h > 0 else 0.0
        tn = t - step
        if h <= 0 or not lo < tn < hi:
            tn = 0.5 * (lo + hi)
        if abs(tn - t) <= 1e-15 * t:
            t = tn
            break
        t = tn
    return t


@njit(cache=True, nogil=True, error_model="numpy")
def gradient_into(kind, x, dz, A, c, out):
    d = x.shape[0]
    if kind == FLAT:
        for i in range(dz):
            out[i] = 0.0
        for i in range(d - dz):
            s = 0.0
            for j in range(d - dz):
                s += A[i, j] * x[dz + j]
            out[dz + i] = -s
    elif kind == SPHERE:
        r2 = 0.0
        for i in range(d):
            r2 += x[i] * x[i]
        for i in range(d):
            out[i] = -(r2 - 1.0) * x[i]
    else:
        e = x[0] * x[1] - c
        out[0] = -e * x[1]
        out[1] = -e * x[0]


@njit(cache=True, nogil=True, error_model="numpy")
def distance(kind, x, dz, c):
    """Distance to the manifold and the tangential coordinate scalar used by the tube test.

    For the hyperbola the second value is the foot parameter ``t``; otherwise 0.
    """
    d = x.shape[0]
    if kind == FLAT:
        s = 0.0
        for i in range(dz, d):
            s += x[i] * x[i]
        return math.sqrt(s), 0.0
    elif kind == SPHERE:
        s = 0.0
        for i in range(d):
            s += x[i] * x[i]
        return abs(math.sqrt(s) - 1.0), 0.0
    t = hyperbola_foot(x[0], x[1], c)
    return math.hypot(x[0] - t, x[1] - c / t), t

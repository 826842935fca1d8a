"""Estimators and goodness-of-fit checks against Gaussian and chi-square limits."""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import special, stats

# asymptotic two-sided KS critical values c_alpha, rejection when D > c_alpha / sqrt(R)
KS_CRITICAL = {0.05: 1.36, 0.01: 1.63}


def ks_band(count, alpha=0.01):
    c = KS_CRITICAL.get(alpha)
    if c is None:
        c = float(stats.kstwobign.isf(alpha))
    return c / math.sqrt(count)


def _as_samples(samples):
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def empirical_cov(samples):
    """Unbiased sample covariance with correctly rounded sums.

    ``math.fsum`` makes every entry independent of the sample order.
    """
    X = _as_samples(samples)
    R, d = X.shape
    if R < 2:
        raise ValueError("need at least 2 samples")
    mean = np.array([math.fsum(X[:, j]) / R for j in range(d)])
    Z = X - mean
    C = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            C[i, j] = C[j, i] = math.fsum(Z[:, i] * Z[:, j]) / (R - 1)
    return C


def frobenius_rel_err(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    nb = np.linalg.norm(B)
    if nb == 0:
        raise ValueError("reference matrix is zero")
    return float(np.linalg.norm(A - B) / nb)


class RateFit(NamedTuple):
    slope: float
    intercept: float
    residual: float     # RMS of the log-scale residuals


def rate_fit(points):
    """Least squares of ``log value`` on ``log n``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 (n, value) points")
    if np.any(pts <= 0):
        raise ValueError("n and values must be positive")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    X = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - (slope * x + intercept)
    return RateFit(float(slope), float(intercept), float(np.sqrt(np.mean(res**2))))


def ks_statistic(samples, cdf):
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    R = x.size
    if R == 0:
        raise ValueError("no samples")
    F = cdf(x)
    i = np.arange(1, R + 1)
    return float(max(np.max(i / R - F), np.max(F - (i - 1) / R)))


def ks_normal(samples, scale=1.0):
    """KS distance of ``samples / scale`` to the standard normal law.

    ``scale`` is the predicted standard deviation, not a sample estimate.
    """
    if not scale > 0:
        raise ValueError("predicted standard deviation must be positive")
    return ks_statistic(np.asarray(samples, dtype=float) / scale, special.ndtr)


def range_basis(Sigma, rel_tol=1e-10):
    """Eigenpairs of ``Sigma`` spanning its numerical range."""
    S = np.atleast_2d(np.asarray(Sigma, dtype=float))
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    top = np.abs(w).max()
    if top == 0:
        raise ValueError("covariance is zero")
    keep = w > rel_tol * top
    return w[keep], V[:, keep]


def whiten(samples, Sigma):
    """In-range coordinates scaled to unit variance, and out-of-range energy, per sample."""
    X = _as_samples(samples)
    w, U = range_basis(Sigma)
    Y = X @ U
    resid = X - Y @ U.T
    return Y / np.sqrt(w), np.einsum("ij,ij->i", resid, resid)


class GofResult(NamedTuple):
    statistic: float
    dof: int
    sq_distances: np.ndarray
    out_of_range_energy: np.ndarray


def mahalanobis_gof(samples, Sigma):
    """KS distance of squared Mahalanobis distances (rank-``r`` pseudo-inverse) to chi2_r."""
    Z, energy = whiten(samples, Sigma)
    sq = np.einsum("ij,ij->i", Z, Z)
    r = Z.shape[1]
    return GofResult(ks_statistic(sq, stats.chi2(r).cdf), r, sq, energy)


def chi2_gof(sq_distances, dof):
    """KS distance of pooled squared norms of whitened vectors to chi2_dof."""
    return ks_statistic(sq_distances, stats.chi2(dof).cdf)


@dataclass
class FGapCheck:
    mean: float
    variance: float
    predicted_mean: float
    predicted_variance: float
    mean_rel_err: float
    variance_rel_err: float
    cdf_distance: float

    def to_dict(self):
        return dict(self.__dict__)


def weighted_chi2_moments(spectrum):
    """Mean and variance of ``sum lambda_i Z_i^2``.

    A 2-d ``spectrum`` is a mixture, one row per sample, each row equally likely.
    """
    lam = np.atleast_2d(np.asarray(spectrum, dtype=float))
    m = lam.sum(axis=1)
    v = 2 * (lam**2).sum(axis=1)
    return float(m.mean()), float(v.mean() + m.var())


def f_gap_check(samples, spectrum, reference_draws=10**6, seed=0):
    """Moments and CDF distance of F-gap samples against ``sum lambda_i Z_i^2``."""
    lam = np.atleast_2d(np.asarray(spectrum, dtype=float))
    if lam.size == 0:
        raise ValueError("empty spectrum")
    if np.any(lam < 0):
        raise ValueError("spectrum must be non-negative")
    x = np.asarray(samples, dtype=float).ravel()
    pm, pv = weighted_chi2_moments(lam)
    rng = np.random.default_rng(seed)
    rows = lam[rng.integers(lam.shape[0], size=reference_draws)] if lam.shape[0] > 1 else lam
    ref = (rows * rng.standard_normal((reference_draws, lam.shape[1])) ** 2).sum(axis=1)
    mean = math.fsum(x) / x.size
    var = math.fsum((x - mean) ** 2) / (x.size - 1) if x.size > 1 else 0.0
    return FGapCheck(
        mean=mean,
        variance=var,
        predicted_mean=pm,
        predicted_variance=pv,
        mean_rel_err=abs(mean - pm) / pm if pm > 0 else math.inf,
        variance_rel_err=abs(var - pv) / pv if pv > 0 else math.inf,
        cdf_distance=float(stats.ks_2samp(x, ref).statistic),
    )


@dataclass
class Criterion:
    name: str
    passed: bool
    value: float
    threshold: float
    margin: float       # positive when passing

    @classmethod
    def at_most(cls, name, value, threshold):
        return cls(name, bool(value <= threshold), float(value), float(threshold), float(threshold - value))

    @classmethod
    def at_least(cls, name, value, threshold):
        return cls(name, bool(value >= threshold), float(value), float(threshold), float(value - threshold))


@dataclass
class ExperimentReport:
    samples: int
    excluded: int
    max_excluded_fraction: float = 0.05
    empirical_cov: list = None
    sigma_theory: list = None
    frobenius_rel_err: float = None
    ks: list = None
    mahalanobis: dict = None
    f_gap: dict = None
    rate_fit: dict = None
    drift: dict = None
    extra: dict = field(default_factory=dict)
    criteria: list = field(default_factory=list)

    @property
    def excluded_fraction(self):
        total = self.samples + self.excluded
        return self.excluded / total if total else 0.0

    @property
    def invalid(self):
        return self.excluded_fraction > self.max_excluded_fraction or self.samples == 0

    @property
    def passed(self):
        return not self.invalid and all(c.passed for c in self.criteria)

    def add(self, criterion):
        self.criteria.append(criterion)
        return criterion

    def to_dict(self):
        out = {
            "samples": self.samples,
            "excluded": self.excluded,
            "excluded_fraction": self.excluded_fraction,
            "max_excluded_fraction": self.max_excluded_fraction,
            "invalid": self.invalid,
            "passed": self.passed,
        }
        for k in ("empirical_cov", "sigma_theory", "frobenius_rel_err", "ks", "mahalanobis",
                  "f_gap", "rate_fit", "drift"):
            v = getattr(self, k)
            if v is not None:
                out[k] = _plain(v)
        out.update(_plain(self.extra))
        out["criteria"] = [_plain(c.__dict__) for c in self.criteria]
        return out


def _plain(v):
    """Recursively convert numpy values to JSON-ready Python objects."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v

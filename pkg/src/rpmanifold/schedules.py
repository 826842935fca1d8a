"""Step sizes, averaging weights, burn-in, and parameter feasibility.

Step sizes are ``gamma_n = C * n**-gamma``, weights ``b_n = n**rho`` and the
burn-in discards the first ``floor(n**beta / 2)`` iterates from the average.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class InfeasibleError(ValueError):
    """A parameter interval is empty."""


@dataclass(frozen=True)
class ScheduleParams:
    c_gamma: float = 1.0
    gamma_exp: float = 0.8
    rho: float = 0.0
    beta: float = 0.9

    def __post_init__(self):
        if not self.c_gamma > 0:
            raise ValueError(f"c_gamma must be positive, got {self.c_gamma}")
        if not 0 < self.gamma_exp < 1:
            raise ValueError(f"gamma_exp must lie in (0, 1), got {self.gamma_exp}")
        if not self.rho > -0.5:
            raise ValueError(f"rho must exceed -1/2, got {self.rho}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")


@dataclass(frozen=True)
class RegularityTriple:
    alpha_f: float = 1.0
    alpha_phi: float = 1.0
    alpha_psi: float = 1.0

    def __post_init__(self):
        for name in ("alpha_f", "alpha_phi", "alpha_psi"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    @property
    def alpha(self):
        return min(self.alpha_f, self.alpha_phi, self.alpha_psi)

    @property
    def alpha_prime(self):
        return min(self.alpha_psi, (1 + self.alpha) / 2)


@dataclass(frozen=True)
class Interval:
    """Open interval ``(lower, upper)``."""

    lower: float
    upper: float = math.inf

    def __contains__(self, x):
        return self.lower < x < self.upper

    @property
    def empty(self):
        return not self.lower < self.upper


def step_size(n, p):
    return p.c_gamma * float(n) ** -p.gamma_exp


def weight(n, rho):
    return float(n) ** rho


def burn_in(n, beta):
    n0 = int(math.floor(float(n) ** beta / 2))
    assert n0 < n
    return n0


def _window(n, p):
    n0 = burn_in(n, p.beta)
    if n <= n0:
        raise ValueError(f"n={n} does not exceed its burn-in {n0}")
    return np.arange(n0 + 1, n + 1, dtype=float)


def weight_mass(n, p):
    """``sum(b_i for i in (n0(n), n])`` with exact (correctly rounded) summation."""
    if p.rho == 0:
        return float(n - burn_in(n, p.beta))
    return math.fsum(_window(n, p) ** p.rho)


def sigma_n(n, p):
    """Averaging scale ``sqrt(sum b_i^2) / sum b_i`` over the window."""
    i = _window(n, p)
    b = i ** p.rho
    return math.sqrt(math.fsum(b * b)) / math.fsum(b)


def sigma_rm(n, gamma_exp):
    return float(n) ** (-gamma_exp / 2)


def clock(n, p):
    """``t_n = sum_{m <= n} gamma_m``."""
    if n == 0:
        return 0.0
    return p.c_gamma * math.fsum(np.arange(1, n + 1, dtype=float) ** -p.gamma_exp)


def c_rho(rho):
    if not rho > -0.5:
        raise ValueError(f"rho must exceed -1/2, got {rho}")
    return (rho + 1) / math.sqrt(2 * rho + 1)


def gamma_lower_terms(r):
    a = r.alpha
    return (
        1 - a / (1 + 2 * a),
        1 - r.alpha_phi / (2 * (1 + r.alpha_phi)),
        1 / (2 * r.alpha_prime),
    )


def feasible_gamma_interval(r):
    if not r.alpha_psi > 0.5:
        raise InfeasibleError(
            f"alpha_psi={r.alpha_psi} <= 1/2: the gamma interval may be empty"
        )
    return Interval(max(gamma_lower_terms(r)), 1.0)


def feasible_rho_interval(gamma_exp, r):
    return Interval(gamma_exp * r.alpha_prime - 1, math.inf)


def beta_lower_terms(p, r):
    g, a, ap = p.gamma_exp, r.alpha, r.alpha_phi
    terms = [1 / ((2 * g - 1) * (1 + ap)), (1 / a) * (1 - g) / (2 * g - 1)]
    if p.rho < g - 1:
        terms.append((1 / (1 + ap) - (1 + p.rho)) / (g - (1 + p.rho)))
    return terms


def feasible_beta_interval(p, r):
    iv = Interval(max(beta_lower_terms(p, r)), 1.0)
    if iv.empty:
        raise InfeasibleError(f"no burn-in exponent satisfies (A.3): lower bound {iv.lower:.6g} >= 1")
    return iv


def ratio_deviation(n, p):
    """``(b_{n+1} gamma_n / (b_n gamma_{n+1}) - 1) / gamma_n``; should tend to 0."""
    dev = math.expm1((p.rho + p.gamma_exp) * math.log1p(1.0 / n))
    return dev / step_size(n, p)


def zeta_drift_bound(n, p, r):
    """Order of the tangential drift ``sup |zeta_m - zeta_{n0(n)}|`` over the window.

    ``sigma_rm`` at index 0 is taken as 1.
    """
    k = _window(n, p)
    gam = p.c_gamma * k ** -p.gamma_exp
    srm = k ** (-p.gamma_exp / 2)
    srm_prev = np.maximum(k - 1, 1) ** (-p.gamma_exp / 2)
    a = math.fsum((np.sqrt(gam) * srm) ** (1 + r.alpha_psi) + gam * srm_prev ** (1 + r.alpha))
    return a + math.sqrt(math.fsum(gam * srm**2))


@dataclass
class ConditionItem:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class ConditionReport:
    items: list = field(default_factory=list)

    @property
    def passed(self):
        return all(it.passed for it in self.items)

    def failures(self):
        return [it for it in self.items if not it.passed]

    def to_dict(self):
        return {
            "passed": self.passed,
            "items": [
                {"name": it.name, "passed": it.passed, "margin": it.margin, "detail": it.detail}
                for it in self.items
            ],
        }


def _strict(name, margin, detail):
    # open intervals: equality fails with zero margin
    return ConditionItem(name, bool(margin > 0), float(margin), detail)


RATIO_GRID = (10**2, 10**3, 10**4, 10**5, 10**6)


def check_assumptions(p, r):
    """Itemised report on (A.1)-(A.3) and the (B.2) step/weight ratio condition."""
    rep = ConditionReport()
    rep.items.append(_strict("A.1 alpha_psi > 1/2", r.alpha_psi - 0.5, f"alpha_psi={r.alpha_psi:.6g}"))

    g_lo = max(gamma_lower_terms(r))
    rep.items.append(_strict("A.2 gamma > lower", p.gamma_exp - g_lo, f"lower={g_lo:.6g}"))
    rep.items.append(_strict("A.2 gamma < 1", 1 - p.gamma_exp, ""))
    rho_lo = p.gamma_exp * r.alpha_prime - 1
    rep.items.append(_strict("A.2 1 + rho > gamma * alpha'", p.rho - rho_lo, f"lower={rho_lo:.6g}"))

    b_lo = max(beta_lower_terms(p, r))
    branch = " (incl. rho < gamma - 1 term)" if p.rho < p.gamma_exp - 1 else ""
    rep.items.append(_strict("A.3 beta > lower", p.beta - b_lo, f"lower={b_lo:.6g}{branch}"))

    devs = [ratio_deviation(n, p) for n in RATIO_GRID]
    decreasing = all(b < a for a, b in zip(devs, devs[1:]))
    rep.items.append(
        ConditionItem(
            "B.2 ratio deviation / gamma_n -> 0",
            decreasing,
            float(devs[0] - devs[-1]),
            "grid " + ", ".join(f"{n:.0e}:{d:.3e}" for n, d in zip(RATIO_GRID, devs)),
        )
    )
    return rep

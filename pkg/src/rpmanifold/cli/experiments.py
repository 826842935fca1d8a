"""Experiment runners: Monte Carlo replications folded into reports and tables."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import stats as sps

from .. import linear_oracle as lo
from .. import stats as st
from ..geometry import limit_law
from ..schedules import (
    InfeasibleError, Interval, beta_lower_terms, c_rho, check_assumptions,
    feasible_gamma_interval, feasible_rho_interval, gamma_lower_terms, sigma_n,
)
from ..sgd import f_gap_sample, limit_estimate, rescaled_deviation, run_replications, tangential_drift
from ..streams import Stream
from .config import ConfigError


@dataclass
class Outcome:
    """A finished experiment: the report plus tables to write next to it."""

    report: dict
    passed: bool
    tables: dict = field(default_factory=dict)   # file name -> (header, rows)
    gate: dict = field(default_factory=dict)     # feasibility checks per schedule


def feasibility_gate(cfg, schedules, force):
    """Itemised assumption checks; infeasible schedules need ``force``."""
    out = {}
    for label, p in schedules.items():
        rep = check_assumptions(p, cfg.regularity)
        out[label] = rep.to_dict()
        if not rep.passed and not force:
            names = ", ".join(f.name for f in rep.failures())
            raise ConfigError(f"schedule {label} fails {names}; rerun with --force to proceed")
    return out


def _usable(traj):
    return traj.converged and not np.isnan(traj.xbar_proj[-1]).any()


def _orient(U, anchor):
    # fix eigenvector signs so whitened coordinates are comparable across replications
    U = U.copy()
    for j in range(U.shape[1]):
        s = float(U[:, j] @ anchor)
        if abs(s) < 1e-12:
            k = int(np.argmax(np.abs(U[:, j])))
            s = U[k, j]
        if s < 0:
            U[:, j] = -U[:, j]
    return U


def _deviation_rows(trajs):
    rows = []
    for tr in trajs:
        for k, h in enumerate(tr.horizons):
            if np.isnan(tr.xbar_proj[k]).any():
                continue
            rows.append([tr.replication, h, *(math.sqrt(h) * (tr.xbar[k] - tr.xbar_proj[k]))])
    return rows


def _exclusions(trajs):
    counts = {}
    for tr in trajs:
        if not _usable(tr):
            key = tr.status if tr.status != "ok" else "outside_tube"
            counts[key] = counts.get(key, 0) + 1
    return counts


def run_clt_experiment(cfg, workers=1, force=False):
    spec = cfg.build_spec()
    gate = feasibility_gate(cfg, {"main": cfg.schedule}, force)
    prob, p = spec.problem, spec.params
    tol = cfg.tolerances
    n = spec.horizons[-1]
    trajs = run_replications(spec, cfg.seed, cfg.replications, workers)
    used = [tr for tr in trajs if _usable(tr)]
    report = st.ExperimentReport(
        samples=len(used), excluded=len(trajs) - len(used),
        max_excluded_fraction=cfg.tube["max_excluded_fraction"],
    )
    report.extra["problem"] = prob.kind
    report.extra["horizon"] = n
    report.extra["exclusions"] = _exclusions(trajs)
    tables = {"deviations.csv": (["replication", "horizon"] + [f"x{i}" for i in range(prob.dim)],
                                 _deviation_rows(trajs))}
    if not used:
        return Outcome(report.to_dict(), False, tables, gate)

    Gamma = spec.noise.Gamma_limit
    devs = np.array([rescaled_deviation(tr, n) for tr in used])
    x_inf = [limit_estimate(tr) for tr in used]
    laws = [limit_law(prob, m, Gamma, p.rho) for m in x_inf]
    Sigmas = np.array([law.Sigma for law in laws])
    emp = st.empirical_cov(devs)
    report.empirical_cov = emp
    report.extra["sqrt_n_sigma_n"] = math.sqrt(n) * sigma_n(n, p)

    if not np.any(Sigmas):
        report.extra["degenerate_covariance"] = True
        report.extra["max_abs_deviation"] = float(np.abs(devs).max())
        return Outcome(report.to_dict(), report.passed, tables, gate)

    flat = bool(np.all(Sigmas == Sigmas[0]))
    if flat:
        Sigma = Sigmas[0]
        report.sigma_theory = Sigma
        report.frobenius_rel_err = st.frobenius_rel_err(emp, Sigma)
        report.add(st.Criterion.at_most("frobenius_rel_err", report.frobenius_rel_err, tol["frobenius"]))
        scaled = devs / (math.sqrt(n) * sigma_n(n, p))
        report.extra["frobenius_rel_err_sigma_n_scaled"] = st.frobenius_rel_err(st.empirical_cov(scaled), Sigma)
    else:
        report.sigma_theory = Sigmas.mean(axis=0)
        report.extra["sigma_theory_is_average_over_replications"] = True

    # per-replication whitening against each replication's own limit law
    Z, out_energy, in_energy = [], [], []
    for dev, law, m in zip(devs, laws, x_inf):
        w, U = st.range_basis(law.Sigma)
        U = _orient(U, m)
        y = U.T @ dev
        Z.append(y / np.sqrt(w))
        in_energy.append(float(y @ y))
        resid = dev - U @ y
        out_energy.append(float(resid @ resid))
    Z = np.array(Z)
    rank = Z.shape[1]
    sq = np.einsum("ij,ij->i", Z, Z)
    band = st.ks_band(len(used), tol["ks_alpha"])
    gof = st.chi2_gof(sq, rank)
    ks_dirs = [st.ks_normal(Z[:, j]) for j in range(rank)]
    report.ks = ks_dirs
    energy_ratio = float(np.mean(out_energy) / np.mean(in_energy))
    inflation = n * sigma_n(n, p) ** 2
    report.mahalanobis = {"statistic": gof, "dof": rank, "band": band,
                          "statistic_sigma_n_scaled": st.chi2_gof(sq / inflation, rank),
                          "whitened_mean": Z.mean(axis=0),
                          "out_of_range_energy_mean": float(np.mean(out_energy)),
                          "in_range_energy_mean": float(np.mean(in_energy)),
                          "energy_ratio": energy_ratio}
    report.add(st.Criterion.at_most("mahalanobis_ks", gof, band))
    report.add(st.Criterion.at_most("tangential_energy_ratio", energy_ratio, tol["tangential_energy"]))
    for j, ks in enumerate(ks_dirs):
        report.extra.setdefault("ks_band", band)
        report.add(st.Criterion.at_most(f"ks_direction_{j}", ks, band))

    gaps = np.array([f_gap_sample(tr, n, m) for tr, m in zip(used, x_inf)])
    spectra = np.array([law.perf_spectrum for law in laws])
    if np.all(spectra == spectra[0]):
        spectra = spectra[:1]
    fg = st.f_gap_check(gaps, spectra)
    report.f_gap = fg.to_dict()
    # same samples with 2 sigma_n^-2 in place of 2n
    fg_scaled = st.f_gap_check(gaps / inflation, spectra)
    report.extra["f_gap_sigma_n_scaled"] = {k: getattr(fg_scaled, k) for k in
                                            ("mean", "variance", "mean_rel_err", "variance_rel_err")}
    report.add(st.Criterion.at_most("f_gap_mean_rel_err", fg.mean_rel_err, tol["f_gap_mean"]))
    report.add(st.Criterion.at_most("f_gap_variance_rel_err", fg.variance_rel_err, tol["f_gap_variance"]))

    drifts = [tangential_drift(tr, n, cfg.regularity) for tr in used]
    normal_dev = np.array([tr.dist[-1] for tr in used])
    dvals = np.array([d.drift for d in drifts])
    drift_ratio = float(dvals.mean() / normal_dev.mean())
    report.drift = {
        "mean_drift": float(dvals.mean()),
        "mean_normal_deviation": float(normal_dev.mean()),
        "drift_over_normal": drift_ratio,
        "bound": drifts[0].bound,
        "mean_drift_over_bound": float(np.mean([d.ratio for d in drifts])),
        "censored": int(sum(d.censored for d in drifts)),
    }
    report.add(st.Criterion.at_least("drift_over_normal", drift_ratio, tol["drift_ratio"]))

    probs = (np.arange(1, len(sq) + 1) - 0.5) / len(sq)
    tables["qq.csv"] = (["theoretical_quantile", "empirical_quantile"],
                        np.column_stack([sps.chi2(rank).ppf(probs), np.sort(sq)]).tolist())
    return Outcome(report.to_dict(), report.passed, tables, gate)


def _mean_sq_dist(trajs):
    used = [tr for tr in trajs if tr.converged]
    D = np.array([tr.dist for tr in used]) ** 2
    if len(used) < 2:
        raise RuntimeError("fewer than two usable replications")
    return used, D.mean(axis=0), D.std(axis=0, ddof=1) / math.sqrt(len(used))


def run_rate_experiment(cfg, workers=1, force=False):
    gammas = [float(g) for g in cfg.rate["gammas"]]
    schedules = {f"gamma={g!r}": replace(cfg.schedule, gamma_exp=g) for g in gammas}
    gate = feasibility_gate(cfg, schedules, force)
    tol = cfg.tolerances
    rows, fits, criteria = [], {}, []
    excluded = 0
    total = 0
    for label, p in schedules.items():
        spec = cfg.build_spec(p)
        trajs = run_replications(spec, cfg.seed, cfg.replications, workers)
        used, msd, se = _mean_sq_dist(trajs)
        excluded += len(trajs) - len(used)
        total += len(trajs)
        for h, m, s in zip(spec.horizons, msd, se):
            rows.append([p.gamma_exp, h, m, s])
        fit = st.rate_fit(list(zip(spec.horizons, msd)))
        fits[label] = {"gamma": p.gamma_exp, **fit._asdict(), "replications_used": len(used)}
        criteria.append(st.Criterion.at_most(f"slope_error[{label}]", abs(fit.slope + p.gamma_exp), tol["slope"]))
    report = st.ExperimentReport(samples=total - excluded, excluded=excluded,
                                 max_excluded_fraction=cfg.tube["max_excluded_fraction"])
    report.rate_fit = fits
    report.extra["problem"] = cfg.problem["kind"]
    report.criteria = criteria
    table = (["gamma", "n", "mean_sq_dist", "stderr"], rows)
    return Outcome(report.to_dict(), report.passed, {"rates.csv": table}, gate)


def run_rho_sweep(cfg, rhos=None, workers=1, force=False):
    rhos = [float(r) for r in (rhos if rhos is not None else cfg.rho_sweep["rhos"])]
    if 0.0 not in rhos:
        raise ConfigError("the rho sweep needs rho = 0 as its reference")
    schedules = {f"rho={r!r}": replace(cfg.schedule, rho=r) for r in rhos}
    gate = feasibility_gate(cfg, schedules, force)
    tol = cfg.tolerances
    traces, used_counts, excluded = {}, {}, 0
    for r, (label, p) in zip(rhos, schedules.items()):
        spec = cfg.build_spec(p)
        n = spec.horizons[-1]
        trajs = run_replications(spec, cfg.seed, cfg.replications, workers)
        used = [tr for tr in trajs if _usable(tr)]
        excluded += len(trajs) - len(used)
        devs = np.array([rescaled_deviation(tr, n) for tr in used])
        traces[r] = float(np.trace(st.empirical_cov(devs)))
        used_counts[r] = len(used)
    report = st.ExperimentReport(samples=sum(used_counts.values()), excluded=excluded,
                                 max_excluded_fraction=cfg.tube["max_excluded_fraction"])
    rows = []
    for r in rhos:
        ratio = traces[r] / traces[0.0]
        pred = c_rho(r) ** 2
        rows.append({"rho": r, "trace": traces[r], "ratio": ratio, "predicted": pred,
                     "rel_err": abs(ratio / pred - 1), "replications_used": used_counts[r]})
        report.add(st.Criterion.at_most(f"rho_ratio_rel_err[rho={r!r}]", abs(ratio / pred - 1), tol["rho_ratio"]))
    others = [traces[r] for r in rhos if r != 0.0]
    if others:
        report.add(st.Criterion.at_most("trace_minimal_at_rho_0", traces[0.0] / min(others), 1.0))
    report.extra["sweep"] = rows
    return Outcome(report.to_dict(), report.passed, {}, gate)


def _xi_draws(n, pm, G, seed, offset, draws, workers):
    def one(i):
        return lo.simulate_xi(n, pm, G, rng=Stream(seed, offset + i))
    if workers <= 1:
        return np.array([one(i) for i in range(draws)])
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return np.array(list(ex.map(one, range(draws))))


def run_linear_oracle(cfg, workers=1, force=False):
    opts = cfg.linear_oracle
    tol = cfg.tolerances
    p = cfg.schedule
    gate = feasibility_gate(cfg, {"main": p}, force)
    n, draws = int(opts["n"]), int(opts["draws"])
    report = st.ExperimentReport(samples=draws * len(opts["cases"]), excluded=0)
    cases = []
    for idx, case in enumerate(opts["cases"]):
        try:
            pm = lo.ProductMatrices(case["H"], p)
        except ValueError as e:
            raise ConfigError(f"linear oracle case {idx}: {e}") from None
        G = np.asarray(case["gamma_theta"], dtype=float)
        xs = _xi_draws(n, pm, G, cfg.seed, idx * draws, draws, workers)
        emp = st.empirical_cov(xs / sigma_n(n, p))
        target = lo.xi_limit_covariance(pm, G)
        err = st.frobenius_rel_err(emp, target)
        lim = lo.check_limit(int(opts["limit_l"]), int(opts["limit_n"]), pm)
        bounds = [lo.uniform_bound(int(opts["limit_l"]), int(m), pm) for m in opts["uniform_ns"]]
        spread = (max(bounds) - min(bounds)) / min(bounds)
        cases.append({"H": pm.H, "gamma_theta": G, "L": pm.L, "C": pm.C, "empirical_cov": emp,
                      "limit_cov": target, "frobenius_rel_err": err, "check_limit": lim,
                      "uniform_bounds": dict(zip(map(str, opts["uniform_ns"]), bounds)),
                      "uniform_spread": spread})
        report.add(st.Criterion.at_most(f"xi_frobenius[{idx}]", err, tol["xi_frobenius"]))
        report.add(st.Criterion.at_most(f"check_limit[{idx}]", lim, tol["check_limit"]))
        report.add(st.Criterion.at_most(f"uniform_bound_spread[{idx}]", spread, tol["uniform_bound"]))
    report.extra["cases"] = cases
    return Outcome(report.to_dict(), report.passed, {}, gate)


def _iv(iv):
    out = {"lower": float(iv.lower), "upper": float(iv.upper), "open": True}
    if isinstance(iv.lower, Fraction):
        out["lower_exact"] = str(iv.lower)
    return out


def feasible_region(regularity, gamma_exp=None, rho=None):
    """Admissible step, weight and burn-in exponents.

    Exact rational arithmetic is used when the inputs are ``Fraction``s.
    """
    out = {"regularity": {"alpha_f": str(regularity.alpha_f), "alpha_phi": str(regularity.alpha_phi),
                          "alpha_psi": str(regularity.alpha_psi)}}
    giv = feasible_gamma_interval(regularity)
    out["gamma_interval"] = _iv(giv)
    out["gamma_lower_terms"] = [float(t) for t in gamma_lower_terms(regularity)]
    if gamma_exp is None:
        return out
    riv = feasible_rho_interval(gamma_exp, regularity)
    out["gamma"] = str(gamma_exp)
    out["gamma_feasible"] = gamma_exp in giv
    out["rho_interval"] = _iv(riv)
    if rho is None:
        return out
    p = _SchedView(gamma_exp, rho)
    terms = beta_lower_terms(p, regularity)
    biv = Interval(max(terms), 1)
    out["rho"] = str(rho)
    out["rho_feasible"] = rho in riv
    out["beta_interval"] = _iv(biv)
    out["beta_lower_terms"] = [float(t) for t in terms]
    if biv.empty:
        raise InfeasibleError(f"no burn-in exponent: lower bound {float(biv.lower):.6g} >= 1")
    return out


@dataclass(frozen=True)
class _SchedView:
    # the burn-in bound only needs these two exponents; keeps Fractions exact
    gamma_exp: object
    rho: object

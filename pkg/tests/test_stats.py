import math

import numpy as np
import pytest
from scipy import stats as sps

from rpmanifold.stats import (
    Criterion, ExperimentReport, empirical_cov, f_gap_check, frobenius_rel_err, ks_band, ks_normal,
    ks_statistic, mahalanobis_gof, rate_fit, weighted_chi2_moments, whiten,
)


def test_empirical_cov_examples():
    C = empirical_cov([[1.0, 0.0], [-1.0, 0.0]])
    assert np.array_equal(C, [[2.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(empirical_cov([[0.3, -1.2]] * 5), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        empirical_cov([[1.0, 2.0]])


def test_empirical_cov_matches_numpy_and_is_symmetric():
    X = np.random.default_rng(0).standard_normal((500, 4)) @ np.diag([1, 2, 3, 4.0])
    C = empirical_cov(X)
    assert np.array_equal(C, C.T)
    assert np.allclose(C, np.cov(X.T), rtol=1e-12)


def test_empirical_cov_permutation_invariant():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((2000, 3)) * 1e3 + 1e6
    C = empirical_cov(X)
    for _ in range(5):
        assert np.array_equal(empirical_cov(X[rng.permutation(len(X))]), C)


@pytest.mark.montecarlo
def test_empirical_cov_large_sample():
    X = np.random.default_rng(2).standard_normal((10**6, 2))
    assert np.abs(empirical_cov(X) - np.eye(2)).max() <= 0.005


def test_frobenius_rel_err():
    assert frobenius_rel_err(np.eye(2), np.eye(2)) == 0
    assert frobenius_rel_err(2 * np.eye(2), np.eye(2)) == 1
    rng = np.random.default_rng(3)
    A, B = rng.standard_normal((2, 3, 3))
    assert frobenius_rel_err(A, B) == pytest.approx(math.sqrt(((A - B) ** 2).sum() / (B**2).sum()))
    with pytest.raises(ValueError):
        frobenius_rel_err(np.eye(2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        frobenius_rel_err(np.eye(2), np.eye(3))


def test_rate_fit_examples():
    ns = [10**3, 10**3.5, 10**4, 10**4.5, 10**5]
    f = rate_fit([(n, n**-0.8) for n in ns])
    assert f.slope == pytest.approx(-0.8, abs=1e-12) and f.residual < 1e-12
    f = rate_fit([(n, 3 * n**-0.8) for n in ns])
    assert f.slope == pytest.approx(-0.8, abs=1e-12)
    assert f.intercept == pytest.approx(math.log(3), abs=1e-10)
    with pytest.raises(ValueError):
        rate_fit([(1, 1.0), (2, 0.0), (3, 1.0)])
    with pytest.raises(ValueError):
        rate_fit([(1, 1.0), (2, 1.0)])


def test_rate_fit_noisy_and_normal_equations():
    rng = np.random.default_rng(4)
    ns = np.logspace(2, 6, 30)
    v = 2 * ns**-0.65 * np.exp(0.05 * rng.standard_normal(30))
    f = rate_fit(list(zip(ns, v)))
    assert abs(f.slope + 0.65) <= 0.02
    x, y = np.log(ns), np.log(v)
    xm, ym = x.mean(), y.mean()
    slope = ((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum()
    assert f.slope == pytest.approx(slope, rel=1e-12)
    assert f.intercept == pytest.approx(ym - slope * xm, rel=1e-12)


def test_ks_band():
    assert ks_band(10**4) == pytest.approx(0.0163)
    assert ks_band(100, 0.05) == pytest.approx(0.136)
    assert ks_band(100, 0.1) == pytest.approx(sps.kstwobign.isf(0.1) / 10)


def test_ks_normal_examples():
    R = 1000
    q = sps.norm.ppf((np.arange(1, R + 1) - 0.5) / R)
    assert ks_normal(q) <= 0.5 / R + 1e-12
    assert ks_normal(np.zeros(50)) == pytest.approx(0.5, abs=1e-15)
    assert ks_normal(3 * q, scale=3) <= 0.5 / R + 1e-12
    with pytest.raises(ValueError):
        ks_normal(q, scale=0)


def test_ks_matches_scipy():
    x = np.random.default_rng(5).standard_normal(777) * 1.1 + 0.05
    assert ks_normal(x) == pytest.approx(sps.kstest(x, "norm").statistic, abs=1e-12)
    assert ks_statistic(x, sps.norm.cdf) == pytest.approx(ks_normal(x), abs=1e-12)


@pytest.mark.montecarlo
def test_ks_normal_calibration():
    rng = np.random.default_rng(6)
    band = 1.63 / math.sqrt(10**4)
    inside = sum(ks_normal(rng.standard_normal(10**4)) < band for _ in range(100))
    assert inside >= 95


def test_mahalanobis_examples():
    R = 1000
    q = sps.chi2(2).ppf((np.arange(1, R + 1) - 0.5) / R)
    res = mahalanobis_gof(np.column_stack([np.sqrt(q), np.zeros(R)]), np.eye(2))
    assert res.statistic <= 0.5 / R + 1e-12 and res.dof == 2
    res = mahalanobis_gof([[0.0, 5.0], [1.0, 0.0]], np.diag([1.0, 0.0]))
    assert res.dof == 1
    assert res.sq_distances[0] == 0 and res.out_of_range_energy[0] == pytest.approx(25)
    with pytest.raises(ValueError):
        mahalanobis_gof([[1.0, 0.0]], np.zeros((2, 2)))


def test_mahalanobis_full_rank_is_classical():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((3, 3))
    S = M @ M.T + 0.1 * np.eye(3)
    X = rng.standard_normal((200, 3))
    res = mahalanobis_gof(X, S)
    classical = np.einsum("ij,jk,ik->i", X, np.linalg.inv(S), X)
    assert np.allclose(res.sq_distances, classical, rtol=1e-10)
    assert np.allclose(res.out_of_range_energy, 0, atol=1e-20 + 1e-12 * classical.max())
    Z, _ = whiten(X, S)
    assert np.allclose((Z**2).sum(axis=1), classical, rtol=1e-10)


@pytest.mark.montecarlo
def test_mahalanobis_calibration_rank_deficient():
    rng = np.random.default_rng(8)
    band = 1.63 / math.sqrt(10**4)
    inside = 0
    for _ in range(100):
        M = rng.standard_normal((4, 2))
        S = M @ M.T
        X = rng.standard_normal((10**4, 2)) @ M.T
        inside += mahalanobis_gof(X, S).statistic < band
    assert inside >= 95


def test_weighted_chi2_moments():
    assert weighted_chi2_moments([1.0]) == (1.0, 2.0)
    assert weighted_chi2_moments([1.0] * 4) == (4.0, 8.0)
    assert weighted_chi2_moments([0.5]) == (0.5, 0.5)
    # equal mixture of 1*Z^2 and 2*Z^2: mean 1.5, E[X^2] = (3 + 12)/2
    m, v = weighted_chi2_moments([[1.0, 0.0], [0.0, 2.0]])
    assert m == pytest.approx(1.5) and v == pytest.approx(7.5 - 1.5**2)


@pytest.mark.montecarlo
def test_f_gap_check_exact_quantiles():
    R = 10**5
    q = sps.chi2(1).ppf((np.arange(1, R + 1) - 0.5) / R)
    res = f_gap_check(q, [1.0])
    assert res.mean_rel_err < 1e-3
    assert res.predicted_mean == 1 and res.predicted_variance == 2
    assert res.cdf_distance < 0.01
    with pytest.raises(ValueError):
        f_gap_check(q, [])
    with pytest.raises(ValueError):
        f_gap_check(q, [-1.0])


@pytest.mark.montecarlo
def test_f_gap_check_detects_wrong_scale():
    x = 2 * np.random.default_rng(9).standard_normal(5000) ** 2
    ok = f_gap_check(x, [2.0], reference_draws=10**5)
    bad = f_gap_check(x, [1.0], reference_draws=10**5)
    assert ok.mean_rel_err < 0.05 and ok.cdf_distance < 0.03
    assert bad.mean_rel_err > 0.5 and bad.cdf_distance > 0.1


def test_criterion_and_report():
    c = Criterion.at_most("err", 0.1, 0.15)
    assert c.passed and c.margin == pytest.approx(0.05)
    assert not Criterion.at_least("ratio", 0.5, 1.0).passed
    rep = ExperimentReport(samples=96, excluded=4)
    rep.add(c)
    assert rep.passed and not rep.invalid
    assert ExperimentReport(samples=90, excluded=10).invalid
    assert not ExperimentReport(samples=90, excluded=10).passed
    assert ExperimentReport(samples=0, excluded=0).invalid
    rep.add(Criterion.at_most("other", 2.0, 1.0))
    d = rep.to_dict()
    assert d["passed"] is False and [x["name"] for x in d["criteria"]] == ["err", "other"]
    rep.empirical_cov = np.eye(2)
    rep.extra["count"] = np.int64(3)
    d = rep.to_dict()
    assert d["empirical_cov"] == [[1.0, 0.0], [0.0, 1.0]] and type(d["count"]) is int

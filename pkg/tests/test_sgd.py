import math

import numpy as np
import pytest

from rpmanifold.geometry import (
    FlatQuadratic, HyperbolaToy, OutsideTubeError, SphereWell, distance_to_M, nice_representation,
)
from rpmanifold.noise import make_noise
from rpmanifold.schedules import ScheduleParams, burn_in, step_size, weight
from rpmanifold.sgd import (
    DivergenceError, SimulationSpec, f_gap_sample, limit_estimate, rescaled_deviation, rm_step,
    run_replication, run_replications, tangential_drift,
)
from rpmanifold.streams import Stream

P = ScheduleParams(gamma_exp=0.8, rho=0.0, beta=0.9)


def noise(prob, scale=1.0, kind="gaussian_iid"):
    if kind == "state_dependent":
        return make_noise(kind, scale * np.eye(prob.dim), prob.foot_distance)
    return make_noise(kind, scale * np.eye(prob.dim))


def naive_run(prob, p, model, x0, seed, rep, n):
    """Plain Python loop over ``rm_step`` keeping every iterate."""
    rng = Stream(seed, rep)
    xs = [np.asarray(x0, dtype=float)]
    for k in range(1, n + 1):
        xs.append(rm_step(xs[-1], k, prob, p, model, rng))
    return xs


def naive_average(xs, n, p):
    n0 = burn_in(n, p.beta)
    w = [weight(i, p.rho) for i in range(n0 + 1, n + 1)]
    return sum(wi * xs[i] for wi, i in zip(w, range(n0 + 1, n + 1))) / math.fsum(w)


def test_rm_step_examples():
    flat = FlatQuadratic(np.eye(1))
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    rng = Stream(0, 0)
    for n in (1, 7, 100):
        y = rm_step([0.0, 0.2], n, flat, P, zero, rng)
        assert y == pytest.approx([0.0, (1 - step_size(n, P)) * 0.2], rel=1e-15)
    assert np.array_equal(rm_step([0.3, 0.0], 5, flat, P, zero, rng), [0.3, 0.0])
    sph = SphereWell(2)
    q = ScheduleParams(c_gamma=0.1, gamma_exp=0.8)
    y = rm_step([1.5, 0.0], 1, sph, q, zero, rng)
    assert y == pytest.approx([1.3125, 0.0], rel=1e-15)


def test_rm_step_uses_step_indexed_noise():
    flat = FlatQuadratic(np.eye(1))
    model = noise(flat)
    a = rm_step([0.0, 0.0], 17, flat, P, model, Stream(3, 1))
    b = rm_step([0.0, 0.0], 17, flat, P, model, Stream(3, 1))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rm_step([0.0, 0.0], 18, flat, P, model, Stream(3, 1)))


def test_rm_step_reports_divergence():
    sph = SphereWell(2)
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    with pytest.raises(DivergenceError) as info:
        rm_step([1e120, 0.0], 9, sph, P, zero, Stream(0, 0))
    assert info.value.step == 9


def test_spec_validation():
    flat = FlatQuadratic(np.eye(1))
    with pytest.raises(ValueError):
        SimulationSpec(flat, P, noise(flat), horizons=(100, 50))
    with pytest.raises(ValueError):
        SimulationSpec(flat, P, noise(flat), initial_distance=1.5)
    with pytest.raises(ValueError):
        SimulationSpec(flat, P, make_noise("gaussian_iid", np.eye(3)))
    spec = SimulationSpec(flat, P, noise(flat), horizons=(100, 1000))
    assert spec.burn_ins == (31, 250)
    assert spec.check_from == 32


CASES = [
    ("flat", FlatQuadratic(np.diag([1.0, 2.0])), "gaussian_iid"),
    ("flat_rademacher", FlatQuadratic(np.eye(1), manifold_dim=2), "bounded_rademacher"),
    ("sphere", SphereWell(2), "gaussian_iid"),
    ("sphere3_state", SphereWell(3), "state_dependent"),
    ("hyperbola", HyperbolaToy(1.0), "gaussian_iid"),
]


@pytest.mark.parametrize("name,prob,kind", CASES, ids=[c[0] for c in CASES])
@pytest.mark.parametrize("rho", [0.0, 1.0])
def test_compiled_loop_matches_naive_recursion(name, prob, kind, rho):
    p = ScheduleParams(gamma_exp=0.8, rho=rho, beta=0.9)
    model = noise(prob, 0.05, kind)
    horizons = (10, 100, 333, 1000)
    spec = SimulationSpec(prob, p, model, horizons=horizons)
    tr = run_replication(spec, 99, 4)
    assert tr.status == "ok"
    xs = naive_run(prob, p, model, tr.x0, 99, 4, horizons[-1])
    for k, n in enumerate(horizons):
        assert np.allclose(tr.x[k], xs[n], rtol=1e-12, atol=1e-13)
        xbar = naive_average(xs, n, p)
        assert np.linalg.norm(tr.xbar[k] - xbar) <= 1e-12 * np.linalg.norm(xbar)
        assert tr.dist[k] == pytest.approx(distance_to_M(prob, xs[n]), abs=1e-12)
        assert tr.F_x[k] == pytest.approx(prob.objective(xs[n]), abs=1e-14)


def test_zero_noise_flat_average_is_weighted_geometric_decay():
    flat = FlatQuadratic(np.eye(1))
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    spec = SimulationSpec(flat, P, zero, horizons=(1000,))
    tr = run_replication(spec, 1, 0)
    th = [tr.x0[1]]
    for k in range(1, 1001):
        th.append((1 - step_size(k, P)) * th[-1])
    n0 = burn_in(1000, P.beta)
    expected = math.fsum(th[n0 + 1:]) / (1000 - n0)
    assert tr.xbar[0][1] == pytest.approx(expected, rel=1e-12)
    assert tr.xbar[0][0] == pytest.approx(tr.x0[0], rel=1e-15)


@pytest.mark.parametrize("prob", [FlatQuadratic(np.eye(1)), SphereWell(2), HyperbolaToy(1.0)],
                         ids=["flat", "sphere", "hyperbola"])
def test_zero_noise_start_on_manifold_is_fixed(prob):
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    spec = SimulationSpec(prob, P, zero, horizons=(10, 100, 1000))
    m = prob.project(prob.sample_tube(1, np.random.default_rng(0))[0])
    tr = run_replication(spec, 0, 0)
    xs = naive_run(prob, P, zero, m, 0, 0, 50)
    assert all(np.allclose(x, m, atol=1e-15) for x in xs)
    # from a tube start, the average converges to the limit and keeps F values finite
    assert tr.converged and np.all(np.diff(tr.dist) <= 0)


def test_replications_are_deterministic_and_order_free():
    sph = SphereWell(2)
    spec = SimulationSpec(sph, P, noise(sph, 0.1), horizons=(100, 1000))
    a = run_replications(spec, 5, 6)
    b = run_replications(spec, 5, 6, workers=3)
    c = run_replications(spec, 5, 3, start=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.xbar, y.xbar) and np.array_equal(x.x, y.x)
        assert np.array_equal(x.drift, y.drift)
    for x, y in zip(a[3:], c):
        assert np.array_equal(x.xbar, y.xbar) and x.replication == y.replication
    assert not np.array_equal(a[0].xbar, a[1].xbar)


@pytest.mark.parametrize("prob", [FlatQuadratic(np.eye(1)), SphereWell(2), HyperbolaToy(1.0)],
                         ids=["flat", "sphere", "hyperbola"])
def test_zero_noise_distance_contracts_every_step(prob):
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    pts = prob.sample_tube(1000, np.random.default_rng(1))
    C = max(np.abs(np.linalg.eigvalsh(prob.hessian(x))).max() for x in pts)
    Lp = 0.5 * prob.stability()
    q = ScheduleParams(c_gamma=1 / C, gamma_exp=0.8)
    for x in pts[:50]:
        d = distance_to_M(prob, x)
        for n in range(1, 200):
            x = rm_step(x, n, prob, q, zero, Stream(0, 0))
            d_new = distance_to_M(prob, x)
            assert d_new <= (1 - step_size(n, q) * Lp) * d + 1e-13
            d = d_new


def test_rescaled_deviation_and_f_gap_flat():
    flat = FlatQuadratic(np.eye(1))
    spec = SimulationSpec(flat, P, noise(flat), horizons=(1000, 4000))
    tr = run_replication(spec, 3, 0)
    for n in (1000, 4000):
        dev = rescaled_deviation(tr, n)
        th = tr.xbar[tr.index(n)][1]
        assert dev[0] == 0 and dev[1] == pytest.approx(math.sqrt(n) * th, rel=1e-15)
        assert f_gap_sample(tr, n, limit_estimate(tr)) == pytest.approx(n * th * th, rel=1e-12)
    with pytest.raises(KeyError):
        rescaled_deviation(tr, 999)


def test_rescaled_deviation_sphere_is_normal():
    sph = SphereWell(2)
    spec = SimulationSpec(sph, P, noise(sph, 0.2), horizons=(1000, 10000))
    for tr in run_replications(spec, 8, 10):
        for n in spec.horizons:
            dev = rescaled_deviation(tr, n)
            m = tr.xbar_proj[tr.index(n)]
            tangent = np.array([-m[1], m[0]])
            assert abs(dev @ tangent) <= 1e-9
            gap = f_gap_sample(tr, n, limit_estimate(tr))
            assert gap == pytest.approx(2 * n * (0 - tr.F_xbar[tr.index(n)]), rel=1e-12)


def test_f_gap_zero_on_manifold():
    flat = FlatQuadratic(np.eye(1))
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    spec = SimulationSpec(flat, P, zero, horizons=(10,), initial_distance=1e-300)
    tr = run_replication(spec, 0, 0)
    assert f_gap_sample(tr, 10, limit_estimate(tr)) == pytest.approx(0, abs=1e-290)


def test_outside_tube_average_is_flagged():
    flat = FlatQuadratic(np.eye(1))
    spec = SimulationSpec(flat, ScheduleParams(c_gamma=1.0), noise(flat, 25.0), horizons=(5, 20))
    bad = [tr for tr in run_replications(spec, 0, 40) if np.isnan(tr.xbar_proj).any()]
    assert bad
    tr = bad[0]
    n = tr.horizons[int(np.flatnonzero(np.isnan(tr.xbar_proj[:, 0]))[0])]
    with pytest.raises(OutsideTubeError):
        rescaled_deviation(tr, n)
    assert not tr.converged or tr.status != "ok"


def test_unstable_runs_are_marked_not_raised():
    sph = SphereWell(2)
    spec = SimulationSpec(sph, ScheduleParams(c_gamma=3.0), noise(sph, 4.0), horizons=(100, 1000))
    trs = run_replications(spec, 1, 30)
    statuses = {tr.status for tr in trs}
    assert statuses <= {"ok", "diverged", "tube_exit"} and statuses - {"ok"}
    for tr in trs:
        if tr.status != "ok":
            assert tr.fail_step >= 1 and not tr.converged


def test_drift_zero_when_tangent_block_has_no_noise():
    flat = FlatQuadratic(np.eye(1))
    model = make_noise("gaussian_iid", np.diag([0.0, 1.0]))
    spec = SimulationSpec(flat, P, model, horizons=(1000, 10000))
    tr = run_replication(spec, 2, 0)
    assert all(tangential_drift(tr, n).drift == 0 for n in spec.horizons)


def test_gradient_has_no_chart_tangent_component():
    # holds for the flat and spherical problems; see the hyperbola case below
    for prob in (FlatQuadratic(np.eye(2)), SphereWell(2), SphereWell(3)):
        rep = nice_representation(prob)
        for x in prob.sample_tube(1000, np.random.default_rng(2)):
            if isinstance(prob, SphereWell) and x[0] <= 0.2:
                continue
            z, _ = rep.psi(x)
            h = 1e-7
            g = prob.gradient(x)
            z2, _ = rep.psi(x + h * g)
            assert np.linalg.norm(z2 - z) <= 1e-6 * h * (1 + np.linalg.norm(g))


@pytest.mark.parametrize("prob", [FlatQuadratic(np.eye(1)), SphereWell(2)], ids=["flat", "sphere"])
def test_zero_noise_drift_vanishes(prob):
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    spec = SimulationSpec(prob, P, zero, horizons=(100, 1000, 10000))
    for tr in run_replications(spec, 0, 20):
        assert np.all(tr.drift <= 1e-12)


def test_hyperbola_zero_noise_drift_is_small():
    # the gradient of the hyperbola objective has a small chart-tangent part off the curve
    hyp = HyperbolaToy(1.0)
    zero = make_noise("gaussian_iid", np.zeros((2, 2)))
    spec = SimulationSpec(hyp, P, zero, horizons=(100, 1000, 10000))
    for tr in run_replications(spec, 0, 20):
        assert np.all(tr.drift <= 0.1 * spec.initial_distance)


def test_drift_monotone_for_shared_burn_in():
    p = ScheduleParams(gamma_exp=0.8, beta=0.5)
    horizons = (100, 104, 108, 112, 116, 120)
    assert len({burn_in(n, 0.5) for n in horizons}) == 1
    sph = SphereWell(2)
    spec = SimulationSpec(sph, p, noise(sph, 0.1), horizons=horizons)
    for tr in run_replications(spec, 4, 10):
        assert np.all(np.diff(tr.drift) >= 0)


def test_drift_matches_naive_chart_sup():
    sph = SphereWell(2)
    model = noise(sph, 0.1)
    spec = SimulationSpec(sph, P, model, horizons=(300, 1000))
    tr = run_replication(spec, 6, 2)
    xs = naive_run(sph, P, model, tr.x0, 6, 2, 1000)
    for k, n in enumerate(spec.horizons):
        n0 = burn_in(n, P.beta)
        ang = [math.atan2(x[1], x[0]) for x in xs]
        ref = ang[n0]
        sup = max(abs(math.remainder(a - ref, 2 * math.pi)) for a in ang[n0 + 1:n + 1])
        assert tr.drift[k] == pytest.approx(sup, abs=1e-9)
        d = tangential_drift(tr, n)
        assert d.bound > 0 and d.ratio == pytest.approx(d.drift / d.bound)

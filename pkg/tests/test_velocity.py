"""Velocity fields: initialization, evaluation, divergence estimators."""

import numpy as np
import pytest

from wflow import numcore as nc
from wflow import velocity as vel


def test_near_identity_init_outputs_zero():
    field = vel.init_near_identity(3, widths=(16, 16), seed=0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 3))
    assert np.all(vel.eval_velocity(field, x, 0.3) == 0.0)


def test_init_determinism():
    f1 = vel.init_near_identity(2, widths=(8,), seed=42)
    f2 = vel.init_near_identity(2, widths=(8,), seed=42)
    for p1, p2 in zip(f1.parameter_arrays(), f2.parameter_arrays()):
        assert np.array_equal(p1, p2)


def test_init_rejects_bad_dim():
    with pytest.raises(ValueError):
        vel.init_near_identity(0, widths=(8,))
    with pytest.raises(ValueError):
        vel.init_near_identity(2, widths=())


def test_affine_single_layer_evaluation():
    # single identity layer acting on (x, t~): A x + c * t~
    a = np.array([[0.5, -1.0], [2.0, 0.25]])
    field = vel.affine_field(a, interval=(0.0, 2.0), t_total=2.0)
    # wire the time column by hand to check the embedding scale
    field.layers[0].w[2, :] = np.array([3.0, -3.0])
    x = np.array([1.0, 2.0])
    t = 1.0  # scaled embedding is t / t_total = 0.5
    expected = a @ x + 0.5 * np.array([3.0, -3.0])
    assert np.allclose(vel.eval_velocity(field, x, t), expected)


def test_batch_matches_per_point():
    field = vel.init_near_identity(2, widths=(8,), seed=3)
    for layer in field.layers:
        layer.w += 0.3 * np.random.default_rng(4).normal(size=layer.w.shape)
    pts = np.random.default_rng(5).normal(size=(7, 2))
    batch = vel.eval_velocity(field, pts, 0.4)
    single = np.stack([vel.eval_velocity(field, p, 0.4) for p in pts])
    assert np.allclose(batch, single)


def test_dimension_mismatch():
    field = vel.init_near_identity(2, widths=(4,), seed=0)
    with pytest.raises(nc.ShapeError):
        vel.eval_velocity(field, np.ones(3), 0.0)


def test_divergence_linear_trace():
    assert vel.divergence(vel.affine_field(3.0 * np.eye(2)), np.ones(2), 0.0) == pytest.approx(6.0)
    a = np.array([[0.5, 0.0], [0.0, -0.5]])
    assert vel.divergence(vel.affine_field(a), np.ones(2), 0.0) == pytest.approx(0.0)


def test_divergence_estimator_validation():
    with pytest.raises(ValueError):
        vel.DivergenceEstimator("hutchinson", probes=0)
    with pytest.raises(ValueError):
        vel.DivergenceEstimator("bogus")


def _random_field(d, seed, scale=0.4):
    field = vel.init_near_identity(d, widths=(12, 12), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for layer in field.layers:
        layer.w += scale * rng.normal(size=layer.w.shape)
        layer.b += scale * rng.normal(size=layer.b.shape)
    return field


@pytest.mark.parametrize("d", [1, 2, 5, 8])
def test_exact_divergence_matches_fd_jacobian_trace(d):
    field = _random_field(d, seed=d)
    rng = np.random.default_rng(d)
    x = rng.normal(size=d)
    t = 0.37
    h = 1e-6
    trace = 0.0
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        vp = vel.eval_velocity(field, x + e, t)
        vm = vel.eval_velocity(field, x - e, t)
        trace += (vp[j] - vm[j]) / (2 * h)
    exact = vel.divergence(field, x, t)
    assert exact == pytest.approx(trace, rel=1e-5, abs=1e-8)


def test_hutchinson_within_three_sigma():
    # Rademacher quadratic-form estimator on a linear field with known trace:
    # variance of one probe is 2 * sum of squared off-diagonal entries
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 3))
    a[np.diag_indices(3)] = np.array([1.0, 2.0, 3.0])
    field = vel.affine_field(a)
    probes = 10_000
    est = vel.DivergenceEstimator("hutchinson", probes=probes)
    got = vel.divergence(field, np.ones(3), 0.0, est, np.random.default_rng(0))
    off = a + a.T
    var_one = np.sum((off - np.diag(np.diag(off))) ** 2) / 2.0
    sigma = np.sqrt(var_one / probes)
    assert abs(got - 6.0) <= 3 * sigma


def test_hutchinson_mean_matches_exact_on_mlp():
    field = _random_field(2, seed=21)
    x = np.array([0.3, -0.8])
    exact = vel.divergence(field, x, 0.5)
    est = vel.DivergenceEstimator("hutchinson", probes=4000)
    approx = vel.divergence(field, x, 0.5, est, np.random.default_rng(7))
    assert approx == pytest.approx(exact, abs=0.05 * max(1.0, abs(exact)))


def test_velocity_continuous_in_time():
    # no hidden time discretization: velocity varies smoothly across the interval
    field = _random_field(2, seed=33)
    x = np.array([0.5, 0.5])
    ts = np.linspace(0.0, 1.0, 101)
    vals = np.stack([vel.eval_velocity(field, x, t) for t in ts])
    steps = np.linalg.norm(np.diff(vals, axis=0), axis=1)
    assert steps.max() < 0.1  # ~ Lipschitz * dt for a smooth tanh field


def test_divergence_differentiable_in_parameters():
    field = _random_field(2, seed=44)
    params = field.parameter_arrays()
    x = np.random.default_rng(0).normal(size=(4, 2))

    def loss_fn():
        tape = nc.Tape()
        with tape:
            bound = field.bind(tape)
            _, div = bound.velocity_and_divergence(
                nc.Tensor(x), 0.3, vel.DivergenceEstimator("exact"))
            out = nc.tmean(nc.square(div))
        tape.mark_output(out)
        tape.freeze()
        return float(out.data), [g.data for g in nc.grad(tape)]

    report = nc.check_loss_gradient_fd(loss_fn, params)
    assert report.passed, str(report)

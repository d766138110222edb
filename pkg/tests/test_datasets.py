"""Analytic densities, presets, and the particle CSV interchange format."""

import numpy as np
import pytest
from scipy import stats

from wflow import datasets as ds


def test_standard_normal_logpdf_at_origin():
    assert ds.standard_gaussian(2).log_pdf(np.zeros(2)) == pytest.approx(-np.log(2 * np.pi))


def test_two_component_mixture_logsumexp():
    a = 1.3
    mix = ds.GaussianMixture([0.5, 0.5],
                             [ds.Gaussian([a], [[1.0]]), ds.Gaussian([-a], [[1.0]])])
    # direct two-term evaluation
    component = -0.5 * np.log(2 * np.pi) - a**2 / 2
    expected = np.logaddexp(np.log(0.5) + component, np.log(0.5) + component)
    assert mix.log_pdf(np.zeros(1)) == pytest.approx(expected)


def test_fig10_preset_parameters():
    p = ds.preset_density("fig10-p")
    assert np.allclose(p.weights, [1 / 3, 1 / 3, 1 / 3])
    assert np.allclose([c.mean for c in p.components],
                       [[-2.0, 2.0], [-1.5, 1.5], [-1.0, 1.0]])
    assert np.allclose([c.cov for c in p.components],
                       [0.75 * np.eye(2), 0.25 * np.eye(2), 0.75 * np.eye(2)])
    q = ds.preset_density("fig10-q")
    assert np.allclose(q.weights, [0.5, 0.5])
    assert np.allclose([c.mean for c in q.components], [[0.75, -1.5], [-2.0, -3.0]])
    assert np.allclose([c.cov for c in q.components],
                       [0.5 * np.eye(2), 0.5 * np.eye(2)])


def test_fig10_logpdf_at_first_component_mean():
    p = ds.preset_density("fig10-p")
    x = np.array([-2.0, 2.0])
    logs = [c.log_pdf(x) + np.log(w) for c, w in zip(p.components, p.weights)]
    expected = np.logaddexp.reduce(logs)
    assert p.log_pdf(x) == pytest.approx(expected)


def test_unknown_preset():
    with pytest.raises(KeyError):
        ds.preset_density("nope")


def test_standard_gaussian_moments():
    spec = ds.DatasetSpec("standard-gaussian", count=100_000, dim=2, seed=0)
    ens = ds.sample_dataset(spec)
    assert np.linalg.norm(ens.positions.mean(axis=0)) <= 0.02
    assert np.abs(np.cov(ens.positions, rowvar=False) - np.eye(2)).max() <= 0.03


def test_sampling_determinism():
    spec = ds.DatasetSpec("fig10-p", count=500, seed=7)
    a = ds.sample_dataset(spec)
    b = ds.sample_dataset(spec)
    assert np.array_equal(a.positions, b.positions)


def test_shifted_gaussian():
    spec = ds.DatasetSpec("standard-gaussian", count=50_000, dim=2, seed=1, shift=(3.0, 0.0))
    ens = ds.sample_dataset(spec)
    assert np.allclose(ens.positions.mean(axis=0), [3.0, 0.0], atol=0.03)


def test_mixture_score_matches_fd():
    mix = ds.preset_density("fig10-p")
    x = np.array([-1.2, 1.4])
    h = 1e-6
    fd = np.array([
        (mix.log_pdf(x + h * e) - mix.log_pdf(x - h * e)) / (2 * h)
        for e in np.eye(2)
    ])
    assert np.allclose(mix.score(x), fd, atol=1e-6)


def test_logsumexp_stable_for_far_components():
    mix = ds.GaussianMixture(
        [0.5, 0.5],
        [ds.Gaussian([0.0], [[1.0]]), ds.Gaussian([100.0], [[1.0]])])
    value = mix.log_pdf(np.zeros(1))
    assert np.isfinite(value)
    assert value == pytest.approx(np.log(0.5) - 0.5 * np.log(2 * np.pi))


@pytest.mark.parametrize("preset", ["fig10-p", "fig10-q", "checkerboard", "branch-tree"])
def test_sampler_pdf_chi_square(preset):
    # chi-square goodness of fit on a coarse 2-D grid at alpha = 0.01
    density = ds.preset_density(preset)
    rng = np.random.default_rng(0)
    m = 100_000
    x = density.sample(m, rng)
    edges_x = np.linspace(x[:, 0].min() - 1e-9, x[:, 0].max() + 1e-9, 9)
    edges_y = np.linspace(x[:, 1].min() - 1e-9, x[:, 1].max() + 1e-9, 9)
    counts, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=[edges_x, edges_y])
    # cell probabilities by dense midpoint quadrature inside each cell
    probs = np.zeros_like(counts)
    sub = 12
    for i in range(len(edges_x) - 1):
        xs = np.linspace(edges_x[i], edges_x[i + 1], sub + 1)
        xs = 0.5 * (xs[1:] + xs[:-1])
        wx = (edges_x[i + 1] - edges_x[i]) / sub
        for j in range(len(edges_y) - 1):
            ys = np.linspace(edges_y[j], edges_y[j + 1], sub + 1)
            ys = 0.5 * (ys[1:] + ys[:-1])
            wy = (edges_y[j + 1] - edges_y[j]) / sub
            grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
            with np.errstate(all="ignore"):
                pdf = np.exp(density.log_pdf(grid))
            probs[i, j] = pdf.sum() * wx * wy
    # merge everything outside the grid into a catch-all bucket
    outside = 1.0 - probs.sum()
    assert outside >= -1e-6
    keep = probs.ravel() * m >= 5
    expected = probs.ravel()[keep] * m
    observed = counts.ravel()[keep]
    chi2 = np.sum((observed - expected) ** 2 / expected)
    dof = keep.sum() - 1
    threshold = stats.chi2.ppf(0.99, dof)
    assert chi2 <= threshold, f"{preset}: chi2 {chi2:.1f} > {threshold:.1f} (dof {dof})"


def test_two_moons_sampler_shape():
    ens = ds.sample_dataset(ds.DatasetSpec("two-moons", count=2000, seed=3))
    assert ens.positions.shape == (2000, 2)
    with pytest.raises(NotImplementedError):
        ds.preset_density("two-moons").log_pdf(np.zeros(2))


def test_particle_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    ens = ds.ParticleEnsemble(rng.normal(size=(37, 3)))
    path = tmp_path / "particles.csv"
    ds.save_particles_csv(path, ens)
    back = ds.load_particles_csv(path)
    assert np.allclose(back.positions, ens.positions, atol=1e-15)


def test_density_spec_round_trip():
    mix = ds.fig10_q()
    rebuilt = ds.density_from_spec(mix.spec())
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert np.allclose(rebuilt.log_pdf(x), mix.log_pdf(x))


def test_gaussian_kl_closed_form():
    p = ds.Gaussian([0.0], [[4.0]])
    q = ds.standard_gaussian(1)
    assert p.kl_to(q) == pytest.approx(0.5 * (4 - 1 - np.log(4)))


def test_mixture_weight_validation():
    with pytest.raises(ValueError):
        ds.GaussianMixture([0.7, 0.7], [ds.Gaussian([0.0], [[1.0]])] * 2)

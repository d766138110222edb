"""Chain composition, likelihood, sampling, and the checkpoint format."""

import numpy as np
import pytest
from conftest import affine_flow_map, compose_affine, gaussian_kl, gaussian_logpdf, push_gaussian

from wflow import chain as fc
from wflow import datasets as ds
from wflow import odeint
from wflow import velocity as vel


def _perturbed_chain(d, n_blocks, seed=0, scale=0.25, steps=32, widths=(12, 12)):
    chn = fc.identity_chain(d, n_blocks, steps=steps, widths=widths, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for block in chn.blocks:
        for layer in block.field.layers:
            layer.w += scale * rng.normal(size=layer.w.shape)
    return chn


def _affine_chain(specs, base, steps=64):
    """Chain of time-independent affine-velocity blocks from (A, c) pairs."""
    blocks = []
    t = 0.0
    for a, c in specs:
        interval = (t, t + 1.0)
        field = vel.affine_field(a, c, interval=interval, t_total=float(len(specs)))
        blocks.append(fc.FlowBlock(field, odeint.IntegratorConfig("rk4", steps, interval)))
        t += 1.0
    return fc.FlowChain(blocks, base)


def test_zero_chain_is_identity():
    chn = fc.identity_chain(2, 3, steps=4)
    ens = ds.ParticleEnsemble(np.random.default_rng(0).normal(size=(9, 2)))
    assert np.array_equal(fc.forward_map(chn, ens).positions, ens.positions)
    assert np.array_equal(fc.inverse_map(chn, ens).positions, ens.positions)


def test_scaling_block_forward_and_inverse():
    chn = _affine_chain([(np.array([[-1.0]]), None)], ds.standard_gaussian(1))
    ens = ds.ParticleEnsemble(np.random.default_rng(1).normal(size=(11, 1)))
    out = fc.forward_map(chn, ens)
    assert np.allclose(out.positions, np.exp(-1.0) * ens.positions, atol=1e-9)
    back = fc.inverse_map(chn, out)
    assert np.abs(back.positions - ens.positions).max() <= 1e-9


def test_round_trip_trained_scale_chain():
    chn = _perturbed_chain(2, 3, seed=3)
    ens = ds.ParticleEnsemble(np.random.default_rng(4).normal(size=(40, 2)))
    back = fc.inverse_map(chn, fc.forward_map(chn, ens))
    assert np.abs(back.positions - ens.positions).max() <= 1e-6


def test_log_density_identity_chain():
    chn = fc.identity_chain(2, 2, steps=4)
    assert fc.log_density(chn, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi))


def test_log_density_scaling_block():
    chn = _affine_chain([(np.array([[-1.0]]), None)], ds.standard_gaussian(1))
    expected = -0.5 * np.log(2 * np.pi) - 1.0
    assert fc.log_density(chn, np.zeros(1)) == pytest.approx(expected, abs=1e-9)


def test_log_density_matches_affine_gaussian_pushforward():
    # model density of an affine chain is the exact pullback of the base
    rng = np.random.default_rng(7)
    specs = [(0.3 * rng.normal(size=(2, 2)), 0.3 * rng.normal(size=2)) for _ in range(2)]
    base = ds.Gaussian([0.2, -0.4], [[1.3, 0.2], [0.2, 0.8]])
    chn = _affine_chain(specs, base)
    maps = [affine_flow_map(a, c, 1.0) for a, c in specs]
    m_tot, b_tot = compose_affine(maps)
    m_inv = np.linalg.inv(m_tot)
    model_mean = m_inv @ (base.mean - b_tot)
    model_cov = m_inv @ base.cov @ m_inv.T
    x = rng.normal(size=(20, 2))
    got = fc.log_density(chn, x)
    want = gaussian_logpdf(x, model_mean, model_cov)
    assert np.abs(got - want).max() <= 1e-4


def test_dpi_equality_for_affine_chains():
    # invertible maps preserve f-divergences: KL(p||q) = KL(Fp||Fq) exactly
    rng = np.random.default_rng(9)
    specs = [(0.4 * rng.normal(size=(2, 2)), 0.2 * rng.normal(size=2)) for _ in range(3)]
    maps = [affine_flow_map(a, c, 1.0) for a, c in specs]
    m_tot, b_tot = compose_affine(maps)
    mean_p, cov_p = np.array([1.0, -0.5]), np.array([[1.0, 0.3], [0.3, 2.0]])
    mean_q, cov_q = np.array([0.0, 0.0]), np.array([[0.5, 0.0], [0.0, 1.5]])
    kl_before = gaussian_kl(mean_p, cov_p, mean_q, cov_q)
    push_p = push_gaussian(mean_p, cov_p, m_tot, b_tot)
    push_q = push_gaussian(mean_q, cov_q, m_tot, b_tot)
    kl_after = gaussian_kl(*push_p, *push_q)
    assert kl_after == pytest.approx(kl_before, rel=1e-6)
    # and the numerically integrated chain realizes the same map
    chn = _affine_chain(specs, ds.standard_gaussian(2))
    x = rng.normal(size=(6, 2))
    got = fc.forward_map(chn, ds.ParticleEnsemble(x)).positions
    assert np.abs(got - (x @ m_tot.T + b_tot)).max() <= 1e-7


def test_sampling_moments_identity_chain():
    chn = fc.identity_chain(2, 1, steps=2)
    n = 40_000
    ens = fc.sample(chn, n, np.random.default_rng(3))
    assert np.abs(ens.positions.mean(axis=0)).max() <= 4 / np.sqrt(n)
    assert np.abs(np.cov(ens.positions, rowvar=False) - np.eye(2)).max() <= 0.05


def test_sampling_determinism():
    chn = _perturbed_chain(2, 2, seed=5, steps=8)
    a = fc.sample(chn, 50, np.random.default_rng(11))
    b = fc.sample(chn, 50, np.random.default_rng(11))
    assert np.array_equal(a.positions, b.positions)


def test_sampling_pushforward_variance():
    chn = _affine_chain([(np.array([[-1.0]]), None)], ds.standard_gaussian(1))
    ens = fc.sample(chn, 40_000, np.random.default_rng(13))
    assert ens.positions.var() == pytest.approx(np.e**2, rel=0.05)


def test_normalization_by_quadrature_1d():
    chn = _perturbed_chain(1, 2, seed=17, scale=0.4, steps=24)
    xs = np.linspace(-9.0, 9.0, 1201)[:, None]
    dens = np.exp(fc.log_density(chn, xs))
    integral = np.trapezoid(dens.ravel(), xs.ravel())
    assert integral == pytest.approx(1.0, abs=0.02)


def test_checkpoint_round_trip_bits(tmp_path):
    chn = _perturbed_chain(2, 2, seed=19, steps=6, widths=(8,))
    chn.blocks[0].trained = True
    path = tmp_path / "chain.wflw"
    fc.save_checkpoint(chn, path)
    loaded = fc.load_checkpoint(path)
    for a, b in zip(chn.parameter_arrays(), loaded.parameter_arrays()):
        assert np.array_equal(a, b)
    assert loaded.blocks[0].trained and not loaded.blocks[1].trained
    assert loaded.blocks[0].integrator.scheme == "rk4"
    ens = ds.ParticleEnsemble(np.random.default_rng(2).normal(size=(5, 2)))
    assert np.array_equal(fc.forward_map(chn, ens).positions,
                          fc.forward_map(loaded, ens).positions)


def test_checkpoint_mixture_base(tmp_path):
    chn = fc.identity_chain(2, 1, base=ds.fig10_p(), steps=4, widths=(4,))
    path = tmp_path / "mix.wflw"
    fc.save_checkpoint(chn, path)
    loaded = fc.load_checkpoint(path)
    x = np.random.default_rng(3).normal(size=(8, 2))
    assert np.allclose(loaded.base.log_pdf(x), chn.base.log_pdf(x))


def test_checkpoint_corruption_detected(tmp_path):
    chn = _perturbed_chain(1, 1, seed=23, steps=4, widths=(4,))
    path = tmp_path / "c.wflw"
    fc.save_checkpoint(chn, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(fc.CheckpointError, match="checksum"):
        fc.load_checkpoint(path)


def test_checkpoint_future_version_rejected(tmp_path):
    chn = _perturbed_chain(1, 1, seed=23, steps=4, widths=(4,))
    path = tmp_path / "c.wflw"
    fc.save_checkpoint(chn, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(fc.CheckpointError, match="version"):
        fc.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    chn = _perturbed_chain(1, 1, seed=23, steps=4, widths=(4,))
    path = tmp_path / "c.wflw"
    fc.save_checkpoint(chn, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(fc.CheckpointError, match="truncated"):
        fc.load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.wflw"
    path.write_bytes(b"JUNKJUNKJUNKJUNK")
    with pytest.raises(fc.CheckpointError, match="magic"):
        fc.load_checkpoint(path)


def test_chain_requires_contiguous_intervals():
    f1 = vel.init_near_identity(2, widths=(4,), seed=0, interval=(0.0, 1.0))
    f2 = vel.init_near_identity(2, widths=(4,), seed=1, interval=(1.5, 2.0))
    b1 = fc.FlowBlock(f1, odeint.IntegratorConfig("rk4", 2, (0.0, 1.0)))
    b2 = fc.FlowBlock(f2, odeint.IntegratorConfig("rk4", 2, (1.5, 2.0)))
    with pytest.raises(ValueError, match="tile"):
        fc.FlowChain([b1, b2], ds.standard_gaussian(2))


def test_block_interval_mismatch_rejected():
    f = vel.init_near_identity(2, widths=(4,), seed=0, interval=(0.0, 1.0))
    with pytest.raises(ValueError):
        fc.FlowBlock(f, odeint.IntegratorConfig("rk4", 2, (0.0, 0.5)))

"""Training objectives and the optimizer loop that minimizes them.

Four ways to train a transport:

* ``nll``      -- end-to-end negative log-likelihood through all blocks;
* ``jko``      -- one block at a time, proximal step against a known target
                  potential: E[V(x_end) - int div v] + mean squared particle
                  movement weighted by 1/(2 gamma);
* ``fm``       -- simulation-free velocity matching along an interpolant
                  between two sample batches;
* ``local_fm`` -- velocity matching against a short mean-reverting
                  (Ornstein-Uhlenbeck) step of the current particles.

Progressive kinds (jko, local_fm) assume earlier blocks are trained, frozen,
and already applied to the data; training block n never touches parameters
of blocks before it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from wflow import numcore as nc
from wflow import odeint
from wflow.chain import FlowBlock, FlowChain, push_forward_logdet
from wflow.datasets import ParticleEnsemble
from wflow.velocity import DivergenceEstimator, default_estimator

FM_STRATA = 8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the trace up to the failing iteration."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    learn_rate: float = 1e-3
    batch_size: int = 128
    iterations: int = 500
    seed: int = 0
    gamma: float = 1.0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def make_optimizer(cfg: TrainConfig, params):
    return Adam(params, cfg.learn_rate) if cfg.optimizer == "adam" else Sgd(params, cfg.learn_rate)


@dataclass
class Interpolant:
    """Two-endpoint interpolation I_s with I_0 = x0 and I_1 = x1.

    ``coupling`` fixes how endpoint batches are paired: "independent"
    shuffles one side, "paired" keeps the given order (for endpoint pairs
    that are constructed jointly, like mean-reverting step targets).
    """

    kind: str = "linear"  # linear | trig
    coupling: str = "independent"

    def __post_init__(self):
        if self.kind not in ("linear", "trig"):
            raise ValueError(f"unknown interpolant {self.kind!r}")
        if self.coupling not in ("independent", "paired"):
            raise ValueError(f"unknown coupling {self.coupling!r}")

    def coeffs(self, s: np.ndarray):
        """(a0, a1, da0, da1) such that I_s = a0 x0 + a1 x1, each (n, 1)."""
        s = s.reshape(-1, 1)
        if self.kind == "linear":
            one = np.ones_like(s)
            return 1.0 - s, s, -one, one
        half_pi = 0.5 * np.pi
        c, sn = np.cos(half_pi * s), np.sin(half_pi * s)
        return c, sn, -half_pi * sn, half_pi * c


def _positions(data) -> np.ndarray:
    if isinstance(data, ParticleEnsemble):
        return data.positions
    return np.asarray(data, dtype=np.float64)


def _resolve_potential(potential):
    """Normalize the target-potential argument to a Tensor -> Tensor callable."""
    if potential is None:
        return lambda x: nc.mul(nc.tsum(nc.square(x), axis=1), 0.5)
    if hasattr(potential, "potential_expr"):
        return potential.potential_expr
    return potential


def nll_loss(chain: FlowChain, batch, est: DivergenceEstimator | None = None, rng=None):
    """Mean negative log-likelihood of the batch, end-to-end through all blocks.

    Returns (loss value, gradients) with gradients ordered like
    ``chain.parameter_arrays()``.
    """
    x = _positions(batch)
    if est is None:
        est = default_estimator(chain.d)
    if not hasattr(chain.base, "log_pdf_expr"):
        raise TypeError("nll training needs a base density with a tape expression (Gaussian)")
    tape = nc.Tape()
    with tape:
        bound = [(block.field.bind(tape), block.integrator) for block in chain.blocks]
        z, logdet = push_forward_logdet(bound, nc.Tensor(x), est, rng)
        loglik = nc.add(chain.base.log_pdf_expr(z), logdet)
        loss = nc.mul(nc.tmean(loglik), -1.0)
    tape.mark_output(loss)
    tape.freeze()
    grads = [g.data for g in nc.grad(tape)]
    return float(loss.data), grads


def jko_block_loss(block: FlowBlock, batch_prev, gamma, potential=None,
                   est: DivergenceEstimator | None = None, rng=None):
    """Proximal-step objective for one block against target exp(-V).

    mean[ V(x_end) - int div v ] + (1 / 2 gamma) * mean ||x_end - x_start||^2.
    The first part is the target KL up to an additive constant; the second
    regularizes the amount of particle movement.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = _positions(batch_prev)
    if est is None:
        est = default_estimator(block.field.d)
    v_of = _resolve_potential(potential)
    tape = nc.Tape()
    with tape:
        bound = block.field.bind(tape)
        aug = odeint.integrate_augmented_tensor(bound, nc.Tensor(x), block.integrator, est, rng)
        kl_part = nc.tmean(nc.add(v_of(aug.x), nc.mul(aug.logdet, -1.0)))
        move = nc.tmean(aug.displacement_sq())
        loss = nc.add(kl_part, nc.mul(move, 1.0 / (2.0 * gamma)))
    tape.mark_output(loss)
    tape.freeze()
    grads = [g.data for g in nc.grad(tape)]
    return float(loss.data), grads


def fm_loss(field, interp: Interpolant, batch0, batch1, time_draws=1, rng=None):
    """Monte-Carlo velocity-matching loss along the interpolant.

    Under independent coupling batch1 is shuffled (when an rng is given)
    before pairing by index; paired coupling keeps the given order.
    Interpolation times are stratified uniform over 8 strata, rescaled
    onto the field's active interval. With rng=None the strata midpoints
    are used, which keeps tiny fixed examples deterministic.
    """
    field = field.field if isinstance(field, FlowBlock) else field
    x0 = _positions(batch0)
    x1 = _positions(batch1)
    if len(x0) == 0 or len(x1) == 0:
        raise ValueError("empty batch")
    if x0.shape != x1.shape:
        raise nc.ShapeError(f"batch shapes differ: {x0.shape} vs {x1.shape}")
    if rng is not None and interp.coupling == "independent":
        x1 = x1[rng.permutation(len(x1))]
    if time_draws > 1:
        x0 = np.tile(x0, (time_draws, 1))
        x1 = np.tile(x1, (time_draws, 1))
    n = len(x0)
    strata = (np.arange(n) % FM_STRATA).astype(np.float64)
    u = rng.uniform(0.0, 1.0, size=n) if rng is not None else np.full(n, 0.5)
    s = (strata + u) / FM_STRATA
    t_a, t_b = field.interval
    span = t_b - t_a
    a0, a1, da0, da1 = interp.coeffs(s)

    tape = nc.Tape()
    with tape:
        bound = field.bind(tape)
        x0_t, x1_t = nc.Tensor(x0), nc.Tensor(x1)
        xt = nc.add(nc.mul(x0_t, nc.Tensor(a0)), nc.mul(x1_t, nc.Tensor(a1)))
        target = nc.mul(
            nc.add(nc.mul(x0_t, nc.Tensor(da0)), nc.mul(x1_t, nc.Tensor(da1))), 1.0 / span)
        vhat = bound.velocity(xt, t_a + s * span)
        gap = vhat - target
        loss = nc.tmean(nc.tsum(nc.square(gap), axis=1))
    tape.mark_output(loss)
    tape.freeze()
    grads = [g.data for g in nc.grad(tape)]
    return float(loss.data), grads


def make_local_fm_targets(batch_prev, gamma_n, rng):
    """Pair current particles with their mean-reverting step endpoints.

    x_r = exp(-gamma_n) x_l + sqrt(1 - exp(-2 gamma_n)) g,  g ~ N(0, I).
    gamma_n = 0 reproduces x_l exactly; large gamma_n forgets it.
    """
    if gamma_n < 0:
        raise ValueError("gamma_n must be nonnegative")
    x_l = _positions(batch_prev)
    decay = np.exp(-gamma_n)
    spread = np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * gamma_n)))
    x_r = decay * x_l + spread * rng.standard_normal(x_l.shape)
    return ParticleEnsemble(x_l.copy()), ParticleEnsemble(x_r)


@dataclass
class TrainResult:
    subject: object
    losses: np.ndarray
    wall_ms: np.ndarray
    smoothed: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        # monotone envelope: best loss seen so far
        self.smoothed = (np.minimum.accumulate(self.losses)
                         if len(self.losses) else self.losses.copy())


def _iteration_rng(seed, iteration):
    return np.random.default_rng([seed, iteration])


def train_block(loss_kind, subject, data, cfg: TrainConfig, *,
                est: DivergenceEstimator | None = None, potential=None,
                interp: Interpolant | None = None, time_draws=1) -> TrainResult:
    """Minimize one objective with minibatch Adam/SGD; deterministic per seed.

    loss_kind selects the objective and the expected (subject, data) pair:
    nll (chain, ensemble), jko (block, pushed ensemble), fm (block or field,
    (ensemble0, ensemble1)), local_fm (block or field, ensemble).
    """
    if loss_kind not in ("nll", "jko", "fm", "local_fm"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if interp is None:
        # mean-reverting step targets are constructed jointly with their
        # sources, so the local kind defaults to the paired coupling
        interp = Interpolant(coupling="paired" if loss_kind == "local_fm" else "independent")
    params = subject.parameter_arrays()
    opt = make_optimizer(cfg, params)
    losses, wall = [], []

    if loss_kind == "fm":
        pool0, pool1 = _positions(data[0]), _positions(data[1])
        if len(pool0) != len(pool1):
            raise nc.ShapeError("fm training expects equal-size sample pools")
        pool_size = len(pool0)
    else:
        pool = _positions(data)
        pool_size = len(pool)

    take = min(cfg.batch_size, pool_size)
    t_start = time.perf_counter()
    for it in range(cfg.iterations):
        rng = _iteration_rng(cfg.seed, it)
        idx = rng.choice(pool_size, size=take, replace=False)
        try:
            if loss_kind == "nll":
                value, grads = nll_loss(subject, pool[idx], est, rng)
            elif loss_kind == "jko":
                value, grads = jko_block_loss(subject, pool[idx], cfg.gamma, potential, est, rng)
            elif loss_kind == "fm":
                jdx = rng.choice(pool_size, size=take, replace=False)
                value, grads = fm_loss(subject, interp, pool0[idx], pool1[jdx],
                                       time_draws, rng)
            else:
                x_l, x_r = make_local_fm_targets(pool[idx], cfg.gamma, rng)
                value, grads = fm_loss(subject, interp, x_l, x_r, time_draws, rng)
        except nc.NumericError as err:
            raise TrainingDiverged(
                f"loss became non-finite at iteration {it}: {err}",
                np.asarray(losses)) from err
        opt.step(grads)
        losses.append(value)
        wall.append(1e3 * (time.perf_counter() - t_start))
    if isinstance(subject, FlowBlock):
        subject.trained = True
    elif isinstance(subject, FlowChain):
        for block in subject.blocks:
            block.trained = True
    return TrainResult(subject, np.asarray(losses), np.asarray(wall))


def push_particles(block: FlowBlock, ensemble: ParticleEnsemble) -> ParticleEnsemble:
    """Apply one trained block to stored particles (the progressive update step)."""
    out = odeint.integrate(block.field, ensemble.positions, block.integrator)
    return ParticleEnsemble(out)

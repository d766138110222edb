"""Learned-transport applications: density ratios, optimal transport, worst-case sampling.

* Logistic ratio fitting: a small classifier whose logit estimates
  log(f1/f0); chained over a path of bridging ensembles it telescopes into
  a long-range log-ratio.
* Flow OT: minimize the particle transport cost plus KL penalties pinning
  both endpoints of the flow.
* Flow DRO: a single transport block minimizing
  E[R(F(X)) + ||X - F(X)||^2 / (2 gamma)], yielding a worst-case sampler.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from wflow import mlp
from wflow import numcore as nc
from wflow import odeint
from wflow.chain import FlowBlock, FlowChain
from wflow.datasets import Gaussian, ParticleEnsemble
from wflow.objectives import TrainConfig, make_optimizer
from wflow.velocity import DivergenceEstimator, default_estimator, init_near_identity

RATIO_WIDTHS = (64, 64)


class UnboundedRiskError(RuntimeError):
    """Sustained linear descent of the DRO objective: the risk is unbounded below."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _pos(x) -> np.ndarray:
    if isinstance(x, ParticleEnsemble):
        return x.positions
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


@dataclass
class RatioModel:
    """Classifier logit phi(x) estimating a log density ratio log(f1/f0)."""

    layers: list
    trained_on: tuple  # (bridge step index or None, (n0, n1) sample counts)

    def parameter_arrays(self):
        return mlp.parameter_arrays(self.layers)

    def log_ratio(self, x) -> np.ndarray:
        out = mlp.BoundLayers(self.layers).forward(nc.Tensor(_pos(x)))
        return out.data[:, 0]

    def log_ratio_expr(self, x: nc.Tensor) -> nc.Tensor:
        """(m,) tape expression; differentiable in x through the fixed weights."""
        out = mlp.BoundLayers(self.layers).forward(x)
        return nc.tsum(out, axis=1)


def logistic_ratio_loss(layers, samples0, samples1):
    """Empirical logistic loss mean[softplus(phi(x0))] + mean[softplus(-phi(x1))].

    Its population minimizer is phi = log(f1/f0). Returns (loss, grads).
    """
    x0, x1 = _pos(samples0), _pos(samples1)
    tape = nc.Tape()
    with tape:
        bound = mlp.BoundLayers(layers, tape)
        phi0 = bound.forward(nc.Tensor(x0))
        phi1 = bound.forward(nc.Tensor(x1))
        loss = nc.add(
            nc.tmean(nc.softplus(phi0)),
            nc.tmean(nc.softplus(nc.mul(phi1, -1.0))),
        )
    tape.mark_output(loss)
    tape.freeze()
    grads = [g.data for g in nc.grad(tape)]
    return float(loss.data), grads


def fit_logistic_ratio(samples0, samples1, cfg: TrainConfig,
                       widths=RATIO_WIDTHS, step=None) -> RatioModel:
    """Train phi ~ log(f1/f0) from two sample sets by minibatch logistic loss."""
    x0, x1 = _pos(samples0), _pos(samples1)
    if len(x0) == 0 or len(x1) == 0:
        raise ValueError("both sample sets must be nonempty")
    if x0.shape[1] != x1.shape[1]:
        raise nc.ShapeError(f"sample dimensions differ: {x0.shape[1]} vs {x1.shape[1]}")
    rng_init = np.random.default_rng(cfg.seed)
    layers = mlp.init_layers([x0.shape[1], *widths, 1], rng_init)
    params = mlp.parameter_arrays(layers)
    opt = make_optimizer(cfg, params)
    base_lr = cfg.learn_rate
    take0 = min(cfg.batch_size, len(x0))
    take1 = min(cfg.batch_size, len(x1))
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        i0 = rng.choice(len(x0), size=take0, replace=False)
        i1 = rng.choice(len(x1), size=take1, replace=False)
        _, grads = logistic_ratio_loss(layers, x0[i0], x1[i1])
        # cosine decay to a 10% floor settles the late-phase minibatch noise
        opt.lr = base_lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * it / cfg.iterations)))
        opt.step(grads)
    return RatioModel(layers, (step, (len(x0), len(x1))))


def telescopic_log_ratio(path, x, cfg: TrainConfig, return_models=False):
    """Sum of per-bridge log-ratios along a path of ensembles.

    ``path`` runs from samples of p to samples of q through overlapping
    intermediates; each consecutive pair gets its own classifier and all of
    them are evaluated at the same query points, so the sum estimates
    log q(x) - log p(x).
    """
    if len(path) < 2:
        raise ValueError("telescoping needs at least two ensembles")
    xq = _pos(x)
    total = np.zeros(len(xq))
    models = []
    for n in range(len(path) - 1):
        model = fit_logistic_ratio(path[n], path[n + 1],
                                   TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + n}),
                                   step=n)
        total += model.log_ratio(xq)
        models.append(model)
    if return_models:
        return total, models
    return total


# ---------------------------------------------------------------------------
# flow-based optimal transport

@dataclass
class OtResult:
    chain: FlowChain
    transport_cost: float
    kl_p: float
    kl_q: float
    losses: np.ndarray
    wall_ms: np.ndarray


def _ot_loss(chain_blocks, base_p, base_q, xp, xq, gamma, est, rng):
    """Particle transport cost + gamma * (KL(p||p_hat) + KL(q||q_hat)).

    p_hat is the pullback of q through the inverse map and q_hat the
    pushforward of p; both KLs reduce to log-density differences via the
    divergence integral along the trajectories.
    """
    tape = nc.Tape()
    with tape:
        bound = [(block.field.bind(tape), block.integrator) for block in chain_blocks]
        # forward side: transport cost and KL(p || p_hat)
        x = nc.Tensor(xp)
        cost = None
        logdet_fwd = None
        for bv, cfg in bound:
            aug = odeint.integrate_augmented_tensor(bv, x, cfg, est, rng)
            span = cfg.interval[1] - cfg.interval[0]
            seg = nc.mul(nc.tmean(aug.displacement_sq()), 1.0 / span)
            cost = seg if cost is None else nc.add(cost, seg)
            logdet_fwd = aug.logdet if logdet_fwd is None else nc.add(logdet_fwd, aug.logdet)
            x = aug.x
        log_p_hat = nc.add(base_q.log_pdf_expr(x), logdet_fwd)
        kl_p = nc.add(float(np.mean(base_p.log_pdf(xp))), nc.mul(nc.tmean(log_p_hat), -1.0))
        # reverse side: KL(q || q_hat) with q_hat the pushforward of p
        y = nc.Tensor(xq)
        logdet_rev = None
        for bv, cfg in reversed(bound):
            aug = odeint.integrate_augmented_tensor(bv, y, cfg, est, rng, direction="reverse")
            logdet_rev = aug.logdet if logdet_rev is None else nc.add(logdet_rev, aug.logdet)
            y = aug.x
        log_q_hat = nc.add(base_p.log_pdf_expr(y), logdet_rev)
        kl_q = nc.add(float(np.mean(base_q.log_pdf(xq))), nc.mul(nc.tmean(log_q_hat), -1.0))
        loss = nc.add(cost, nc.mul(nc.add(kl_p, kl_q), gamma))
    tape.mark_output(loss)
    tape.freeze()
    grads = [g.data for g in nc.grad(tape)]
    return float(loss.data), grads, float(cost.data), float(kl_p.data), float(kl_q.data)


def transport_cost(chain: FlowChain, p_samples) -> float:
    """Time-normalized mean squared particle movement, summed over blocks."""
    x = _pos(p_samples)
    total = 0.0
    for block in chain.blocks:
        x_next = odeint.integrate(block.field, x, block.integrator)
        span = block.integrator.interval[1] - block.integrator.interval[0]
        total += float(np.mean(np.sum((x_next - x) ** 2, axis=1))) / span
        x = x_next
    return total


def ot_train(p_samples, q_samples, chain: FlowChain, gamma, cfg: TrainConfig,
             p_density=None, q_density=None,
             est: DivergenceEstimator | None = None) -> OtResult:
    """Fit the chain as a transport from p to q with endpoint KL penalties.

    gamma weights the endpoint constraints. When analytic densities are not
    supplied, Gaussian moment fits of the sample pools stand in for them
    (exact whenever p and q really are Gaussian).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    xp_pool, xq_pool = _pos(p_samples), _pos(q_samples)
    base_p = p_density if p_density is not None else _moment_gaussian(xp_pool)
    base_q = q_density if q_density is not None else _moment_gaussian(xq_pool)
    for name, dens in (("p", base_p), ("q", base_q)):
        if not hasattr(dens, "log_pdf_expr"):
            raise TypeError(f"{name} density must expose a tape expression (Gaussian)")
    if est is None:
        est = default_estimator(chain.d)
    params = chain.parameter_arrays()
    opt = make_optimizer(cfg, params)
    base_lr = cfg.learn_rate
    take_p = min(cfg.batch_size, len(xp_pool))
    take_q = min(cfg.batch_size, len(xq_pool))
    losses, wall = [], []
    t0 = time.perf_counter()
    kl_p = kl_q = float("nan")
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        ip = rng.choice(len(xp_pool), size=take_p, replace=False)
        iq = rng.choice(len(xq_pool), size=take_q, replace=False)
        value, grads, _, kl_p, kl_q = _ot_loss(
            chain.blocks, base_p, base_q, xp_pool[ip], xq_pool[iq], gamma, est, rng)
        # cosine decay: the penalty weight amplifies late-phase gradient noise
        opt.lr = base_lr * (0.05 + 0.475 * (1.0 + np.cos(np.pi * it / cfg.iterations)))
        opt.step(grads)
        losses.append(value)
        wall.append(1e3 * (time.perf_counter() - t0))
    for block in chain.blocks:
        block.trained = True
    return OtResult(chain, transport_cost(chain, xp_pool), kl_p, kl_q,
                    np.asarray(losses), np.asarray(wall))


def _moment_gaussian(x) -> Gaussian:
    return Gaussian(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


# ---------------------------------------------------------------------------
# flow-based worst-case sampling

class RiskFunction:
    """Differentiable per-sample risk R(x), evaluable on the tape."""

    def __init__(self, expr, kind="custom"):
        self.expr = expr
        self.kind = kind

    @classmethod
    def linear(cls, c) -> "RiskFunction":
        c = np.asarray(c, dtype=np.float64)

        def expr(x):
            return nc.tsum(nc.mul(x, nc.Tensor(c)), axis=1)

        return cls(expr, kind="linear")

    @classmethod
    def from_callable(cls, fn) -> "RiskFunction":
        return cls(fn, kind="custom")

    @classmethod
    def classifier_loss(cls, model: RatioModel, label=1) -> "RiskFunction":
        """Logistic loss of a fixed classifier at x, under the given label.

        Minimizing the label-1 loss on class-0 samples drags them across
        the decision boundary: the adversarial-example pattern.
        """

        def expr(x):
            phi = model.log_ratio_expr(x)
            if label == 1:
                return nc.softplus(nc.mul(phi, -1.0))
            return nc.softplus(phi)

        return cls(expr, kind="classifier-loss")

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        return self.expr(x)

    def eval(self, x) -> np.ndarray:
        return self.expr(nc.Tensor(_pos(x))).data


@dataclass
class DroResult:
    transport: FlowBlock
    ensemble: ParticleEnsemble
    risk: float
    movement: float
    losses: np.ndarray
    wall_ms: np.ndarray


def _resolve_sampler(p_sampler):
    if isinstance(p_sampler, ParticleEnsemble):
        pool = p_sampler.positions

        def draw(n, rng):
            return pool[rng.choice(len(pool), size=min(n, len(pool)), replace=False)]

        return draw, pool
    if hasattr(p_sampler, "sample"):
        return (lambda n, rng: p_sampler.sample(n, rng)), None
    if callable(p_sampler):
        return p_sampler, None
    raise TypeError("p_sampler must be an ensemble, a density, or a callable")


_DESCENT_WINDOW = 500


def _sustained_linear_descent(losses) -> bool:
    """True when the last window keeps descending without decelerating."""
    w = np.asarray(losses[-_DESCENT_WINDOW:])
    third = _DESCENT_WINDOW // 3
    drop1 = np.median(w[:third]) - np.median(w[third : 2 * third])
    drop2 = np.median(w[third : 2 * third]) - np.median(w[2 * third :])
    scale = max(1.0, abs(float(np.median(w))))
    return drop1 > 1e-4 * scale and drop2 > 0.7 * drop1


def dro_train(risk: RiskFunction, p_sampler, gamma, cfg: TrainConfig, *,
              d=None, widths=(64, 64), steps=8, seed_offset=0) -> DroResult:
    """Learn the worst-case transport min_F E[R(F(X)) + ||X - F(X)||^2 / (2 gamma)].

    A single near-identity block plays the transport map. Sustained linear
    loss descent (no deceleration over 500 iterations) aborts with a
    diagnosis: the risk is unbounded below at this gamma.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    draw, pool = _resolve_sampler(p_sampler)
    if d is None:
        probe = draw(1, np.random.default_rng(cfg.seed))
        d = _pos(probe).shape[1]
    field = init_near_identity(d, widths=widths, seed=cfg.seed + seed_offset,
                               interval=(0.0, 1.0))
    block = FlowBlock(field, odeint.IntegratorConfig("rk4", steps, (0.0, 1.0)))
    params = block.parameter_arrays()
    opt = make_optimizer(cfg, params)
    losses, wall = [], []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        x = _pos(draw(cfg.batch_size, rng))
        tape = nc.Tape()
        with tape:
            bound = field.bind(tape)
            y = odeint.integrate_tensor(bound, nc.Tensor(x), block.integrator)
            move = nc.tsum(nc.square(y - nc.Tensor(x)), axis=1)
            loss = nc.add(nc.tmean(risk(y)), nc.mul(nc.tmean(move), 1.0 / (2.0 * gamma)))
        tape.mark_output(loss)
        tape.freeze()
        grads = [g.data for g in nc.grad(tape)]
        opt.step(grads)
        losses.append(float(loss.data))
        wall.append(1e3 * (time.perf_counter() - t0))
        if it >= _DESCENT_WINDOW and it % 50 == 0 and _sustained_linear_descent(losses):
            raise UnboundedRiskError(
                f"objective still descending linearly after {it} iterations "
                f"(gamma={gamma}); risk appears unbounded below",
                np.asarray(losses),
            )
    block.trained = True
    eval_rng = np.random.default_rng([cfg.seed, cfg.iterations])
    x_eval = _pos(pool if pool is not None else draw(4096, eval_rng))
    y_eval = odeint.integrate(field, x_eval, block.integrator)
    risk_value = float(np.mean(risk.eval(y_eval)))
    movement = float(np.mean(np.sum((y_eval - x_eval) ** 2, axis=1)))
    return DroResult(block, ParticleEnsemble(y_eval), risk_value, movement,
                     np.asarray(losses), np.asarray(wall))

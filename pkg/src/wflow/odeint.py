"""Fixed-step Euler/RK4 integration of velocity fields, forward or reverse.

Deterministic by construction: a uniform grid, no step-size adaptation.
The augmented variant carries the running divergence integral (for the
density change along the trajectory) as part of the same RK4 state, so
the accumulated value is consistent with the position at the same order.
All arithmetic goes through the numcore primitives, which makes both the
end state and the divergence integral differentiable in the field
parameters when run under a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wflow import numcore as nc
from wflow.velocity import BoundVelocity, DivergenceEstimator, VelocityField, default_estimator

SCHEMES = ("euler", "rk4")


class IntegrationError(nc.NumericError):
    """Non-finite state during integration; carries the failing step index."""

    def __init__(self, step, direction, cause):
        super().__init__(f"non-finite state at step {step} ({direction}): {cause}")
        self.step = step
        self.direction = direction


@dataclass
class IntegratorConfig:
    scheme: str = "rk4"
    steps: int = 32
    interval: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        t_a, t_b = self.interval
        if not t_a < t_b:
            raise ValueError(f"empty interval [{t_a}, {t_b}]")

    @property
    def h(self) -> float:
        t_a, t_b = self.interval
        return (t_b - t_a) / self.steps


@dataclass
class AugmentedState:
    """Position plus the divergence integral and the block entry point."""

    x: nc.Tensor
    logdet: nc.Tensor
    x_start: nc.Tensor

    def displacement_sq(self) -> nc.Tensor:
        """Per-particle squared displacement from the block entry point."""
        delta = self.x - self.x_start
        return nc.tsum(nc.square(delta), axis=1)


def _check_interval(field: VelocityField, cfg: IntegratorConfig):
    eps = 1e-9
    if cfg.interval[0] < field.interval[0] - eps or cfg.interval[1] > field.interval[1] + eps:
        raise ValueError(
            f"integration interval {cfg.interval} outside field interval {field.interval}"
        )


def _grid(cfg: IntegratorConfig, direction: str):
    t_a, t_b = cfg.interval
    if direction == "forward":
        return t_a, cfg.h
    if direction == "reverse":
        return t_b, -cfg.h
    raise ValueError(f"direction must be forward or reverse, got {direction!r}")


def _combine_rk4(x, k1, k2, k3, k4, h):
    ksum = nc.add(nc.add(k1, nc.mul(nc.add(k2, k3), 2.0)), k4)
    return nc.add(x, nc.mul(ksum, h / 6.0))


def integrate_tensor(bound: BoundVelocity, x0: nc.Tensor, cfg: IntegratorConfig,
                     direction="forward") -> nc.Tensor:
    """Tape-friendly integration of dx/dt = v(x, t) over the config interval."""
    t, h = _grid(cfg, direction)
    x = x0
    for i in range(cfg.steps):
        try:
            if cfg.scheme == "euler":
                x = nc.add(x, nc.mul(bound.velocity(x, t), h))
            else:
                k1 = bound.velocity(x, t)
                k2 = bound.velocity(nc.add(x, nc.mul(k1, h / 2.0)), t + h / 2.0)
                k3 = bound.velocity(nc.add(x, nc.mul(k2, h / 2.0)), t + h / 2.0)
                k4 = bound.velocity(nc.add(x, nc.mul(k3, h)), t + h)
                x = _combine_rk4(x, k1, k2, k3, k4, h)
        except nc.NumericError as err:
            raise IntegrationError(i, direction, err) from err
        t += h
    return x


def integrate_augmented_tensor(bound: BoundVelocity, x0: nc.Tensor, cfg: IntegratorConfig,
                               est: DivergenceEstimator, rng=None,
                               direction="forward") -> AugmentedState:
    """Jointly integrate the position and the divergence along its trajectory.

    The divergence is evaluated at the same RK4 stage points as the state;
    the returned ``logdet`` is the signed integral of div v over the
    traversed time span (negative of the forward value when reversed).
    """
    t, h = _grid(cfg, direction)
    m = x0.shape[0]
    x = x0
    logdet = nc.Tensor(np.zeros(m))
    for i in range(cfg.steps):
        try:
            if cfg.scheme == "euler":
                v, div = bound.velocity_and_divergence(x, t, est, rng)
                x = nc.add(x, nc.mul(v, h))
                logdet = nc.add(logdet, nc.mul(div, h))
            else:
                k1, d1 = bound.velocity_and_divergence(x, t, est, rng)
                k2, d2 = bound.velocity_and_divergence(
                    nc.add(x, nc.mul(k1, h / 2.0)), t + h / 2.0, est, rng)
                k3, d3 = bound.velocity_and_divergence(
                    nc.add(x, nc.mul(k2, h / 2.0)), t + h / 2.0, est, rng)
                k4, d4 = bound.velocity_and_divergence(
                    nc.add(x, nc.mul(k3, h)), t + h, est, rng)
                x = _combine_rk4(x, k1, k2, k3, k4, h)
                logdet = _combine_rk4(logdet, d1, d2, d3, d4, h)
        except IntegrationError:
            raise
        except nc.NumericError as err:
            raise IntegrationError(i, direction, err) from err
        t += h
    return AugmentedState(x=x, logdet=logdet, x_start=x0)


def integrate(field: VelocityField, x0, cfg: IntegratorConfig, direction="forward") -> np.ndarray:
    """Eager endpoint of the trajectory started at x0 ((d,) or (m, d))."""
    _check_interval(field, cfg)
    xb = np.asarray(x0, dtype=np.float64)
    single = xb.ndim == 1
    out = integrate_tensor(field.bind(), nc.Tensor(xb[None, :] if single else xb), cfg, direction)
    return out.data[0] if single else out.data


def integrate_augmented(field: VelocityField, x0, cfg: IntegratorConfig,
                        est: DivergenceEstimator | None = None, rng=None,
                        direction="forward") -> AugmentedState:
    """Eager augmented integration; state fields hold Tensors over a batch."""
    _check_interval(field, cfg)
    if est is None:
        est = default_estimator(field.d)
    xb = np.asarray(x0, dtype=np.float64)
    if xb.ndim == 1:
        xb = xb[None, :]
    return integrate_augmented_tensor(field.bind(), nc.Tensor(xb), cfg, est, rng, direction)

"""Time-conditioned MLP velocity fields and their divergence.

The field maps (x, t) -> velocity in R^d through a dense stack applied to
concat(x, t / t_total). Divergence (the Jacobian trace over the x block)
comes from explicit directional-derivative chains built out of the same
closed primitive set, so it stays differentiable in the parameters with a
single reverse sweep: d basis chains for the exact trace, or K Rademacher
probe chains for the Hutchinson estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wflow import mlp
from wflow import numcore as nc

EXACT_DIVERGENCE_MAX_DIM = 8


@dataclass
class DivergenceEstimator:
    mode: str = "exact"  # exact | hutchinson
    probes: int = 8      # hutchinson only, Rademacher probe count

    def __post_init__(self):
        if self.mode not in ("exact", "hutchinson"):
            raise ValueError(f"unknown divergence mode {self.mode!r}")
        if self.mode == "hutchinson" and self.probes < 1:
            raise ValueError("hutchinson estimator needs probes >= 1")


def default_estimator(d: int) -> DivergenceEstimator:
    """Exact trace for small d, Hutchinson above (probe count 8)."""
    if d <= EXACT_DIVERGENCE_MAX_DIM:
        return DivergenceEstimator("exact")
    return DivergenceEstimator("hutchinson", probes=8)


class VelocityField:
    """Parameterized velocity v(x, t) active on a half-open time interval.

    Immutable during evaluation; training mutates the layer arrays in
    place between evaluation phases (single writer).
    """

    def __init__(self, layers, interval, t_total, d):
        t_a, t_b = float(interval[0]), float(interval[1])
        if not t_a < t_b:
            raise ValueError(f"empty interval [{t_a}, {t_b})")
        if layers[0].w.shape[0] != d + 1:
            raise ValueError(
                f"first layer expects width {layers[0].w.shape[0]}, need d+1 = {d + 1}"
            )
        if layers[-1].w.shape[1] != d:
            raise ValueError("last layer must output d values")
        self.layers = layers
        self.interval = (t_a, t_b)
        self.t_total = float(t_total)
        self.d = d

    def parameter_arrays(self):
        return mlp.parameter_arrays(self.layers)

    def parameter_count(self):
        return mlp.parameter_count(self.layers)

    def bind(self, tape=None) -> "BoundVelocity":
        return BoundVelocity(self, tape)


class BoundVelocity:
    """A field's parameters as Tensors, reusable across many evaluations."""

    def __init__(self, field: VelocityField, tape=None):
        self.field = field
        self.bound = mlp.BoundLayers(field.layers, tape)

    def _time_column(self, t, m):
        scale = 1.0 / self.field.t_total
        if np.ndim(t) == 0:
            col = np.full((m, 1), float(t) * scale)
        else:
            t = np.asarray(t, dtype=np.float64)
            if t.shape != (m,):
                raise nc.ShapeError(f"per-sample times must have shape ({m},), got {t.shape}")
            col = (t * scale).reshape(m, 1)
        return nc.Tensor(col)

    def velocity(self, x: nc.Tensor, t) -> nc.Tensor:
        h = nc.concat([x, self._time_column(t, x.shape[0])], axis=1)
        return self.bound.forward(h)

    def velocity_and_divergence(self, x: nc.Tensor, t, est: DivergenceEstimator, rng=None):
        m, d = x.shape
        h = nc.concat([x, self._time_column(t, m)], axis=1)
        v, derivs = self.bound.forward(h, want_derivs=True)

        def chain(u):
            # directional derivative of the stack along u, w.r.t. the input
            for (w, _, _), deriv in zip(self.bound.entries, derivs):
                u = nc.matmul(u, w)
                if deriv is not None:
                    u = nc.mul(u, deriv)
            return u

        if est.mode == "exact":
            cols = []
            for j in range(d):
                e = np.zeros((1, d + 1))
                e[0, j] = 1.0
                u = chain(nc.Tensor(e))
                cols.append(nc.slice_(u, 1, j, j + 1))
            div = nc.tsum(nc.concat(cols, axis=1), axis=1)
            if div.shape[0] == 1 and m > 1:
                # all-identity stacks keep the basis row un-batched
                div = nc.mul(div, nc.Tensor(np.ones(m)))
        else:
            if rng is None:
                raise ValueError("hutchinson divergence needs an rng")
            acc = None
            for _ in range(est.probes):
                eps = rng.integers(0, 2, size=(m, d)).astype(np.float64) * 2.0 - 1.0
                u0 = np.concatenate([eps, np.zeros((m, 1))], axis=1)
                u = chain(nc.Tensor(u0))
                quad = nc.tsum(nc.mul(u, nc.Tensor(eps)), axis=1)
                acc = quad if acc is None else nc.add(acc, quad)
            div = nc.mul(acc, 1.0 / est.probes)
        return v, div


def init_near_identity(d, widths=(64, 64), seed=0, interval=(0.0, 1.0), t_total=None,
                       hidden_act="tanh") -> VelocityField:
    """Fresh field whose output is exactly zero, so its block map is the identity.

    Hidden weights are scaled-uniform; the final layer is zeroed. Same seed,
    same parameters.
    """
    if d <= 0:
        raise ValueError("dimension must be positive")
    if not widths:
        raise ValueError("need at least one layer width")
    rng = np.random.default_rng(seed)
    sizes = [d + 1, *widths, d]
    layers = mlp.init_layers(sizes, rng, hidden_act=hidden_act, zero_final=True)
    if t_total is None:
        t_total = max(interval[1], 1.0)
    return VelocityField(layers, interval, t_total, d)


def affine_field(a, c=None, interval=(0.0, 1.0), t_total=None) -> VelocityField:
    """Single identity-activation layer realizing v(x) = A x + c, time-independent."""
    a = np.asarray(a, dtype=np.float64)
    d = a.shape[0]
    c = np.zeros(d) if c is None else np.asarray(c, dtype=np.float64)
    w = np.zeros((d + 1, d))
    w[:d, :] = a.T  # affine computes x @ w, so rows index input coords
    layers = [mlp.Layer(w, c.copy(), "identity")]
    if t_total is None:
        t_total = max(interval[1], 1.0)
    return VelocityField(layers, interval, t_total, d)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def eval_velocity(field: VelocityField, x, t) -> np.ndarray:
    """Eager forward pass; accepts a single point (d,) or a batch (m, d)."""
    xb, single = _as_batch(x)
    if xb.shape[1] != field.d:
        raise nc.ShapeError(f"point dimension {xb.shape[1]} != field dimension {field.d}")
    v = field.bind().velocity(nc.Tensor(xb), t)
    return v.data[0] if single else v.data


def divergence(field: VelocityField, x, t, est: DivergenceEstimator | None = None, rng=None):
    """Eager divergence at (x, t); scalar for a single point, (m,) for a batch."""
    if est is None:
        est = default_estimator(field.d)
    xb, single = _as_batch(x)
    _, div = field.bind().velocity_and_divergence(nc.Tensor(xb), t, est, rng)
    return float(div.data[0]) if single else div.data

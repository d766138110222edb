"""Shared closed-form oracles for the test suite.

The affine-velocity helpers give exact flow maps (matrix exponentials) and
exact Gaussian pushforwards, independent of the numerical integrators they
are used to check.
"""

import numpy as np
from scipy.linalg import expm


def affine_flow_map(a, c, dt):
    """Exact time-dt flow map of dx/dt = A x + c as (M, b): x -> M x + b."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = a.shape[0]
    c = np.zeros(d) if c is None else np.asarray(c, dtype=float)
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = a
    aug[:d, d] = c
    m = expm(aug * dt)
    return m[:d, :d], m[:d, d]


def compose_affine(maps):
    """Compose (M, b) pairs applied left to right."""
    m_total, b_total = None, None
    for m, b in maps:
        if m_total is None:
            m_total, b_total = m, b
        else:
            m_total = m @ m_total
            b_total = m @ b_total + b
    return m_total, b_total


def push_gaussian(mean, cov, m, b):
    """Moments of the exact pushforward of N(mean, cov) through x -> M x + b."""
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return m @ mean + b, m @ cov @ m.T


def gaussian_logpdf(x, mean, cov):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = len(mean)
    delta = x - mean
    prec = np.linalg.inv(cov)
    maha = np.einsum("ij,jk,ik->i", delta, prec, delta)
    return -0.5 * (d * np.log(2 * np.pi) + np.linalg.slogdet(cov)[1] + maha)


def gaussian_kl(mean_a, cov_a, mean_b, cov_b):
    """Closed-form KL between two Gaussians."""
    mean_a = np.asarray(mean_a, dtype=float)
    mean_b = np.asarray(mean_b, dtype=float)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=float))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=float))
    d = len(mean_a)
    prec_b = np.linalg.inv(cov_b)
    delta = mean_b - mean_a
    return 0.5 * (
        np.trace(prec_b @ cov_a)
        + delta @ prec_b @ delta
        - d
        + np.linalg.slogdet(cov_b)[1]
        - np.linalg.slogdet(cov_a)[1]
    )

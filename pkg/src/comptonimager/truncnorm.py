"""Elementwise truncated-normal log densities and inverse-CDF draws.

Thin, vectorized and tail-stable; ``scipy.stats.truncnorm`` gives the same
numbers but its per-call overhead dominates inside the Gibbs sweep.
"""
from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def log_mass(alpha, beta):
    """log(Phi(beta) - Phi(alpha)) for standardized bounds alpha < beta, stable in both tails."""
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float))
    upper = alpha > 0  # interval above the mean: work with upper tails
    la = np.where(upper, log_ndtr(-alpha), log_ndtr(beta))
    lb = np.where(upper, log_ndtr(-beta), log_ndtr(alpha))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = la + np.log1p(-np.exp(lb - la))
    return out


def logpdf(x, mean, sigma, lo, hi):
    """Elementwise log density of N(mean, sigma^2) truncated to [lo, hi]; -inf outside."""
    x, mean, sigma, lo, hi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, mean, sigma, lo, hi)))
    z = (x - mean) / sigma
    val = -0.5 * z * z - _LOG_SQRT_2PI - np.log(sigma) - log_mass((lo - mean) / sigma, (hi - mean) / sigma)
    return np.where((x >= lo) & (x <= hi), val, -np.inf)


def draw(mean, sigma, lo, hi, u):
    """Inverse-CDF draw from N(mean, sigma^2) truncated to [lo, hi] using uniforms ``u``."""
    mean, sigma, lo, hi, u = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, sigma, lo, hi, u)))
    alpha = (lo - mean) / sigma
    beta = (hi - mean) / sigma
    upper = alpha > 0
    with np.errstate(invalid="ignore", over="ignore"):
        pa = np.where(upper, ndtr(-alpha), ndtr(alpha))
        pb = np.where(upper, ndtr(-beta), ndtr(beta))
        p = pa + u * (pb - pa)
        z = np.where(upper, -ndtri(p), ndtri(p))
    bad = ~np.isfinite(z) | (pa == pb)
    if np.any(bad):
        # far tail: the truncated law is nearly exponential off the near boundary
        near = np.where(upper, alpha, -beta)[bad]
        width = (beta - alpha)[bad]
        ub = np.where(upper, u, 1.0 - u)[bad]
        off = -np.log1p(-ub * -np.expm1(-near * width)) / near
        z[bad] = np.where(upper[bad], near + off, -(near + off))
    return np.clip(mean + sigma * z, lo, hi)

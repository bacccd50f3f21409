"""Directional helpers on the unit sphere: lattices, rotations, von Mises-Fisher."""
from __future__ import annotations

import numpy as np


def lonlat_to_unit(lon_deg, lat_deg):
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def unit_to_lonlat(u):
    u = np.asarray(u, dtype=float)
    lon = np.degrees(np.arctan2(u[..., 1], u[..., 0]))
    lat = np.degrees(np.arcsin(np.clip(u[..., 2], -1.0, 1.0)))
    return lon, lat


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def angle_between(u, v):
    return np.arccos(np.clip(np.sum(np.asarray(u) * np.asarray(v), axis=-1), -1.0, 1.0))


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform points on the unit sphere (golden-angle spiral, equal-area bands)."""
    if n < 1:
        raise ValueError("need at least one point")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def fibonacci_cap(n: int, axis, half_angle: float) -> np.ndarray:
    """``n`` near-uniform points in the spherical cap around ``axis``."""
    i = np.arange(n) + 0.5
    cos_t = 1.0 - (i / n) * (1.0 - np.cos(half_angle))
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    e1, e2 = tangent_basis(axis)
    return (cos_t[:, None] * np.asarray(axis)[None, :]
            + sin_t[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2))


def tangent_basis(axis):
    """Two unit vectors completing ``axis`` to a right-handed orthonormal frame."""
    x, y, z = (float(v) for v in axis)
    if abs(z) < 0.9:  # helper (0, 0, 1)
        e1 = np.array([-y, x, 0.0])
    else:  # helper (1, 0, 0)
        e1 = np.array([0.0, -z, y])
    e1 /= np.sqrt(e1 @ e1)
    e2 = np.array([y * e1[2] - z * e1[1], z * e1[0] - x * e1[2], x * e1[1] - y * e1[0]])
    return e1, e2


def tangent_basis_batch(axes):
    """Vectorized :func:`tangent_basis` for an (n, 3) array."""
    axes = np.asarray(axes, dtype=float)
    helper = np.where((np.abs(axes[:, 2]) < 0.9)[:, None], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    e1 = np.cross(helper, axes)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return e1, np.cross(axes, e1)


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation matrix taking unit vector ``a`` onto ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        e1, _ = tangent_basis(a)
        return 2.0 * np.outer(e1, e1) - np.eye(3)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def directions_from_cos(axis, cos_t, phi):
    """Unit vectors at polar cosine ``cos_t`` and azimuth ``phi`` about ``axis`` (broadcasts over rows)."""
    axis = np.atleast_2d(np.asarray(axis, dtype=float))
    if axis.shape[0] == 1:
        e1, e2 = tangent_basis(axis[0])
        e1, e2 = e1[None, :], e2[None, :]
    else:
        e1, e2 = tangent_basis_batch(axis)
    cos_t = np.asarray(cos_t, dtype=float)[:, None]
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    phi = np.asarray(phi, dtype=float)[:, None]
    out = cos_t * axis + sin_t * (np.cos(phi) * e1 + np.sin(phi) * e2)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


# -- von Mises-Fisher on S^2 ----------------------------------------------------


def vmf_log_norm(kappa):
    """log of the vMF normalizer kappa / (4 pi sinh kappa), stable for large kappa."""
    kappa = np.asarray(kappa, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(
            kappa > 1e-8,
            np.log(np.maximum(kappa, 1e-300)) - np.log(2.0 * np.pi) - kappa - np.log1p(-np.exp(-2.0 * kappa)),
            -np.log(4.0 * np.pi),
        )


def vmf_logpdf(x, mu, kappa):
    """Log density per steradian of vMF(mu, kappa) at unit vectors ``x``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return vmf_log_norm(kappa) + kappa * (np.sum(x * mu, axis=-1) - 1.0) + kappa


def vmf_cos_from_uniform(u, kappa):
    """Inverse CDF of the polar cosine w = mu . x under vMF(kappa); ``u`` in [0, 1)."""
    u = np.asarray(u, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.where(kappa < 1e-8, 1.0 - 2.0 * (1.0 - u), w)
    return np.clip(w, -1.0, 1.0)


def vmf_from_uniforms(mu, kappa, u_cos, u_phi):
    """Transform uniforms into vMF draws around rows of ``mu`` (exact inverse CDF)."""
    w = vmf_cos_from_uniform(u_cos, kappa)
    return directions_from_cos(mu, np.atleast_1d(w), 2.0 * np.pi * np.atleast_1d(u_phi))


def sample_vmf(mu, kappa: float, size: int, rng: np.random.Generator) -> np.ndarray:
    mu = normalize(np.asarray(mu, dtype=float))
    return vmf_from_uniforms(mu, kappa, rng.random(size), rng.random(size))


def sample_uniform_sphere(size: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.uniform(-1.0, 1.0, size)
    phi = rng.uniform(0.0, 2.0 * np.pi, size)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)

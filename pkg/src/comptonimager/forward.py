"""Noise-free forward model of a two-interaction event plus measurement-noise densities.

Densities come in two flavours: vectorized ``log_*`` helpers used by the
samplers, and scalar wrappers returning linear values. The first-interaction
direction prior is handled by :class:`DirectionPriorLut`.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import erf, log_ndtr, ndtr

from . import physics, sphere
from .geometry import DetectorArray, SphereModel, _cap_trace, _dmax_batch

Kind = Literal["A", "CS"]
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class NoiseScales:
    sigma_xy: float = 0.43
    sigma_z: float = 0.72
    sigma_E: float = 0.029

    def __post_init__(self):
        if min(self.sigma_xy, self.sigma_z, self.sigma_E) <= 0:
            raise ValueError("noise scales must be strictly positive")

    def position_sigmas(self) -> np.ndarray:
        return np.array([self.sigma_xy, self.sigma_xy, self.sigma_z])


@dataclass(frozen=True)
class Interaction:
    position: tuple
    deposit: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "deposit", float(self.deposit))


@dataclass(frozen=True)
class Event:
    first: Interaction
    second: Interaction
    second_kind: Kind

    def __post_init__(self):
        if self.second_kind not in ("A", "CS"):
            raise ValueError("second_kind must be 'A' or 'CS'")


@dataclass(frozen=True)
class NoisyEvent:
    first: Interaction
    second: Interaction
    id: int = 0
    truth: Optional[Event] = None
    source: object = None  # int source index, "outlier", or None when unknown

    def as_row(self) -> np.ndarray:
        return np.array([*self.first.position, self.first.deposit,
                         *self.second.position, self.second.deposit])


def events_to_array(events) -> np.ndarray:
    """Stack events into rows ``[x1, y1, z1, E1, x2, y2, z2, E2]``."""
    if len(events) == 0:
        return np.empty((0, 8))
    return np.array([[*e.first.position, e.first.deposit, *e.second.position, e.second.deposit]
                     for e in events])


# ---------------------------------------------------------------------------
# vectorized stage log-densities


def log_path_density(mu, d, dmax):
    """Truncated exponential law of the in-sensor path ``d`` on (0, dmax)."""
    mu, d, dmax = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, d, dmax)))
    ok = (d > 0) & (d < dmax)
    out = np.full(d.shape, -np.inf)
    if np.any(ok):
        m, dd, dm = mu[ok], d[ok], dmax[ok]
        out[ok] = np.log(m) - m * dd - np.log(-np.expm1(-m * dm))
    return out


def scatter_angle_log_norm(omega, a):
    """log of the mass the angular Gaussian keeps inside [0, pi]."""
    sa = np.sqrt(a)
    return np.log(0.5 * (erf(sa * (np.pi - omega)) + erf(sa * omega)))


def log_scatter_direction(cos_psi, omega, a):
    """Log density per steradian of the second direction about the first.

    Gaussian in the opening angle psi around the Compton angle omega, divided
    by the ring circumference 2 pi sin(psi) and by the mass kept in [0, pi],
    so it integrates to one over the sphere.
    """
    cos_psi = np.clip(np.asarray(cos_psi, dtype=float), -1.0, 1.0)
    psi = np.arccos(cos_psi)
    sin_psi = np.sqrt(1.0 - cos_psi**2)
    with np.errstate(divide="ignore"):
        return (0.5 * np.log(a / np.pi) - a * (omega - psi) ** 2 - np.log(2.0 * np.pi * sin_psi)
                - scatter_angle_log_norm(omega, a))


def log_truncnorm_box(x, mean, sigma, lo, hi):
    """Sum over the last axis of truncated-normal log densities on [lo, hi]."""
    x, mean, sigma, lo, hi = (np.asarray(v, dtype=float) for v in (x, mean, sigma, lo, hi))
    z = (x - mean) / sigma
    mass = ndtr((hi - mean) / sigma) - ndtr((lo - mean) / sigma)
    with np.errstate(divide="ignore"):
        val = -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sigma) - np.log(mass)
    inside = (x >= lo) & (x <= hi)
    val = np.where(inside, val, -np.inf)
    return val.sum(axis=-1)


def log_energy_noise(true_E, obs_E, sigma_E):
    true_E, obs_E, sigma_E = (np.asarray(v, dtype=float) for v in (true_E, obs_E, sigma_E))
    z = (obs_E - true_E) / sigma_E
    val = -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sigma_E) - log_ndtr(true_E / sigma_E)
    return np.where(obs_E >= 0, val, -np.inf)


def log_absorb_energy(E2, remaining, a_E):
    """Gaussian stand-in for the point mass E2 = remaining energy, width 1/sqrt(a_E)."""
    s = 1.0 / np.sqrt(a_E)
    z = (np.asarray(E2) - np.asarray(remaining)) / s
    return -0.5 * z * z - 0.5 * _LOG_2PI - np.log(s)


# ---------------------------------------------------------------------------
# scalar stage densities


def path_density(array: DetectorArray, table: physics.AttenuationTable, origin, target, E: float) -> float:
    """Density (1/mm) of the in-sensor distance from ``origin`` to ``target`` at energy ``E``.

    Returns 0 when the target is unreachable (d = 0 or d >= d_max).
    """
    origin = np.asarray(origin, dtype=float)
    target = np.asarray(target, dtype=float)
    direction = sphere.normalize(target - origin)
    d = array.effective_distance(origin, target)
    dmax = array.max_effective_distance(origin, direction)
    mu = table.mu("interaction", E)
    return float(np.exp(log_path_density(mu, d, dmax)))


def path_density_from_lengths(mu: float, d, dmax):
    return np.exp(log_path_density(mu, d, dmax))


def scatter_direction_density(theta1, theta2, E0: float, E1: float, a: float = 400.0):
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    omega = physics.compton_angle(E0, E1)
    out = np.exp(log_scatter_direction(np.sum(theta1 * theta2, axis=-1), omega, a))
    return float(out) if np.ndim(out) == 0 else out


def position_noise_density(array: DetectorArray, true_p, obs_p, scales: NoiseScales) -> float:
    """Truncated-Gaussian density (1/mm^3) of an observed position, bounded by the true sensor."""
    true_p = np.asarray(true_p, dtype=float)
    idx = array.containing_sensor(true_p)
    if idx is None:
        raise ValueError("true position lies outside every sensor")
    val = log_truncnorm_box(obs_p, true_p, scales.position_sigmas(), array.lo[idx], array.hi[idx])
    return float(np.exp(val))


def energy_noise_density(true_E: float, obs_E: float, sigma_E: float) -> float:
    if not true_E > 0:
        raise ValueError("true deposit must be positive")
    return float(np.exp(log_energy_noise(true_E, obs_E, sigma_E)))


# ---------------------------------------------------------------------------
# first-interaction direction: rejection sampler


class SamplerFailure(RuntimeError):
    """Rejection sampler exhausted its proposal budget."""


_BATCHES = (64, 256, 1024, 4096, 16384, 65536)


def _cap_proposals(array, r0, axis, alpha, u):
    e1, e2 = sphere.tangent_basis(axis)
    return _cap_trace(array.lo, array.hi, np.asarray(r0, dtype=float), axis, e1, e2, np.cos(alpha),
                      np.ascontiguousarray(u))


def sample_first_interaction(array: DetectorArray, table: physics.AttenuationTable, r0, E0: float,
                             rng: np.random.Generator, max_proposals: int = 10**7):
    """Draw (direction, in-sensor depth) of the first interaction by rejection.

    Directions are proposed uniformly in the smallest cone around the array;
    a free path ``-log(1 - v) / mu`` is drawn for each and the pair is kept
    when the path ends before the ray leaves the material.
    """
    r0 = np.asarray(r0, dtype=float)
    axis, alpha = array.bounding_cone(r0)
    mu = table.mu("interaction", E0)
    used = 0
    b = 0
    while used < max_proposals:
        m = min(_BATCHES[min(b, len(_BATCHES) - 1)], max_proposals - used)
        b += 1
        u = rng.random((m, 3))
        dirs, dmax = _cap_proposals(array, r0, axis, alpha, u)
        depth = -np.log1p(-u[:, 2]) / mu
        hit = np.flatnonzero(depth < dmax)
        if hit.size:
            k = hit[0]
            return dirs[k], float(depth[k]), used + k + 1
        used += m
    raise SamplerFailure(f"no accepted direction after {max_proposals} proposals")


def sample_first_direction(array: DetectorArray, r0, E0: float, rng: np.random.Generator,
                           table: physics.AttenuationTable | None = None, max_proposals: int = 10**7):
    table = table or physics.load_lyso()
    return sample_first_interaction(array, table, r0, E0, rng, max_proposals)[0]


def direction_normalizer(array: DetectorArray, table: physics.AttenuationTable, r0, E0: float,
                         n_points: int = 200_000) -> float:
    """Integral over directions of ``1 - exp(-mu d_max)`` by a Fibonacci-cap rule."""
    r0 = np.asarray(r0, dtype=float)
    axis, alpha = array.bounding_cone(r0)
    dirs = sphere.fibonacci_cap(n_points, axis, alpha)
    dmax = _dmax_batch(array.lo, array.hi, np.ascontiguousarray(r0[None, :]), dirs)
    mu = table.mu("interaction", E0)
    cap = 2.0 * np.pi * (1.0 - np.cos(alpha))
    return float(cap * np.mean(-np.expm1(-mu * dmax)))


# ---------------------------------------------------------------------------
# direction prior look-up table


@dataclass
class NodeKde:
    """Binned spherical KDE on a gnomonic grid around ``axis``; values are per steradian."""

    axis: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    extent: float
    grid: np.ndarray
    bandwidth: float

    def __call__(self, dirs):
        return _kde_eval(self.grid, self.extent, self.axis, self.e1, self.e2, dirs)


def _kde_eval(grid, extent, axis, e1, e2, dirs):
    dirs = np.atleast_2d(dirs)
    c = dirs @ axis
    out = np.zeros(dirs.shape[0])
    front = c > 1e-9
    if not np.any(front):
        return out
    g = grid.shape[0]
    u = (dirs[front] @ e1) / c[front]
    w = (dirs[front] @ e2) / c[front]
    # pixel-center coordinates
    pu = (u + extent) / (2 * extent) * g - 0.5
    pw = (w + extent) / (2 * extent) * g - 0.5
    vals = ndimage.map_coordinates(grid, [pu, pw], order=1, mode="constant", cval=0.0)
    out[front] = np.maximum(vals, 0.0)
    return out


def _accepted_samples(array, mu, r0, n_samples, rng, max_proposals=10**8):
    """Run the rejection sampler until ``n_samples`` directions are accepted.

    Also returns the Rao-Blackwellized normalizer estimate (cap solid angle
    times the mean acceptance probability over every proposal).
    """
    axis, alpha = array.bounding_cone(r0)
    kept = []
    n_kept = 0
    total_p = 0.0
    used = 0
    while n_kept < n_samples:
        m = 65536
        u = rng.random((m, 3))
        dirs, dmax = _cap_proposals(array, r0, axis, alpha, u)
        total_p += float(np.sum(-np.expm1(-mu * dmax)))
        acc = -np.log1p(-u[:, 2]) / mu < dmax
        kept.append(dirs[acc])
        n_kept += int(acc.sum())
        used += m
        if used >= max_proposals:
            raise SamplerFailure("direction LUT node produced too few accepted samples")
    cap = 2.0 * np.pi * (1.0 - np.cos(alpha))
    return np.concatenate(kept)[:n_samples], cap * total_p / used, axis, alpha


def build_node_kde(array: DetectorArray, mu: float, r0, n_samples: int, rng: np.random.Generator,
                   grid_size: int = 64, bandwidth: float | None = None):
    """Accepted-sample KDE of the first direction seen from ``r0``; returns (NodeKde, Z)."""
    samples, z, axis, alpha = _accepted_samples(array, mu, r0, n_samples, rng)
    e1, e2 = sphere.tangent_basis(axis)
    c = samples @ axis
    u = samples @ e1 / c
    w = samples @ e2 / c
    if bandwidth is None:
        # Silverman-style plug-in for a 2-D kernel: sigma * n^(-1/6)
        spread = np.sqrt(0.5 * (u.var() + w.var()))
        bandwidth = float(spread * len(samples) ** (-1.0 / 6.0))
    extent = float(np.tan(min(alpha + 4.0 * bandwidth, 1.4)))
    edges = np.linspace(-extent, extent, grid_size + 1)
    hist, _, _ = np.histogram2d(u, w, bins=[edges, edges])
    cell = (2 * extent / grid_size) ** 2
    dens_uw = ndimage.gaussian_filter(hist / (len(samples) * cell), sigma=bandwidth * grid_size / (2 * extent),
                                      mode="constant", truncate=4.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    uu, ww = np.meshgrid(centers, centers, indexing="ij")
    grid = dens_uw * (1.0 + uu**2 + ww**2) ** 1.5
    return NodeKde(axis, e1, e2, extent, grid, bandwidth), z


def _lut_key(array, table, E0, radius, n_nodes, n_samples, grid_size, seed):
    h = hashlib.sha256()
    h.update(array.digest.encode())
    h.update(np.asarray(table.mu_photo).tobytes() + np.asarray(table.mu_compton).tobytes())
    h.update(np.array([E0, radius, n_nodes, n_samples, grid_size, seed], dtype="<f8").tobytes())
    return h.hexdigest()[:20]


def lut_cache_dir() -> Path:
    return Path(os.environ.get("COMPTON_LUT_DIR", Path.home() / ".cache" / "comptonimager"))


@dataclass
class DirectionPriorLut:
    """Per-node normalizers and KDEs of the first-interaction direction prior.

    Nodes are source positions on the sphere. A query at ``r0`` uses the
    nearest node (geodesic), rotating the queried direction by the rotation
    that carries ``r0`` onto that node.
    """

    E0: float
    mu: float
    radius: float
    nodes: np.ndarray
    log_z: np.ndarray
    grids: np.ndarray
    extents: np.ndarray
    bandwidths: np.ndarray
    n_samples: int
    key: str = ""
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self._tree = cKDTree(self.nodes)

    def nearest(self, r0) -> np.ndarray:
        u = sphere.normalize(np.atleast_2d(np.asarray(r0, dtype=float)))
        return self._tree.query(u)[1]

    def log_normalizer(self, r0):
        """log Z at the nearest node; vectorized over rows of ``r0``."""
        idx = self.nearest(r0)
        out = self.log_z[idx]
        return float(out[0]) if np.ndim(r0) == 1 else out

    def node_kde(self, i: int) -> NodeKde:
        axis = -self.nodes[i]
        e1, e2 = sphere.tangent_basis(axis)
        return NodeKde(axis, e1, e2, float(self.extents[i]), self.grids[i].astype(float),
                       float(self.bandwidths[i]))

    def save(self, path) -> None:
        np.savez_compressed(path, E0=self.E0, mu=self.mu, radius=self.radius, nodes=self.nodes,
                            log_z=self.log_z, grids=self.grids, extents=self.extents,
                            bandwidths=self.bandwidths, n_samples=self.n_samples, key=self.key)

    @classmethod
    def load(cls, path) -> "DirectionPriorLut":
        with np.load(path) as f:
            return cls(float(f["E0"]), float(f["mu"]), float(f["radius"]), f["nodes"], f["log_z"],
                       f["grids"], f["extents"], f["bandwidths"], int(f["n_samples"]), str(f["key"]))


def _node_seed(seed: int, i: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, i]))


def build_direction_lut(array: DetectorArray, E0: float, sphere_model: SphereModel,
                        n_nodes: int = 2563, n_samples: int = 20_000,
                        table: physics.AttenuationTable | None = None, seed: int = 0,
                        grid_size: int = 64, cache: bool = True, progress=None) -> DirectionPriorLut:
    """Tabulate the direction prior over ``n_nodes`` Fibonacci source positions.

    Each node gets its own counter-based RNG stream, so nodes can be built in
    any order. Results are cached as ``.npz`` under ``$COMPTON_LUT_DIR``.
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    table = table or physics.load_lyso()
    key = _lut_key(array, table, E0, sphere_model.radius, n_nodes, n_samples, grid_size, seed)
    path = lut_cache_dir() / f"lut_{key}.npz"
    if cache and path.exists():
        return DirectionPriorLut.load(path)
    mu = table.mu("interaction", E0)
    nodes = sphere.fibonacci_sphere(n_nodes)
    grids = np.empty((n_nodes, grid_size, grid_size), dtype=np.float32)
    log_z = np.empty(n_nodes)
    extents = np.empty(n_nodes)
    bws = np.empty(n_nodes)
    for i, node in enumerate(nodes):
        kde, z = build_node_kde(array, mu, node * sphere_model.radius, n_samples, _node_seed(seed, i),
                                grid_size=grid_size)
        # the node frame must match DirectionPriorLut.node_kde
        assert np.allclose(kde.axis, -node, atol=1e-9)
        grids[i] = kde.grid
        log_z[i] = np.log(z)
        extents[i] = kde.extent
        bws[i] = kde.bandwidth
        if progress is not None:
            progress(i + 1, n_nodes)
    lut = DirectionPriorLut(E0, mu, sphere_model.radius, nodes, log_z, grids, extents, bws, n_samples, key)
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        lut.save(tmp)
        os.replace(tmp, path)
    return lut


def direction_prior_density(lut: DirectionPriorLut, r0, theta1, method: str = "kde",
                            array: DetectorArray | None = None):
    """Density per steradian of the first direction ``theta1`` seen from ``r0``.

    ``method="kde"`` reads the nearest node's KDE after rotating ``theta1``
    into that node's frame. ``method="exact"`` evaluates the Beer-law
    numerator ``1 - exp(-mu d_max)`` directly (needs ``array``) and divides
    by the node normalizer.
    """
    r0 = np.asarray(r0, dtype=float)
    theta1 = np.asarray(theta1, dtype=float)
    if method == "exact":
        if array is None:
            raise ValueError("exact evaluation needs the detector array")
        dmax = array.max_effective_distance(r0, np.atleast_2d(theta1))
        out = -np.expm1(-lut.mu * dmax) * np.exp(-lut.log_normalizer(r0))
    elif method == "kde":
        i = int(lut.nearest(r0)[0])
        rot = sphere.rotation_between(sphere.normalize(r0), lut.nodes[i])
        out = lut.node_kde(i)(np.atleast_2d(theta1) @ rot.T)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(out[0]) if theta1.ndim == 1 else out


# ---------------------------------------------------------------------------
# full event likelihood


class FreshNormalizer:
    """Stand-in for a LUT: computes the direction normalizer per source position on demand."""

    def __init__(self, array, table, E0, n_points=200_000):
        self.array, self.table, self.E0, self.n_points = array, table, E0, n_points
        self._memo = {}

    def log_normalizer(self, r0):
        r0 = np.atleast_2d(np.asarray(r0, dtype=float))
        out = np.empty(len(r0))
        for k, p in enumerate(r0):
            key = tuple(np.round(p, 9))
            if key not in self._memo:
                self._memo[key] = np.log(direction_normalizer(self.array, self.table, p, self.E0,
                                                              self.n_points))
            out[k] = self._memo[key]
        return out if len(out) > 1 else float(out[0])


def event_log_likelihood(array: DetectorArray, table: physics.AttenuationTable, lut, r0, E0: float,
                         event: Event, a: float = 400.0, a_E: float = 400.0,
                         jacobian: bool = False) -> float:
    """Log density of a noise-free event given a source at ``r0`` (mm).

    Sum of the stage terms: first direction, first path, Compton deposit,
    second direction, second path, and the second deposit (widened point mass
    for absorption, Klein-Nishina at the scattered energy otherwise). With
    ``jacobian=True`` the 1/distance^2 factors turning (direction, path)
    densities into densities over positions are included.

    ``lut`` is anything with ``log_normalizer(r0)``; pass ``None`` to
    integrate the normalizer on the fly.
    """
    r0 = np.asarray(r0, dtype=float)
    r1 = np.asarray(event.first.position)
    r2 = np.asarray(event.second.position)
    E1, E2 = event.first.deposit, event.second.deposit
    if array.containing_sensor(r1) is None or array.containing_sensor(r2) is None:
        return -np.inf
    if not (0 < E1 < physics.max_deposit(E0)):
        return -np.inf
    if lut is None:
        lut = FreshNormalizer(array, table, E0)
    E_mid = E0 - E1

    v1 = r1 - r0
    t1 = np.linalg.norm(v1)
    theta1 = v1 / t1
    dmax1 = array.max_effective_distance(r0, theta1)
    d1 = array.effective_distance(r0, r1)
    mu0 = table.mu("interaction", E0)
    if dmax1 <= 0:
        return -np.inf
    total = np.log(-np.expm1(-mu0 * dmax1)) - lut.log_normalizer(r0)
    total += log_path_density(mu0, d1, dmax1)
    total += physics.kn_log_density(E0, E1)

    v2 = r2 - r1
    t2 = np.linalg.norm(v2)
    if t2 == 0:
        return -np.inf
    theta2 = v2 / t2
    omega = physics.compton_angle(E0, E1)
    total += log_scatter_direction(theta1 @ theta2, omega, a)
    mu1 = table.mu("interaction", E_mid)
    total += log_path_density(mu1, array.effective_distance(r1, r2), array.max_effective_distance(r1, theta2))

    if event.second_kind == "A":
        total += log_absorb_energy(E2, E_mid, a_E)
    else:
        total += physics.kn_log_density(E_mid, E2)
    if jacobian:
        total -= 2.0 * np.log(t1) + 2.0 * np.log(t2)
    return float(total)

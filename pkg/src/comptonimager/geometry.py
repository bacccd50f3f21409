"""Sensor boxes, ray traversal and in-material path lengths.

Sensors are closed axis-aligned boxes. Everything between them is void.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

EPS = 1e-12


@dataclass(frozen=True)
class Sensor:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        h = tuple(float(v) for v in self.half_extents)
        if len(c) != 3 or len(h) != 3:
            raise ValueError("center and half_extents need three components")
        if min(h) <= 0:
            raise ValueError("half_extents must be strictly positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class SphereModel:
    radius: float = 300.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _slab(lo, hi, o, d):
    """Entry/exit parameters of the line o + t d through one box (t unrestricted)."""
    t0 = -np.inf
    t1 = np.inf
    for ax in range(3):
        if d[ax] == 0.0:
            if o[ax] < lo[ax] or o[ax] > hi[ax]:
                return np.inf, -np.inf
        else:
            inv = 1.0 / d[ax]
            a = (lo[ax] - o[ax]) * inv
            b = (hi[ax] - o[ax]) * inv
            if a > b:
                a, b = b, a
            if a > t0:
                t0 = a
            if b < t1:
                t1 = b
    return t0, t1


@numba.njit(cache=True)
def _chord_lengths(lo, hi, o, d, tmin, tmax):
    """Total in-sensor length of o + t d for t in [tmin, tmax]."""
    total = 0.0
    for i in range(lo.shape[0]):
        t0, t1 = _slab(lo[i], hi[i], o, d)
        if t0 < tmin:
            t0 = tmin
        if t1 > tmax:
            t1 = tmax
        if t1 - t0 > EPS:
            total += t1 - t0
    return total


@numba.njit(cache=True)
def _segments(lo, hi, o, d):
    n = lo.shape[0]
    tin = np.empty(n)
    tout = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        t0, t1 = _slab(lo[i], hi[i], o, d)
        if t0 < 0.0:
            t0 = 0.0
        if t1 - t0 > EPS:
            tin[m] = t0
            tout[m] = t1
            idx[m] = i
            m += 1
    order = np.argsort(tin[:m], kind="mergesort")
    return tin[:m][order], tout[:m][order], idx[:m][order]


@numba.njit(cache=True)
def _dmax_batch(lo, hi, origins, dirs):
    n = dirs.shape[0]
    out = np.empty(n)
    single = origins.shape[0] == 1
    for k in range(n):
        o = origins[0] if single else origins[k]
        out[k] = _chord_lengths(lo, hi, o, dirs[k], 0.0, np.inf)
    return out


@numba.njit(cache=True)
def _cap_trace(lo, hi, origin, axis, e1, e2, cos_alpha, u):
    """Directions uniform in a cap (from uniforms ``u[:, :2]``) and their d_max.

    Rays that miss the union bounding box skip the per-sensor tests.
    """
    n = u.shape[0]
    dirs = np.empty((n, 3))
    dmax = np.zeros(n)
    blo = np.empty(3)
    bhi = np.empty(3)
    for ax in range(3):
        blo[ax] = lo[:, ax].min()
        bhi[ax] = hi[:, ax].max()
    d = np.empty(3)
    for k in range(n):
        cos_t = 1.0 - u[k, 0] * (1.0 - cos_alpha)
        sin_t = np.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        phi = 2.0 * np.pi * u[k, 1]
        cp = np.cos(phi)
        sp = np.sin(phi)
        norm = 0.0
        for ax in range(3):
            d[ax] = cos_t * axis[ax] + sin_t * (cp * e1[ax] + sp * e2[ax])
            norm += d[ax] * d[ax]
        norm = np.sqrt(norm)
        for ax in range(3):
            d[ax] /= norm
            dirs[k, ax] = d[ax]
        t0, t1 = _slab(blo, bhi, origin, d)
        if t1 < 0.0 or t1 - t0 <= EPS:
            continue
        dmax[k] = _chord_lengths(lo, hi, origin, d, 0.0, np.inf)
    return dirs, dmax


@numba.njit(cache=True)
def _effective_batch(lo, hi, a, b):
    n = a.shape[0]
    out = np.empty(n)
    d = np.empty(3)
    for k in range(n):
        length = 0.0
        for ax in range(3):
            d[ax] = b[k, ax] - a[k, ax]
            length += d[ax] * d[ax]
        length = np.sqrt(length)
        if length == 0.0:
            out[k] = 0.0
            continue
        for ax in range(3):
            d[ax] /= length
        out[k] = _chord_lengths(lo, hi, a[k], d, 0.0, length)
    return out


@numba.njit(cache=True)
def _containing(lo, hi, pts):
    n = pts.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for i in range(lo.shape[0]):
            inside = True
            for ax in range(3):
                if pts[k, ax] < lo[i, ax] or pts[k, ax] > hi[i, ax]:
                    inside = False
                    break
            if inside:
                out[k] = i
                break
    return out


@numba.njit(cache=True)
def _point_at_depth(lo, hi, o, d, depth):
    """Point where the cumulative in-sensor length along o + t d (t >= 0) reaches ``depth``.

    Returns (t, sensor index); index -1 when the ray escapes first.
    """
    tin, tout, idx = _segments(lo, hi, o, d)
    acc = 0.0
    for s in range(tin.shape[0]):
        seg = tout[s] - tin[s]
        if acc + seg >= depth:
            return tin[s] + (depth - acc), idx[s]
        acc += seg
    return np.inf, -1


# ---------------------------------------------------------------------------


class DetectorArray:
    """An ordered set of non-overlapping sensor boxes (mm)."""

    def __init__(self, sensors: Sequence[Sensor]):
        sensors = tuple(s if isinstance(s, Sensor) else Sensor(**s) for s in sensors)
        if not sensors:
            raise ValueError("a detector array needs at least one sensor")
        c = np.array([s.center for s in sensors])
        h = np.array([s.half_extents for s in sensors])
        self.sensors = sensors
        self.lo = np.ascontiguousarray(c - h)
        self.hi = np.ascontiguousarray(c + h)
        for arr in (self.lo, self.hi):
            arr.setflags(write=False)
        self._check_disjoint()
        self._cones = {}

    def _check_disjoint(self):
        lo, hi = self.lo, self.hi
        for i in range(len(lo)):
            overlap = np.all((np.minimum(hi[i], hi[i + 1:]) - np.maximum(lo[i], lo[i + 1:])) > EPS, axis=1)
            if np.any(overlap):
                j = i + 1 + int(np.argmax(overlap))
                raise ValueError(f"sensors {i} and {j} overlap")

    @classmethod
    def bars_4x7(cls) -> "DetectorArray":
        """4 x 7 grid of 3 x 3 x 50 mm bars with the long side along z."""
        sensors = [
            Sensor((-19.5 + 13.0 * i, -33.0 + 11.0 * j, 0.0), (1.5, 1.5, 25.0))
            for i in range(4)
            for j in range(7)
        ]
        return cls(sensors)

    @classmethod
    def from_preset(cls, name: str) -> "DetectorArray":
        presets = {"bars-4x7": cls.bars_4x7}
        if name not in presets:
            raise ValueError(f"unknown detector preset {name!r}")
        return presets[name]()

    @classmethod
    def from_json(cls, path_or_text) -> "DetectorArray":
        """Layout file: list of ``{"center": [...], "half_extents": [...]}``."""
        text = str(path_or_text)
        if not text.lstrip().startswith("["):
            text = Path(path_or_text).read_text()
        items = json.loads(text)
        if not isinstance(items, list):
            raise ValueError("detector layout must be a JSON list")
        return cls([Sensor(tuple(it["center"]), tuple(it["half_extents"])) for it in items])

    def to_json(self) -> str:
        return json.dumps([{"center": list(s.center), "half_extents": list(s.half_extents)}
                           for s in self.sensors])

    @cached_property
    def digest(self) -> str:
        data = np.concatenate([self.lo.ravel(), self.hi.ravel()]).astype("<f8").tobytes()
        return hashlib.sha256(data).hexdigest()[:16]

    def __len__(self):
        return len(self.sensors)

    def __eq__(self, other):
        return isinstance(other, DetectorArray) and np.array_equal(self.lo, other.lo) \
            and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash(self.digest)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo.min(axis=0), self.hi.max(axis=0)

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (lo + hi)

    def bounding_cone(self, origin) -> tuple[np.ndarray, float]:
        """Axis and half-angle of a cone from ``origin`` containing every sensor.

        The axis points at the bounding-box center; the half-angle is the
        widest angle to any of the eight box corners.
        """
        origin = np.asarray(origin, dtype=float)
        key = origin.tobytes()
        hit = self._cones.get(key)
        if hit is None:
            hit = self._cones[key] = self._bounding_cone(origin)
        return hit

    def _bounding_cone(self, origin):
        lo, hi = self.bounds
        axis = self.center - origin
        dist = np.linalg.norm(axis)
        if dist == 0 or self.containing_sensor(origin) is not None:
            raise ValueError("origin must lie outside the array")
        axis = axis / dist
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                            for z in (lo[2], hi[2])]) - origin
        cos = corners @ axis / np.linalg.norm(corners, axis=1)
        if np.any(cos <= 0):
            return axis, np.pi  # origin too close: fall back to the full sphere
        return axis, float(np.arccos(np.clip(cos.min(), -1.0, 1.0)))

    # -- queries ------------------------------------------------------------

    def ray_segments(self, ray: Ray):
        """In-sensor segments ``(t_enter, t_exit, sensor)`` along ``ray`` for t >= 0."""
        tin, tout, idx = _segments(self.lo, self.hi, ray.origin, ray.direction)
        return [(float(a), float(b), int(i)) for a, b, i in zip(tin, tout, idx)]

    def effective_distance(self, a, b):
        """In-sensor length of the segment [a, b]. Accepts (3,) or (n, 3) inputs."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        a2, b2 = np.broadcast_arrays(np.atleast_2d(a), np.atleast_2d(b))
        out = _effective_batch(self.lo, self.hi, np.ascontiguousarray(a2), np.ascontiguousarray(b2))
        return float(out[0]) if a.ndim == 1 and b.ndim == 1 else out

    def max_effective_distance(self, origin, direction):
        """In-sensor length of the whole forward ray. Accepts batched directions."""
        o = np.ascontiguousarray(np.atleast_2d(np.asarray(origin, dtype=float)))
        d = np.asarray(direction, dtype=float)
        out = _dmax_batch(self.lo, self.hi, o, np.ascontiguousarray(np.atleast_2d(d)))
        return float(out[0]) if d.ndim == 1 else out

    def containing_sensor(self, p):
        """Index of the (lowest-numbered) closed sensor box containing ``p``, else None."""
        p = np.asarray(p, dtype=float)
        idx = _containing(self.lo, self.hi, np.ascontiguousarray(np.atleast_2d(p)))
        if p.ndim == 1:
            return None if idx[0] < 0 else int(idx[0])
        return idx

    def point_at_depth(self, origin, direction, depth: float):
        """Walk ``depth`` mm of sensor material along the ray; (point, sensor) or (None, None)."""
        o = np.asarray(origin, dtype=float)
        d = np.asarray(direction, dtype=float)
        t, i = _point_at_depth(self.lo, self.hi, o, d, float(depth))
        if i < 0:
            return None, None
        return o + t * d, int(i)


def geodesic_distance(sphere: SphereModel, u, v):
    """Great-circle distance in mm between unit vectors (broadcasts)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    # atan2 form keeps full precision for nearly equal and nearly antipodal pairs
    sin = np.linalg.norm(np.cross(u, v), axis=-1)
    return sphere.radius * np.arctan2(sin, np.sum(u * v, axis=-1))

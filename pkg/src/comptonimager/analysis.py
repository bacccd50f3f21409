"""Back-projection baseline, spherical statistics, credible coverage and chain de-entangling."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from . import physics, sphere
from .geometry import SphereModel, geodesic_distance
from .validation import check_events_array, check_unit_vectors


class UndefinedMeanError(ValueError):
    pass


class DegenerateSeparationError(ValueError):
    pass


@dataclass
class SphereGrid:
    """Equal-area Fibonacci pixelization of the unit sphere."""

    n_pixels: int = 10242
    pixels: np.ndarray = field(init=False, repr=False)
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.pixels = sphere.fibonacci_sphere(self.n_pixels)
        self._tree = cKDTree(self.pixels)

    @property
    def pixel_area(self) -> float:
        return 4.0 * np.pi / self.n_pixels

    @property
    def spacing(self) -> float:
        """Typical angular distance between neighbouring pixels (rad)."""
        return float(np.sqrt(self.pixel_area))

    def nearest(self, u):
        return self._tree.query(np.atleast_2d(u))[1]

    def neighbours(self, radius: float):
        """Pixel lists within chordal distance ``radius`` of each pixel (self included)."""
        return self._tree.query_ball_point(self.pixels, radius)

    def empty_image(self) -> np.ndarray:
        return np.zeros(self.n_pixels)


# ---------------------------------------------------------------------------
# back-projection


def cone_geometry(X, E0: float):
    """Apex, axis and half-angle of each event's Compton cone; invalid cones flagged.

    The axis points from the second observed interaction to the first, the
    sense in which the source lies on the cone.
    """
    X = check_events_array(X)
    apex = X[:, 0:3]
    axis = X[:, 0:3] - X[:, 4:7]
    norm = np.linalg.norm(axis, axis=1)
    E1 = X[:, 3]
    valid = (E1 > 0) & (E1 < physics.max_deposit(E0)) & (norm > 0)
    half = np.full(len(X), np.nan)
    half[valid] = physics.compton_angle(E0, E1[valid])
    axis = axis / np.where(norm > 0, norm, 1.0)[:, None]
    return apex, axis, half, valid


@dataclass
class BackProjection:
    image: np.ndarray
    n_skipped: int
    grid: SphereGrid


def back_project(events, E0: float, sphere_model: SphereModel, grid: SphereGrid | None = None,
                 width: float = 0.05) -> BackProjection:
    """Sum of Gaussian ridges exp(-r^2 / 2 s^2) in the angular residual to each cone.

    Events are accumulated in a canonical (sorted) order so the image does
    not depend on the order they were supplied in.
    """
    grid = grid or SphereGrid()
    X = check_events_array(events)
    image = grid.empty_image()
    if len(X) == 0:
        return BackProjection(image, 0, grid)
    X = X[np.lexsort(X.T[::-1])]
    apex, axis, half, valid = cone_geometry(X, E0)
    points = grid.pixels * sphere_model.radius
    for n in np.flatnonzero(valid):
        v = points - apex[n]
        cos = (v @ axis[n]) / np.linalg.norm(v, axis=1)
        res = np.arccos(np.clip(cos, -1.0, 1.0)) - half[n]
        image += np.exp(-0.5 * (res / width) ** 2)
    return BackProjection(image, int((~valid).sum()), grid)


def _farthest_point(grid, image, chosen, top_fraction=0.01):
    n_top = max(1, int(np.ceil(top_fraction * grid.n_pixels)))
    top = np.argsort(-image, kind="stable")[:n_top]
    if not chosen:
        return int(top[0])
    cands = grid.pixels[top]
    dist = np.min(np.arccos(np.clip(cands @ grid.pixels[chosen].T, -1, 1)), axis=1)
    return int(top[int(np.argmax(dist))])


def bp_modes(image, K: int, grid: SphereGrid | None = None, min_separation_deg: float = 10.0,
             dilation_radius: float | None = None) -> np.ndarray:
    """K intensity peaks of a back-projection image as unit vectors.

    Local maxima are pixels equal to the grey-level dilation of the image
    (maximum over a small disc). Peaks are taken by decreasing intensity,
    skipping any closer than ``min_separation_deg`` to one already chosen;
    shortfalls are filled by farthest-point selection among the top pixels.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    image = np.asarray(image, dtype=float)
    grid = grid or SphereGrid(len(image))
    if len(image) != grid.n_pixels:
        raise ValueError("image size does not match the grid")
    if K == 1:
        return grid.pixels[[int(np.argmax(image))]]
    radius = dilation_radius or 1.5 * grid.spacing
    neigh = grid.neighbours(radius)
    dilated = np.array([image[nb].max() for nb in neigh])
    maxima = np.flatnonzero(image >= dilated)
    maxima = maxima[np.argsort(-image[maxima], kind="stable")]
    min_sep = np.radians(min_separation_deg)
    chosen: list[int] = []
    for p in maxima:
        if all(np.arccos(np.clip(grid.pixels[p] @ grid.pixels[q], -1, 1)) >= min_sep for q in chosen):
            chosen.append(int(p))
        if len(chosen) == K:
            break
    while len(chosen) < K:
        chosen.append(_farthest_point(grid, image, chosen))
    return grid.pixels[chosen]


class BackProjector(BaseEstimator, TransformerMixin):
    """``transform`` maps an event array to a back-projection image over a Fibonacci grid."""

    def __init__(self, E0=0.6617, radius=300.0, n_pixels=10242, width=0.05):
        self.E0 = E0
        self.radius = radius
        self.n_pixels = n_pixels
        self.width = width

    def fit(self, X=None, y=None):
        self.grid_ = SphereGrid(self.n_pixels)
        return self

    def transform(self, X):
        if not hasattr(self, "grid_"):
            self.fit()
        bp = back_project(X, self.E0, SphereModel(self.radius), self.grid_, self.width)
        self.n_skipped_ = bp.n_skipped
        return bp.image

    def modes(self, X, K=1):
        return bp_modes(self.transform(X), K, self.grid_)


# ---------------------------------------------------------------------------
# spherical statistics


def spherical_mean(samples, sphere_model: SphereModel | None = None) -> np.ndarray:
    """Normalized vector resultant scaled to the sphere radius."""
    samples = check_unit_vectors(samples, tol=1e-6)
    resultant = samples.sum(axis=0)
    if np.linalg.norm(resultant) / len(samples) <= 1e-9:
        raise UndefinedMeanError("samples have (near) zero resultant; mean direction undefined")
    radius = 1.0 if sphere_model is None else sphere_model.radius
    return radius * resultant / np.linalg.norm(resultant)


@dataclass(frozen=True)
class BoxStats:
    q0: float
    q1: float
    median: float
    q3: float
    q4: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def as_dict(self):
        return {"Q0": self.q0, "Q1": self.q1, "median": self.median, "Q3": self.q3, "Q4": self.q4,
                "IQR": self.iqr}


def box_stats(distances) -> BoxStats:
    """Quartiles (linear interpolation) with whiskers capped at 1.5 IQR."""
    d = np.asarray(distances, dtype=float)
    if d.size < 4:
        raise ValueError("box stats need at least 4 values")
    q1, med, q3 = np.percentile(d, [25, 50, 75], method="linear")
    iqr = q3 - q1
    q0 = max(d.min(), q1 - 1.5 * iqr)
    q4 = min(d.max(), q3 + 1.5 * iqr)
    return BoxStats(float(q0), float(q1), float(med), float(q3), float(q4))


def credible_radius(samples, alpha: float, center=None) -> float:
    """Angular radius of the ball around the mean holding a (1 - alpha) share of the samples.

    alpha = 0 gives the whole sphere (pi); alpha = 1 an empty region (-1).
    """
    if alpha <= 0:
        return np.pi
    if alpha >= 1:
        return -1.0
    samples = np.asarray(samples, dtype=float)
    center = spherical_mean(samples) if center is None else center
    ang = np.arccos(np.clip(samples @ center, -1.0, 1.0))
    return float(np.quantile(ang, 1.0 - alpha))


def credible_coverage(chains, truths, alphas) -> np.ndarray:
    """Fraction of repeats whose true direction lies inside the (1 - alpha) credible ball."""
    truths = check_unit_vectors(truths, tol=1e-6)
    if len(chains) != len(truths):
        raise ValueError("one truth per chain is required")
    if len(chains) < 10:
        raise ValueError("credible coverage needs at least 10 repeats")
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    hits = np.zeros((len(chains), len(alphas)), dtype=bool)
    for r, (chain, truth) in enumerate(zip(chains, truths)):
        chain = np.asarray(chain, dtype=float)
        center = spherical_mean(chain)
        ang = np.arccos(np.clip(chain @ center, -1.0, 1.0))
        t_ang = np.arccos(np.clip(truth @ center, -1.0, 1.0))
        for j, a in enumerate(alphas):
            if a <= 0:
                hits[r, j] = True
            elif a < 1:
                hits[r, j] = t_ang <= np.quantile(ang, 1.0 - a)
    return hits.mean(axis=0)


# ---------------------------------------------------------------------------
# de-entangling two-source chains


def _paired_kmeans(a, b, c1, c2, max_iter=100):
    """Lloyd iterations where each sweep's pair (a_t, b_t) is split across the two clusters."""
    swap = np.zeros(len(a), dtype=bool)
    for _ in range(max_iter):
        keep_cost = np.sum((a - c1) ** 2, axis=1) + np.sum((b - c2) ** 2, axis=1)
        swap_cost = np.sum((a - c2) ** 2, axis=1) + np.sum((b - c1) ** 2, axis=1)
        new_swap = swap_cost < keep_cost
        x1 = np.where(new_swap[:, None], b, a)
        x2 = np.where(new_swap[:, None], a, b)
        c1, c2 = x1.mean(axis=0), x2.mean(axis=0)
        if np.array_equal(new_swap, swap) and _ > 0:
            break
        swap = new_swap
    x1 = np.where(swap[:, None], b, a)
    x2 = np.where(swap[:, None], a, b)
    obj = np.sum((x1 - c1) ** 2) + np.sum((x2 - c2) ** 2)
    return x1, x2, obj, c1, c2


def deentangle(chain1, chain2):
    """Relabel two source chains so each follows a single mode.

    Samples are pooled and split into two clusters with K-means under the
    chordal metric, subject to the two samples of a sweep going to different
    clusters (so both chains keep their length). Two starts are tried: the
    given labels and a farthest-point seeding; the lower within-cluster sum
    of squares wins, which is never above that of the given labels.
    """
    a = np.asarray(chain1, dtype=float)
    b = np.asarray(chain2, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("chains must be equal-length arrays of unit vectors")
    pooled = np.concatenate([a, b])
    spread = np.max(np.linalg.norm(pooled - pooled[0], axis=1))
    if spread < 1e-12:
        raise DegenerateSeparationError("all samples coincide; the two sources cannot be separated")

    starts = [(a.mean(axis=0), b.mean(axis=0))]
    # farthest-point seeding: pooled mean's farthest sample, then the sample farthest from it
    s1 = pooled[np.argmax(np.linalg.norm(pooled - pooled.mean(axis=0), axis=1))]
    s2 = pooled[np.argmax(np.linalg.norm(pooled - s1, axis=1))]
    starts.append((s1, s2))
    best = None
    for k, (c1, c2) in enumerate(starts):
        if np.linalg.norm(c1 - c2) < 1e-12:
            continue  # empty/merged cluster at this start; the farthest-point start re-seeds
        x1, x2, obj, m1, m2 = _paired_kmeans(a, b, c1, c2)
        if np.linalg.norm(m1 - m2) < 1e-12:
            continue
        if best is None or obj < best[2]:
            best = (x1, x2, obj)
    if best is None:
        raise DegenerateSeparationError("clusters collapsed onto one another after re-seeding")
    return best[0], best[1]


# ---------------------------------------------------------------------------
# reports


def aligned_errors(points, truths, radius: float) -> np.ndarray:
    """Geodesic errors under the source labelling that minimizes their sum.

    Source labels are exchangeable, so estimate k is compared with the truth
    it is assigned to rather than with truth k. Errors are returned in truth order.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    if points.shape != truths.shape:
        raise ValueError(f"mismatched truth count: {len(points)} estimates, {len(truths)} truths")
    sm = SphereModel(radius)
    cost = np.array([[geodesic_distance(sm, p, t) for t in truths] for p in points])
    best = min(itertools.permutations(range(len(points))),
               key=lambda perm: math.fsum(cost[perm[j], j] for j in range(len(truths))))
    return np.array([cost[best[j], j] for j in range(len(truths))])


@dataclass
class RunSummary:
    means: np.ndarray  # (K, 3) unit vectors
    radius: float
    truths: np.ndarray | None = None
    bp_modes: np.ndarray | None = None

    def errors(self, sphere_model=None) -> np.ndarray:
        if self.truths is None:
            raise ValueError("no truths recorded")
        return aligned_errors(self.means, self.truths, self.radius)

    def to_json(self) -> dict:
        out = {"radius": self.radius, "means": self.means.tolist()}
        if self.truths is not None:
            out["truths"] = self.truths.tolist()
            out["errors_mm"] = self.errors().tolist()
        if self.bp_modes is not None:
            out["bp_modes"] = self.bp_modes.tolist()
            if self.truths is not None:
                out["bp_errors_mm"] = aligned_errors(self.bp_modes, self.truths, self.radius).tolist()
        return out


def write_bp_csv(path, bp: BackProjection) -> None:
    with open(path, "w") as fh:
        fh.write("pixel_index,ux,uy,uz,intensity\n")
        for i, (u, v) in enumerate(zip(bp.grid.pixels, bp.image)):
            fh.write(f"{i},{float(u[0])!r},{float(u[1])!r},{float(u[2])!r},{float(v)!r}\n")


def evaluate(summaries, alphas=np.linspace(0.1, 0.9, 9), chains=None) -> dict:
    """Geodesic errors, box stats and (optionally) coverage over a batch of run summaries.

    ``summaries`` are :class:`RunSummary` objects (or their JSON dicts) with truths.
    """
    if not summaries:
        raise ValueError("no summaries to evaluate")
    sums = [s if isinstance(s, RunSummary) else _summary_from_json(s) for s in summaries]
    K = sums[0].means.shape[0]
    if any(s.means.shape[0] != K for s in sums):
        raise ValueError("summaries disagree on the number of sources")
    report = {"n_runs": len(sums), "per_source": []}
    for k in range(K):
        errs = np.array([s.errors()[k] for s in sums])
        entry = {"errors_mm": errs.tolist()}
        if len(errs) >= 4:
            entry["box"] = box_stats(errs).as_dict()
        if all(s.bp_modes is not None for s in sums):
            bp_err = np.array([aligned_errors(s.bp_modes, s.truths, s.radius)[k] for s in sums])
            entry["bp_errors_mm"] = bp_err.tolist()
            entry["comparison"] = {"gibbs_median_mm": float(np.median(errs)),
                                   "bp_median_mm": float(np.median(bp_err))}
            if len(bp_err) >= 4:
                entry["bp_box"] = box_stats(bp_err).as_dict()
        report["per_source"].append(entry)
    if chains is not None and len(chains) >= 10:
        truths = np.array([s.truths[0] for s in sums])
        cov = credible_coverage(chains, truths, alphas)
        report["coverage"] = {"alpha": list(map(float, alphas)), "observed": cov.tolist()}
    return report


def _summary_from_json(d) -> RunSummary:
    if isinstance(d, str):
        d = json.loads(d)
    if "truths" not in d:
        raise ValueError("summary lacks truths")
    bp = np.array(d["bp_modes"]) if "bp_modes" in d else None
    means, truths = np.atleast_2d(d["means"]).astype(float), np.atleast_2d(d["truths"]).astype(float)
    if means.shape != truths.shape:
        raise ValueError(f"mismatched truth count: {len(means)} means, {len(truths)} truths")
    return RunSummary(means, float(d["radius"]), truths, bp)

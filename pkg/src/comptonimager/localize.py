"""Metropolis-within-Gibbs localization of K point sources on a sphere.

Latents per event: true interaction positions and deposits, and a virtual
source direction drawn from a mixture of K von Mises-Fisher components
around the sources plus a uniform outlier component. Globals: source
directions, mixture weights and the three noise scales. Every block is
updated by a Metropolis-Hastings step; per-event blocks are vectorized
since they are conditionally independent given the globals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import gammaln
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import physics, sphere, truncnorm
from .analysis import SphereGrid, back_project, bp_modes, spherical_mean
from .forward import (Event, Interaction, NoiseScales, event_log_likelihood, log_energy_noise,
                      log_truncnorm_box)
from .geometry import DetectorArray, SphereModel, _chord_lengths
from .validation import check_events_array, check_kinds

LOG_4PI = math.log(4.0 * math.pi)

# uniforms drawn per event per sweep, by role
_U_R1 = slice(0, 4)
_U_R2 = slice(4, 8)
_U_E = slice(8, 11)
_U_R0N = slice(11, 14)
_N_EVENT_UNIFORMS = 14

SIGMA_NAMES = ("sigma_xy", "sigma_z", "sigma_E")


class InvalidStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    """Prior and proposal hyperparameters.

    ``alpha`` holds the Dirichlet concentrations, outlier term first. The
    sigma bounds are the supports of the uniform noise-scale priors.
    """

    alpha: tuple = (1.0, 50.0)
    kappa: float = 80.0
    a: float = 400.0
    init_kappa: float = 100.0
    band: tuple = (0.40, 0.60)
    sigma_bounds: tuple = ((0.05, 5.0), (0.05, 5.0), (1e-3, 0.2))
    sigma_init: tuple = (0.43, 0.72, 0.029)
    jacobian: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(v) for v in self.alpha))
        if len(self.alpha) < 2 or min(self.alpha) <= 0:
            raise ValueError("alpha needs K + 1 >= 2 positive concentrations")
        for name in ("kappa", "a", "init_kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.band
        if not 0 < lo < hi < 1:
            raise ValueError("acceptance band must satisfy 0 < lo < hi < 1")
        for (blo, bhi), s in zip(self.sigma_bounds, self.sigma_init):
            if not 0 < blo < bhi or not blo <= s <= bhi:
                raise ValueError("sigma priors need 0 < lo < hi enclosing the initial value")

    @property
    def n_sources(self) -> int:
        return len(self.alpha) - 1

    @classmethod
    def for_sources(cls, K: int, **kw) -> "Hyperparams":
        return cls(alpha=(1.0,) + (50.0,) * K, **kw)


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 10000
    burn_in: int = 2000
    seed: int = 0
    E0: float = 0.6617
    kinds: tuple | None = None
    n_sources: int = 1
    window: int = 50
    check_every: int = 100
    radius: float = 300.0
    init_scales: dict = field(default_factory=lambda: {
        "r1": 1.0, "r2": 1.0, "E": 0.01, "r0n": 500.0, "source": 500.0, "weight": 0.05,
        "sigma": (0.05, 0.05, 0.003)})
    scale_bounds: dict = field(default_factory=lambda: {
        "r1": (1e-3, 10.0), "r2": (1e-3, 10.0), "E": (1e-6, 0.5), "r0n": (1.0, 1e7),
        "source": (1.0, 1e7), "weight": (1e-5, 1.0), "sigma": (1e-6, 1.0)})

    def __post_init__(self):
        if self.n_iter < 1 or not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.window < 50:
            raise ValueError("adaptation window must hold at least 50 tallies")
        if self.n_sources < 1:
            raise ValueError("n_sources must be at least 1")
        if not self.E0 > 0:
            raise ValueError("E0 must be positive")

    @property
    def n_keep(self) -> int:
        return self.n_iter - self.burn_in


# ---------------------------------------------------------------------------
# building blocks


def mh_accept(log_current, log_proposed, log_hastings, u):
    """Vectorized Metropolis-Hastings decision; non-finite proposals are rejected."""
    with np.errstate(invalid="ignore"):
        log_ratio = np.asarray(log_proposed) - np.asarray(log_current) + np.asarray(log_hastings)
        return np.isfinite(log_proposed) & (np.log(u) < log_ratio)


def mh_step(current, log_target, proposal, rng: np.random.Generator):
    """One Metropolis-Hastings step.

    ``proposal(x, rng)`` returns ``(x_new, log q(x | x_new) - log q(x_new | x))``;
    use 0 for symmetric proposals. Returns ``(value, accepted)``.
    """
    log_cur = log_target(current)
    if not np.isfinite(log_cur):
        raise ValueError("log target is not finite at the current value")
    cand, log_hastings = proposal(current, rng)
    log_new = log_target(cand)
    if bool(mh_accept(log_cur, log_new, log_hastings, rng.random())):
        return cand, True
    return current, False


def log_prior_virtual_source(r0n, sources, weights, kappa: float):
    """Log density per steradian of the K-term vMF plus uniform-outlier mixture."""
    r0n = np.atleast_2d(r0n)
    sources = np.atleast_2d(sources)
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    w0 = 1.0 - weights.sum()
    with np.errstate(divide="ignore"):
        comps = [np.full(len(r0n), math.log(w0) - LOG_4PI if w0 > 0 else -np.inf)]
        for w, s in zip(weights, sources):
            comps.append(np.log(w) + sphere.vmf_logpdf(r0n, s, kappa))
    return np.logaddexp.reduce(np.stack(comps), axis=0)


def prior_virtual_source(r0n, sources, weights, hyper: Hyperparams):
    """Mixture density at unit vectors ``r0n``: sum_k w_k vMF(kappa) + (1 - sum w) / 4 pi."""
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    if np.any(weights < 0) or weights.sum() > 1 + 1e-12:
        raise ValueError("weights must be nonnegative with sum at most 1")
    out = np.exp(log_prior_virtual_source(r0n, sources, weights, hyper.kappa))
    return float(out[0]) if np.ndim(r0n) == 1 else out


def _membership(r0n, sources, weights, kappa):
    """Posterior component probabilities of each virtual source (outlier first)."""
    w0 = 1.0 - weights.sum()
    with np.errstate(divide="ignore"):
        comps = [np.full(len(r0n), math.log(max(w0, 0.0)) - LOG_4PI if w0 > 0 else -np.inf)]
        comps += [np.log(w) + sphere.vmf_logpdf(r0n, s, kappa) for w, s in zip(weights, sources)]
    comps = np.stack(comps, axis=1)
    comps -= comps.max(axis=1, keepdims=True)
    p = np.exp(comps)
    return p / p.sum(axis=1, keepdims=True)


def dirichlet_log_prior(weights, alpha) -> float:
    """Log Dirichlet density of (1 - sum w, w_1, ..., w_K); -inf on the boundary."""
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    if len(alpha) != len(weights) + 1:
        raise ValueError("alpha must have one more entry than weights")
    full = np.concatenate([[1.0 - weights.sum()], weights])
    if np.any(full <= 0):
        return -np.inf
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + np.sum((alpha - 1.0) * np.log(full)))


def adapt_proposals(scales: dict, rates: dict, bounds: dict, band=(0.40, 0.60), frozen=False,
                    inverted=("r0n", "source")) -> dict:
    """Nudge proposal scales toward the target acceptance band.

    A scale grows by 10% above the band and shrinks by 10% below it (the
    reverse for vMF concentrations, listed in ``inverted``), then is clamped
    to ``bounds``. With ``frozen`` the scales are returned unchanged.
    """
    if frozen:
        return {k: np.array(v, copy=True) for k, v in scales.items()}
    lo, hi = band
    out = {}
    for name, s in scales.items():
        s = np.array(s, dtype=float, copy=True)
        if name in rates:
            r = np.broadcast_to(np.asarray(rates[name], dtype=float), s.shape)
            grow, shrink = (0.9, 1.1) if name in inverted else (1.1, 0.9)
            s = np.where(r > hi, s * grow, np.where(r < lo, s * shrink, s))
            b_lo, b_hi = bounds[name]
            s = np.clip(s, b_lo, b_hi)
        out[name] = s
    return out


# ---------------------------------------------------------------------------
# compiled per-event terms

_SQRT2 = math.sqrt(2.0)


@numba.njit(cache=True)
def _kn_log(E0, E1, mc2):
    if E0 <= 0.0 or E1 < 0.0:
        return -np.inf
    emax = E0 - E0 / (1.0 + 2.0 * E0 / mc2)
    if E1 > emax:
        return -np.inf
    lam = (E0 - E1) / E0
    q = E1 / (E0 - E1)
    c = 1.0 - (mc2 / E0) * q
    dens = lam * lam * (lam + q + c * c) * mc2 / ((E0 - E1) * (E0 - E1))
    r = 1.0 + mc2 / E0
    pre = mc2 / (E0 * E0)
    f_hi = pre * (-(emax * emax) / (2.0 * E0) + r * r * emax + (2.0 * r * mc2 - E0) * math.log(E0 - emax)
                  + mc2 * mc2 / (E0 - emax))
    f_lo = pre * ((2.0 * r * mc2 - E0) * math.log(E0) + mc2 * mc2 / E0)
    return math.log(dens) - math.log(f_hi - f_lo)


@numba.njit(cache=True)
def _log_path(mu, d, dmax):
    if not (d > 0.0 and d < dmax):
        return -np.inf
    return math.log(mu) - mu * d - math.log(-math.expm1(-mu * dmax))


@numba.njit(cache=True)
def _core_kernel(lo, hi, radius, r0n, logz, r1, r2, E1, E2, is_absorb, E0, mu0, log_e, log_mu, a, mc2,
                 jacobian):
    n = r0n.shape[0]
    out = np.empty(n)
    r0 = np.empty(3)
    th1 = np.empty(3)
    th2 = np.empty(3)
    sqrt_a = math.sqrt(a)
    for k in range(n):
        t1 = 0.0
        t2 = 0.0
        for ax in range(3):
            r0[ax] = radius * r0n[k, ax]
            th1[ax] = r1[k, ax] - r0[ax]
            th2[ax] = r2[k, ax] - r1[k, ax]
            t1 += th1[ax] * th1[ax]
            t2 += th2[ax] * th2[ax]
        t1 = math.sqrt(t1)
        t2 = math.sqrt(t2)
        if t1 == 0.0 or t2 == 0.0:
            out[k] = -np.inf
            continue
        cos_psi = 0.0
        for ax in range(3):
            th1[ax] /= t1
            th2[ax] /= t2
            cos_psi += th1[ax] * th2[ax]
        cos_psi = min(1.0, max(-1.0, cos_psi))
        # direction prior times truncated first path collapses to mu0 exp(-mu0 d1) / Z(r0)
        d1 = _chord_lengths(lo, hi, r0, th1, 0.0, t1)
        if not (d1 > 0.0 and d1 < _chord_lengths(lo, hi, r0, th1, 0.0, np.inf)):
            out[k] = -np.inf
            continue
        total = math.log(mu0) - mu0 * d1 - logz[k]
        total += _kn_log(E0, E1[k], mc2)
        if total == -np.inf:
            out[k] = total
            continue
        c = 1.0 - mc2 * (1.0 / (E0 - E1[k]) - 1.0 / E0)
        omega = math.acos(min(1.0, max(-1.0, c)))
        psi = math.acos(cos_psi)
        sin_psi = math.sqrt(1.0 - cos_psi * cos_psi)
        if sin_psi == 0.0:
            out[k] = -np.inf
            continue
        kept = 0.5 * (math.erf(sqrt_a * (math.pi - omega)) + math.erf(sqrt_a * omega))
        total += (0.5 * math.log(a / math.pi) - a * (omega - psi) ** 2 - math.log(2.0 * math.pi * sin_psi)
                  - math.log(kept))
        E_mid = E0 - E1[k]
        mu1 = math.exp(np.interp(math.log(E_mid), log_e, log_mu))
        total += _log_path(mu1, _chord_lengths(lo, hi, r1[k], th2, 0.0, t2),
                           _chord_lengths(lo, hi, r1[k], th2, 0.0, np.inf))
        if not is_absorb[k]:
            total += _kn_log(E_mid, E2[k], mc2)
        if jacobian:
            total -= 2.0 * math.log(t1) + 2.0 * math.log(t2)
        out[k] = total
    return out


@numba.njit(cache=True)
def _box_noise_kernel(obs, r, sig, lo, hi):
    """Per-axis truncated-normal log density of ``obs`` given true ``r`` inside [lo, hi]."""
    n = obs.shape[0]
    out = np.empty((n, 3))
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    for k in range(n):
        for ax in range(3):
            x = obs[k, ax]
            if x < lo[k, ax] or x > hi[k, ax]:
                out[k, ax] = -np.inf
                continue
            s = sig[k, ax]
            m = r[k, ax]
            mass = 0.5 * (math.erfc((lo[k, ax] - m) / (s * _SQRT2)) - math.erfc((hi[k, ax] - m) / (s * _SQRT2)))
            z = (x - m) / s
            out[k, ax] = -0.5 * z * z - half_log_2pi - math.log(s) - math.log(mass)
    return out


@numba.njit(cache=True)
def _box_log_mass(m, s, lo, hi):
    """Per-row sum over axes of log P(lo <= N(m, s^2) <= hi), for means inside the box."""
    n = m.shape[0]
    out = np.zeros(n)
    for k in range(n):
        for ax in range(3):
            mass = 0.5 * (math.erfc((lo[k, ax] - m[k, ax]) / (s[k, ax] * _SQRT2))
                          - math.erfc((hi[k, ax] - m[k, ax]) / (s[k, ax] * _SQRT2)))
            out[k] += math.log(mass)
    return out


# ---------------------------------------------------------------------------
# model


class GibbsModel:
    """Fixed inputs of a chain and the vectorized conditional log densities."""

    def __init__(self, array: DetectorArray, table: physics.AttenuationTable, lut, observations,
                 kinds, E0: float, hyper: Hyperparams, radius: float = 300.0):
        self.array, self.table, self.lut, self.hyper = array, table, lut, hyper
        self.obs = check_events_array(observations, min_events=1)
        self.n = len(self.obs)
        self.is_absorb = check_kinds(np.asarray(kinds) if not isinstance(kinds, np.ndarray) else kinds, self.n)
        self.E0 = float(E0)
        self.radius = float(radius)
        self.max_dep0 = float(physics.max_deposit(self.E0))
        self.mu0 = table.mu("interaction", self.E0)
        self.log_mu0 = math.log(self.mu0)
        self.obs_r1 = np.ascontiguousarray(self.obs[:, 0:3])
        self.obs_E1 = self.obs[:, 3].copy()
        self.obs_r2 = np.ascontiguousarray(self.obs[:, 4:7])
        self.obs_E2 = self.obs[:, 7].copy()
        s1 = array.containing_sensor(self.obs_r1)
        s2 = array.containing_sensor(self.obs_r2)
        for name, s in (("first", s1), ("second", s2)):
            if np.any(s < 0):
                n = int(np.flatnonzero(s < 0)[0])
                raise ValueError(f"event {n}: observed {name} interaction lies outside every sensor")
        self.lo1, self.hi1 = array.lo[s1], array.hi[s1]
        self.lo2, self.hi2 = array.lo[s2], array.hi[s2]
        self._log_e = np.ascontiguousarray(table._loge)
        self._log_mu = np.ascontiguousarray(table._logs["interaction"])

    # -- pieces --------------------------------------------------------------

    def log_z(self, r0n):
        return np.atleast_1d(self.lut.log_normalizer(r0n))

    def core(self, r0n, logz, r1, r2, E1, E2):
        """Per-event log likelihood of the true interactions given the virtual source.

        The stage densities are in (direction, path) form; with
        ``hyper.jacobian`` the 1/t^2 factors turning them into densities over
        positions are added. The absorption point mass is enforced by the
        sampler and contributes no term.
        """
        return _core_kernel(self.array.lo, self.array.hi, self.radius, np.ascontiguousarray(r0n),
                            np.ascontiguousarray(logz, dtype=float), np.ascontiguousarray(r1),
                            np.ascontiguousarray(r2), np.ascontiguousarray(E1, dtype=float),
                            np.ascontiguousarray(E2, dtype=float), self.is_absorb, self.E0, self.mu0,
                            self._log_e, self._log_mu, self.hyper.a, physics.MC2, self.hyper.jacobian)

    def position_noise(self, which: int, r, sig):
        """Per-event, per-axis truncated-normal log density of the observed position."""
        obs, lo, hi = ((self.obs_r1, self.lo1, self.hi1) if which == 1 else (self.obs_r2, self.lo2, self.hi2))
        return _box_noise_kernel(obs, np.ascontiguousarray(r), np.broadcast_to(sig, r.shape).copy(), lo, hi)

    def energy_noise(self, E1, E2, sigma_E):
        return log_energy_noise(E1, self.obs_E1, sigma_E) + log_energy_noise(E2, self.obs_E2, sigma_E)

    def prior(self, r0n, sources, weights):
        return log_prior_virtual_source(r0n, sources, weights, self.hyper.kappa)

    def e2_upper(self, E1):
        return physics.max_deposit(self.E0 - E1)


def position_sigmas(sigma):
    return np.array([sigma[0], sigma[0], sigma[1]])


@dataclass
class ChainState:
    """All Gibbs latents plus proposal scales and cached per-event terms."""

    r1: np.ndarray
    r2: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    r0n: np.ndarray
    sources: np.ndarray
    weights: np.ndarray
    sigma: np.ndarray
    scales: dict
    logz: np.ndarray
    core: np.ndarray
    prior: np.ndarray

    def copy(self) -> "ChainState":
        return replace(self, **{k: np.array(v, copy=True) for k, v in self.__dict__.items() if isinstance(v, np.ndarray)},
                       scales={k: np.array(v, copy=True) for k, v in self.scales.items()})

    def check(self, model: GibbsModel, tol: float = 1e-9) -> None:
        """Raise :class:`InvalidStateError` unless the state satisfies the chain invariants."""
        if not (np.all(self.weights > 0) and self.weights.sum() < 1):
            raise InvalidStateError("weights must be positive with sum below 1")
        if np.any(self.E1 < 0) or np.any(self.E1 > model.max_dep0 + tol):
            raise InvalidStateError("first deposit outside the Compton range")
        A = model.is_absorb
        if np.any(np.abs(self.E1[A] + self.E2[A] - model.E0) > tol):
            raise InvalidStateError("absorption event energies do not sum to E0")
        cs = ~A
        if np.any(self.E2[cs] < 0) or np.any(self.E2[cs] > model.e2_upper(self.E1[cs]) + tol):
            raise InvalidStateError("second deposit outside the Compton range")
        for r, lo, hi in ((self.r1, model.lo1, model.hi1), (self.r2, model.lo2, model.hi2)):
            if np.any(r < lo - tol) or np.any(r > hi + tol):
                raise InvalidStateError("interaction position left its sensor")
        if np.any(np.abs(np.linalg.norm(self.r0n, axis=1) - 1) > 1e-9):
            raise InvalidStateError("virtual sources must be unit vectors")
        if not np.all(np.isfinite(self.core)) or not np.all(np.isfinite(self.prior)):
            raise InvalidStateError("state has zero posterior density")


def log_joint_posterior(model: GibbsModel, state: ChainState) -> float:
    """Unnormalized log joint posterior, evaluated event by event with the scalar forward densities.

    Independent of the vectorized conditionals used in the sweep; the
    absorption point mass enters through its widened Gaussian, which is a
    constant when E1 + E2 = E0.
    """
    hyper = model.hyper
    total = []
    scales = NoiseScales(*state.sigma)
    sig = scales.position_sigmas()
    for n in range(model.n):
        kind = "A" if model.is_absorb[n] else "CS"
        ev = Event(Interaction(state.r1[n], float(state.E1[n])), Interaction(state.r2[n], float(state.E2[n])), kind)
        total.append(event_log_likelihood(model.array, model.table, model.lut, model.radius * state.r0n[n],
                                          model.E0, ev, a=hyper.a, jacobian=hyper.jacobian))
        total.append(float(log_truncnorm_box(model.obs_r1[n], state.r1[n], sig, model.lo1[n], model.hi1[n])))
        total.append(float(log_truncnorm_box(model.obs_r2[n], state.r2[n], sig, model.lo2[n], model.hi2[n])))
        total.append(float(log_energy_noise(state.E1[n], model.obs_E1[n], scales.sigma_E)))
        total.append(float(log_energy_noise(state.E2[n], model.obs_E2[n], scales.sigma_E)))
        total.append(math.log(prior_virtual_source(state.r0n[n], state.sources, state.weights, hyper)))
    total.append(dirichlet_log_prior(state.weights, hyper.alpha))
    for s, (lo, hi) in zip(state.sigma, hyper.sigma_bounds):
        total.append(-math.log(hi - lo) if lo <= s <= hi else -np.inf)
    total.append(-len(state.sources) * LOG_4PI)
    return math.fsum(total)


# ---------------------------------------------------------------------------
# random streams


class EventStreams:
    """Per-event counter-based streams keyed by (seed, event id).

    Each sweep consumes a fixed block of uniforms per event, so the draws an
    event sees depend only on the seed, its id and the sweep number.
    """

    def __init__(self, seed: int, ids, stream: int = 2, n_per_sweep: int = _N_EVENT_UNIFORMS, block: int = 128):
        self.gens = [np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, stream, int(i)]))
                     for i in ids]
        self.n_per_sweep, self.block = n_per_sweep, block
        self._buf, self._pos = None, block

    def next(self) -> np.ndarray:
        if self._pos == self.block:
            self._buf = np.stack([g.random((self.block, self.n_per_sweep)) for g in self.gens], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def global_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 3, 0]))


# ---------------------------------------------------------------------------
# initialization


def _initial_scales(config: GibbsConfig, n: int, K: int) -> dict:
    s = config.init_scales
    return {"r1": np.full(n, float(s["r1"])), "r2": np.full(n, float(s["r2"])), "E": np.full(n, float(s["E"])),
            "r0n": np.full(n, float(s["r0n"])), "source": np.full(K, float(s["source"])),
            "weight": np.full(K, float(s["weight"])), "sigma": np.array(s["sigma"], dtype=float)}


def init_chain(model: GibbsModel, config: GibbsConfig, ids, grid: SphereGrid | None = None,
               sources=None) -> ChainState:
    """Initial state: sources at the back-projection modes, latents near the observations.

    Explicit starting ``sources`` (unit vectors) skip the back-projection.
    """
    hyper = model.hyper
    K = config.n_sources
    if sources is None:
        bp = back_project(model.obs, model.E0, SphereModel(model.radius), grid)
        sources = bp_modes(bp.image, K, bp.grid)
    else:
        sources = sphere.normalize(np.atleast_2d(np.asarray(sources, dtype=float)))
        if sources.shape != (K, 3):
            raise ValueError(f"expected {K} initial source directions")
    weights = np.full(K, 0.99) if K == 1 else np.full(K, 0.98 / K)

    U = np.stack([np.random.Generator(np.random.Philox(key=int(config.seed), counter=[0, 0, 4, int(i)])).random(10)
                  for i in ids])
    sigma = np.array(hyper.sigma_init, dtype=float)
    sig = position_sigmas(sigma)
    r1 = truncnorm.draw(model.obs_r1, sig, model.lo1, model.hi1, U[:, 0:3])
    r2 = truncnorm.draw(model.obs_r2, sig, model.lo2, model.hi2, U[:, 3:6])
    E1 = truncnorm.draw(model.obs_E1, sigma[2], 0.0, model.max_dep0, U[:, 6])
    E2 = np.where(model.is_absorb, model.E0 - E1,
                  truncnorm.draw(model.obs_E2, sigma[2], 0.0, model.e2_upper(E1), U[:, 7]))

    # most likely source for each event, then a vMF draw around it
    scores = np.stack([model.core(np.tile(s, (model.n, 1)), model.log_z(np.tile(s, (model.n, 1))), r1, r2, E1, E2)
                       for s in sources], axis=1)
    best = sources[np.argmax(scores, axis=1)]
    r0n = sphere.vmf_from_uniforms(best, hyper.init_kappa, U[:, 8], U[:, 9])
    logz = model.log_z(r0n)
    core = model.core(r0n, logz, r1, r2, E1, E2)
    bad = ~np.isfinite(core)
    if np.any(bad):  # fall back to the source direction itself
        r0n[bad] = best[bad]
        logz = model.log_z(r0n)
        core = model.core(r0n, logz, r1, r2, E1, E2)
    if not np.all(np.isfinite(core)):
        n = int(np.flatnonzero(~np.isfinite(core))[0])
        raise ValueError(f"event {ids[n]}: no valid initial state (inconsistent with the source energy?)")
    prior = model.prior(r0n, sources, weights)
    state = ChainState(r1, r2, E1, E2, r0n, sources, weights, sigma, _initial_scales(config, model.n, K),
                       logz, core, prior)
    state.check(model)
    return state


# ---------------------------------------------------------------------------
# sweep


def _update_positions(state, model, which, U, sig):
    r = state.r1 if which == 1 else state.r2
    lo, hi = (model.lo1, model.hi1) if which == 1 else (model.lo2, model.hi2)
    step = state.scales["r1" if which == 1 else "r2"][:, None] * sig
    cand = truncnorm.draw(r, step, lo, hi, U[:, 0:3])
    # q(x | x*) / q(x* | x) = mass(x) / mass(x*) for a box-truncated random walk
    log_h = _box_log_mass(r, step, lo, hi) - _box_log_mass(cand, step, lo, hi)
    noise_cur = model.position_noise(which, r, sig).sum(axis=1)
    noise_new = model.position_noise(which, cand, sig).sum(axis=1)
    if which == 1:
        core_new = model.core(state.r0n, state.logz, cand, state.r2, state.E1, state.E2)
    else:
        core_new = model.core(state.r0n, state.logz, state.r1, cand, state.E1, state.E2)
    acc = mh_accept(noise_cur + state.core, noise_new + core_new, log_h, U[:, 3])
    r[acc] = cand[acc]
    state.core[acc] = core_new[acc]
    return acc


def _update_energies(state, model, U):
    s = state.scales["E"]
    E0, M0 = model.E0, model.max_dep0
    A = model.is_absorb
    E1, E2 = state.E1, state.E2
    E1_new = truncnorm.draw(E1, s, 0.0, M0, U[:, 0])
    hi_new = model.e2_upper(E1_new)
    hi_cur = model.e2_upper(E1)
    E2_new = np.where(A, E0 - E1_new, truncnorm.draw(E2, s, 0.0, hi_new, U[:, 1]))
    log_h = truncnorm.logpdf(E1, E1_new, s, 0.0, M0) - truncnorm.logpdf(E1_new, E1, s, 0.0, M0)
    with np.errstate(invalid="ignore"):  # absorption rows give -inf - -inf and are masked below
        log_h2 = truncnorm.logpdf(E2, E2_new, s, 0.0, hi_cur) - truncnorm.logpdf(E2_new, E2, s, 0.0, hi_new)
    log_h = log_h + np.where(A, 0.0, log_h2)
    sE = state.sigma[2]
    cur = model.energy_noise(E1, E2, sE) + state.core
    core_new = model.core(state.r0n, state.logz, state.r1, state.r2, E1_new, E2_new)
    new = model.energy_noise(E1_new, E2_new, sE) + core_new
    acc = mh_accept(cur, new, log_h, U[:, 2])
    E1[acc] = E1_new[acc]
    E2[acc] = E2_new[acc]
    # absorption events keep E1 + E2 = E0 exactly
    E2[A & acc] = E0 - E1[A & acc]
    state.core[acc] = core_new[acc]
    return acc


def _update_virtual_sources(state, model, U):
    cand = sphere.vmf_from_uniforms(state.r0n, state.scales["r0n"], U[:, 0], U[:, 1])
    logz = model.log_z(cand)
    core_new = model.core(cand, logz, state.r1, state.r2, state.E1, state.E2)
    prior_new = model.prior(cand, state.sources, state.weights)
    acc = mh_accept(state.core + state.prior, core_new + prior_new, 0.0, U[:, 2])
    state.r0n[acc] = cand[acc]
    state.logz[acc] = logz[acc]
    state.core[acc] = core_new[acc]
    state.prior[acc] = prior_new[acc]
    return acc


def _update_sources(state, model, rng):
    K = len(state.sources)
    acc = np.zeros(K, dtype=bool)
    for k in range(K):
        kappa = state.scales["source"][k]
        cand = state.sources.copy()
        cand[k] = sphere.vmf_from_uniforms(state.sources[k], kappa, rng.random(1), rng.random(1))[0]
        prior_new = model.prior(state.r0n, cand, state.weights)
        if mh_accept(math.fsum(state.prior), math.fsum(prior_new), 0.0, rng.random()):
            state.sources = cand
            state.prior = prior_new
            acc[k] = True
    return acc


def _update_weights(state, model, rng):
    K = len(state.weights)
    alpha = model.hyper.alpha
    acc = np.zeros(K, dtype=bool)
    for k in range(K):
        s = state.scales["weight"][k]
        w = state.weights
        upper = 1.0 - (w.sum() - w[k])
        wk_new = float(truncnorm.draw(w[k], s, 0.0, upper, rng.random()))
        log_h = float(truncnorm.log_mass(-w[k] / s, (upper - w[k]) / s)
                      - truncnorm.log_mass(-wk_new / s, (upper - wk_new) / s))
        cand = w.copy()
        cand[k] = wk_new
        prior_new = model.prior(state.r0n, state.sources, cand)
        cur = dirichlet_log_prior(w, alpha) + math.fsum(state.prior)
        new = dirichlet_log_prior(cand, alpha)
        new = new + math.fsum(prior_new) if np.isfinite(new) else -np.inf
        if mh_accept(cur, new, log_h, rng.random()):
            state.weights = cand
            state.prior = prior_new
            acc[k] = True
    return acc


def _sigma_log_target(state, model, j, value):
    lo, hi = model.hyper.sigma_bounds[j]
    if not lo <= value <= hi:
        return -np.inf
    sigma = state.sigma.copy()
    sigma[j] = value
    if j == 2:
        return math.fsum(model.energy_noise(state.E1, state.E2, value))
    sig = position_sigmas(sigma)
    axes = [0, 1] if j == 0 else [2]
    terms = np.concatenate([model.position_noise(1, state.r1, sig)[:, axes].ravel(),
                            model.position_noise(2, state.r2, sig)[:, axes].ravel()])
    return math.fsum(terms)


def _update_sigmas(state, model, rng):
    acc = np.zeros(3, dtype=bool)
    for j in range(3):
        cand = state.sigma[j] + state.scales["sigma"][j] * rng.standard_normal()
        cur = _sigma_log_target(state, model, j, state.sigma[j])
        new = _sigma_log_target(state, model, j, cand)
        if mh_accept(cur, new, 0.0, rng.random()):
            state.sigma = state.sigma.copy()
            state.sigma[j] = cand
            acc[j] = True
    return acc


def gibbs_sweep(state: ChainState, model: GibbsModel, uniforms: np.ndarray, rng: np.random.Generator):
    """One pass of the sampler; updates ``state`` in place and returns per-variable accept flags.

    Per event (vectorized): first position, second position, the energy
    pair, the virtual source. Then each source direction and weight in
    ascending order, then the three noise scales.
    """
    sig = position_sigmas(state.sigma)
    flags = {
        "r1": _update_positions(state, model, 1, uniforms[:, _U_R1], sig),
        "r2": _update_positions(state, model, 2, uniforms[:, _U_R2], sig),
        "E": _update_energies(state, model, uniforms[:, _U_E]),
        "r0n": _update_virtual_sources(state, model, uniforms[:, _U_R0N]),
        "source": _update_sources(state, model, rng),
        "weight": _update_weights(state, model, rng),
        "sigma": _update_sigmas(state, model, rng),
    }
    return flags


# ---------------------------------------------------------------------------
# driver


@dataclass
class GibbsResult:
    sources: np.ndarray  # (n_keep, K, 3) unit vectors
    weights: np.ndarray  # (n_keep, K)
    sigmas: np.ndarray  # (n_keep, 3)
    membership: np.ndarray  # (N, K + 1) mean component probabilities, outlier first
    acceptance: dict
    init_sources: np.ndarray
    state: ChainState
    burn_in: int
    seed: int

    @property
    def sweeps(self) -> np.ndarray:
        return np.arange(self.burn_in + 1, self.burn_in + 1 + len(self.sources))

    def spherical_means(self) -> np.ndarray:
        return np.array([spherical_mean(self.sources[:, k]) for k in range(self.sources.shape[1])])

    def diagnostics(self) -> dict:
        return {"acceptance": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.acceptance.items()},
                "seed": self.seed, "burn_in": self.burn_in, "n_keep": len(self.sources),
                "init_sources": self.init_sources.tolist()}


def _event_inputs(events):
    ids = [getattr(e, "id", None) for e in events] if len(events) and hasattr(events[0], "first") else None
    X = check_events_array(events, min_events=1)
    if ids is None or any(i is None for i in ids):
        ids = list(range(len(X)))
    if len(set(ids)) != len(ids):
        raise ValueError("event ids must be unique")
    return X, [int(i) for i in ids]


def run_gibbs(events, config: GibbsConfig, array: DetectorArray, table: physics.AttenuationTable, lut,
              hyper: Hyperparams | None = None, ids=None, grid: SphereGrid | None = None,
              init_sources=None, progress=None) -> GibbsResult:
    """Run the sampler and keep the post-burn-in sweeps.

    ``config.kinds`` gives each event's second interaction ('A' or 'CS'),
    from EM classification or from truth.
    """
    if config.kinds is None:
        raise ValueError("second-interaction kinds are required for every event")
    hyper = hyper or Hyperparams.for_sources(config.n_sources)
    if hyper.n_sources != config.n_sources:
        raise ValueError("Dirichlet alpha length does not match the number of sources")
    X, default_ids = _event_inputs(events)
    ids = default_ids if ids is None else [int(i) for i in ids]
    model = GibbsModel(array, table, lut, X, np.asarray(config.kinds), config.E0, hyper, config.radius)
    state = init_chain(model, config, ids, grid, init_sources)
    init_sources = state.sources.copy()
    streams = EventStreams(config.seed, ids)
    rng = global_rng(config.seed)

    K = config.n_sources
    keep = config.n_keep
    out_src = np.empty((keep, K, 3))
    out_w = np.empty((keep, K))
    out_sig = np.empty((keep, 3))
    member = np.zeros((model.n, K + 1))
    window = {name: np.zeros_like(v) for name, v in state.scales.items()}
    totals = {name: np.zeros_like(v) for name, v in state.scales.items()}
    bounds = config.scale_bounds

    for t in range(1, config.n_iter + 1):
        flags = gibbs_sweep(state, model, streams.next(), rng)
        for name, f in flags.items():
            window[name] += f
            if t > config.burn_in:
                totals[name] += f
        if t <= config.burn_in and t % config.window == 0:
            rates = {name: w / config.window for name, w in window.items()}
            state.scales = adapt_proposals(state.scales, rates, bounds, hyper.band)
            window = {name: np.zeros_like(v) for name, v in window.items()}
        if t % config.check_every == 0:
            state.check(model)
        if t > config.burn_in:
            i = t - config.burn_in - 1
            out_src[i] = state.sources
            out_w[i] = state.weights
            out_sig[i] = state.sigma
            member += _membership(state.r0n, state.sources, state.weights, hyper.kappa)
        if progress is not None and t % 1000 == 0:
            progress(t, config.n_iter)

    acceptance = {name: totals[name] / keep for name in totals}
    return GibbsResult(out_src, out_w, out_sig, member / keep, acceptance, init_sources, state,
                       config.burn_in, config.seed)


class GibbsLocalizer(BaseEstimator):
    """Estimator wrapper: ``fit(X, kinds)`` runs the sampler on an (N, 8) event array.

    After fitting, ``directions_`` holds the spherical means (unit vectors),
    ``result_`` the full chains and ``predict`` the most probable component
    (0 = outlier, k = source k) of each fitted event.
    """

    def __init__(self, array=None, table=None, lut=None, n_sources=1, E0=0.6617, n_iter=10000, burn_in=2000,
                 seed=0, kappa=80.0, a=400.0, radius=300.0):
        self.array = array
        self.table = table
        self.lut = lut
        self.n_sources = n_sources
        self.E0 = E0
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.seed = seed
        self.kappa = kappa
        self.a = a
        self.radius = radius

    def fit(self, X, y):
        X = check_events_array(X, min_events=1)
        if self.array is None or self.lut is None:
            raise ValueError("array and lut are required")
        table = self.table if self.table is not None else physics.load_lyso()
        kinds = np.asarray(y)
        config = GibbsConfig(n_iter=self.n_iter, burn_in=self.burn_in, seed=self.seed, E0=self.E0,
                             kinds=tuple(kinds.tolist()), n_sources=self.n_sources, radius=self.radius)
        hyper = Hyperparams.for_sources(self.n_sources, kappa=self.kappa, a=self.a)
        self.result_ = run_gibbs(X, config, self.array, table, self.lut, hyper)
        self.directions_ = self.result_.spherical_means()
        self.X_fit_ = X
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_events_array(X)
        if X.shape != self.X_fit_.shape or not np.array_equal(X, self.X_fit_):
            raise ValueError("predict assigns the fitted events only")
        return np.argmax(self.result_.membership, axis=1)

"""EM estimation of the source energy and second-interaction type from summed deposits.

Only the summed observed deposit of each event is used. Two mixture
components: absorption at the second interaction (sum = E0 plus noise) and a
second Compton scattering (sum spread below E0 plus noise).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import physics
from .validation import summed_energies

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class EmParams:
    p_A: float
    p_CS: float
    E0: float
    sigma: float

    def __post_init__(self):
        if abs(self.p_A + self.p_CS - 1.0) > 1e-9:
            raise ValueError("p_A + p_CS must equal 1")
        if not (self.E0 > 0 and self.sigma > 0):
            raise ValueError("E0 and sigma must be positive")


def _grid(start, stop, step):
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


@dataclass(frozen=True)
class EmConfig:
    e0_grid: np.ndarray = field(default_factory=lambda: _grid(0.5, 1.0, 0.02))
    sigma_grid: np.ndarray = field(default_factory=lambda: _grid(1e-4, 1e-1, 0.002))
    max_iter: int = 10
    n_nodes: int = 400
    tol: float = 1e-6

    def __post_init__(self):
        for name in ("e0_grid", "sigma_grid"):
            g = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if g.size == 0 or np.any(np.diff(g) <= 0) or np.any(g <= 0):
                raise ValueError(f"{name} must be nonempty, positive and ascending")
            object.__setattr__(self, name, g)
        if self.max_iter < 1 or self.n_nodes < 10:
            raise ValueError("max_iter >= 1 and n_nodes >= 10 required")


# ---------------------------------------------------------------------------
# component densities


def scatter_sum_density(E0: float, n_nodes: int = 400):
    """Noise-free density of E1 + E2 after two Compton scatterings.

    Returns nodes and density values of a piecewise-linear approximation on
    [0, E0], obtained by trapezoidal integration over E1 and renormalized to
    unit mass.
    """
    s = np.linspace(0.0, E0, n_nodes)
    e1 = np.linspace(0.0, float(physics.max_deposit(E0)), n_nodes)
    f1 = physics.kn_deposit_density(E0, e1)
    # KN density of E2 = s - E1 at the scattered energy E0 - E1
    f2 = physics.kn_deposit_density((E0 - e1)[None, :], s[:, None] - e1[None, :])
    h = np.trapezoid(f2 * f1[None, :], e1, axis=1)
    h /= np.trapezoid(h, s)
    return s, h


@numba.njit(cache=True)
def _smooth_piecewise_linear(x, nodes, values, sigma):
    """Exact convolution of a piecewise-linear density with N(0, sigma^2), evaluated at ``x``.

    Segments further than 8 sigma from a query point are skipped.
    """
    out = np.zeros(x.shape[0])
    m = nodes.shape[0]
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for k in range(x.shape[0]):
        xk = x[k]
        lo = np.searchsorted(nodes, xk - 8.0 * sigma) - 1
        hi = np.searchsorted(nodes, xk + 8.0 * sigma) + 1
        if lo < 0:
            lo = 0
        if hi > m:
            hi = m
        total = 0.0
        z0 = (nodes[lo] - xk) / sigma
        c0 = 0.5 * math.erfc(-z0 * inv_sqrt2)
        p0 = _INV_SQRT_2PI * math.exp(-0.5 * z0 * z0)
        for i in range(lo, hi - 1):
            z1 = (nodes[i + 1] - xk) / sigma
            c1 = 0.5 * math.erfc(-z1 * inv_sqrt2)
            p1 = _INV_SQRT_2PI * math.exp(-0.5 * z1 * z1)
            slope = (values[i + 1] - values[i]) / (nodes[i + 1] - nodes[i])
            icpt = values[i] - slope * nodes[i]
            total += (icpt + slope * xk) * (c1 - c0) + slope * sigma * (p0 - p1)
            z0, c0, p0 = z1, c1, p1
        out[k] = max(total, 0.0)
    return out


def summed_density(E_tilde, E0: float, kind: str, sigma: float, n_nodes: int = 400):
    """Density per MeV of the observed summed deposit under one second-interaction kind."""
    E_tilde = np.asarray(E_tilde, dtype=float)
    if kind == "A":
        z = (E_tilde - E0) / sigma
        out = _INV_SQRT_2PI / sigma * np.exp(-0.5 * z * z)
    elif kind == "CS":
        s, h = scatter_sum_density(E0, n_nodes)
        out = _smooth_piecewise_linear(np.atleast_1d(E_tilde).astype(float), s, h, float(sigma)).reshape(E_tilde.shape)
    else:
        raise ValueError("kind must be 'A' or 'CS'")
    return float(out) if out.ndim == 0 else out


def component_log_densities(sums, config: EmConfig):
    """log f_A and log f_CS for every (E0, sigma) grid cell; arrays of shape (nE0, nsigma, n)."""
    sums = np.asarray(sums, dtype=float)
    nE, nS = len(config.e0_grid), len(config.sigma_grid)
    log_a = np.empty((nE, nS, len(sums)))
    log_cs = np.empty_like(log_a)
    with np.errstate(divide="ignore"):
        for i, E0 in enumerate(config.e0_grid):
            s, h = scatter_sum_density(E0, config.n_nodes)
            for j, sig in enumerate(config.sigma_grid):
                z = (sums - E0) / sig
                log_a[i, j] = -0.5 * z * z - np.log(sig) - 0.5 * np.log(2 * np.pi)
                log_cs[i, j] = np.log(_smooth_piecewise_linear(sums, s, h, float(sig)))
    return log_a, log_cs


# ---------------------------------------------------------------------------
# EM steps


@dataclass
class EStepResult:
    t_A: np.ndarray
    t_CS: np.ndarray
    fallback: np.ndarray  # events where both component densities vanished


def e_step_from_logs(log_fa, log_fcs, p_A: float) -> EStepResult:
    with np.errstate(divide="ignore", invalid="ignore"):
        la = np.log(p_A) + log_fa if p_A > 0 else np.full_like(log_fa, -np.inf)
        lc = np.log1p(-p_A) + log_fcs if p_A < 1 else np.full_like(log_fcs, -np.inf)
        m = np.maximum(la, lc)
        dead = ~np.isfinite(m)
        m = np.where(dead, 0.0, m)
        wa = np.exp(la - m)
        wc = np.exp(lc - m)
        t_A = wa / (wa + wc)
    t_A = np.where(dead, 0.5, t_A)
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} events have zero density under both kinds; "
                      "using 0.5/0.5 responsibilities", RuntimeWarning, stacklevel=3)
    return EStepResult(t_A, 1.0 - t_A, dead)


def e_step(sums, params: EmParams, n_nodes: int = 400) -> EStepResult:
    """Posterior probabilities of each kind for every event."""
    sums = np.asarray(sums, dtype=float)
    with np.errstate(divide="ignore"):
        log_fa = np.log(summed_density(sums, params.E0, "A", params.sigma))
        log_fcs = np.log(np.atleast_1d(summed_density(sums, params.E0, "CS", params.sigma, n_nodes)))
    return e_step_from_logs(np.atleast_1d(log_fa), log_fcs, params.p_A)


def _q_surface(t_A, log_a, log_cs):
    with np.errstate(invalid="ignore"):
        qa = np.where(t_A > 0, t_A * log_a, 0.0)
        qc = np.where(t_A < 1, (1.0 - t_A) * log_cs, 0.0)
    return np.nan_to_num(qa + qc, nan=-np.inf, neginf=-np.inf).sum(axis=-1)


def m_step(sums, t_A, config: EmConfig, logs=None) -> EmParams:
    """Closed-form mixture weights and grid argmax of the expected log-likelihood.

    Ties go to the smallest (E0, sigma) in lexicographic order.
    """
    t_A = np.asarray(t_A, dtype=float)
    if logs is None:
        logs = component_log_densities(sums, config)
    q = _q_surface(t_A, *logs)
    i, j = np.unravel_index(int(np.argmax(q)), q.shape)  # first max in C order
    p_A = float(np.mean(t_A))
    return EmParams(p_A, 1.0 - p_A, float(config.e0_grid[i]), float(config.sigma_grid[j]))


def observed_log_likelihood(params: EmParams, log_fa, log_fcs) -> float:
    with np.errstate(divide="ignore"):
        terms = np.logaddexp(np.log(params.p_A) + log_fa, np.log(params.p_CS) + log_fcs)
    return float(terms.sum())


@dataclass
class EmResult:
    trace: list
    responsibilities: np.ndarray
    classifications: np.ndarray
    iterations: int
    converged: bool
    log_likelihood: list
    fallback: np.ndarray

    @property
    def params(self) -> EmParams:
        return self.trace[-1]

    def to_json(self) -> dict:
        p = self.params
        return {"E0": p.E0, "sigma": p.sigma, "p_A": p.p_A, "p_CS": p.p_CS,
                "iterations": self.iterations, "classifications": self.classifications.tolist()}


def run_em(events, config: EmConfig | None = None) -> EmResult:
    """Alternate E and M steps until the grid cell and weights stop moving or ``max_iter``.

    Starts from equal responsibilities, i.e. the first M-step sees every
    event as half absorption, half scattering.
    """
    config = config or EmConfig()
    sums = summed_energies(events, min_events=2)
    logs = component_log_densities(sums, config)
    cell = lambda p: (p.E0, p.sigma)  # noqa: E731
    params = m_step(sums, np.full(len(sums), 0.5), config, logs)
    trace, lls = [], []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        i = int(np.searchsorted(config.e0_grid, params.E0))
        j = int(np.searchsorted(config.sigma_grid, params.sigma))
        est = e_step_from_logs(logs[0][i, j], logs[1][i, j], params.p_A)
        new = m_step(sums, est.t_A, config, logs)
        trace.append(new)
        ii = int(np.searchsorted(config.e0_grid, new.E0))
        jj = int(np.searchsorted(config.sigma_grid, new.sigma))
        lls.append(observed_log_likelihood(new, logs[0][ii, jj], logs[1][ii, jj]))
        done = cell(new) == cell(params) and abs(new.p_A - params.p_A) < config.tol
        params = new
        if done:
            converged = True
            break
    i = int(np.searchsorted(config.e0_grid, params.E0))
    j = int(np.searchsorted(config.sigma_grid, params.sigma))
    final = e_step_from_logs(logs[0][i, j], logs[1][i, j], params.p_A)
    kinds = np.where(final.t_A >= 0.5, "A", "CS")
    resp = np.stack([final.t_A, final.t_CS], axis=1)
    return EmResult(trace, resp, kinds, it, converged, lls, final.fallback)


class EnergyEM(BaseEstimator, ClassifierMixin):
    """Estimator wrapper around :func:`run_em`.

    ``fit`` takes an (n, 8) event array, event objects, (n, 2) deposit
    pairs or summed energies; ``predict`` labels events ``'A'`` or ``'CS'``.
    """

    def __init__(self, e0_range=(0.5, 1.0, 0.02), sigma_range=(1e-4, 1e-1, 0.002), max_iter=10,
                 n_nodes=400):
        self.e0_range = e0_range
        self.sigma_range = sigma_range
        self.max_iter = max_iter
        self.n_nodes = n_nodes

    def _config(self):
        return EmConfig(_grid(*self.e0_range), _grid(*self.sigma_range), self.max_iter, self.n_nodes)

    def fit(self, X, y=None):
        self.result_ = run_em(X, self._config())
        self.params_ = self.result_.params
        self.n_iter_ = self.result_.iterations
        self.classes_ = np.array(["A", "CS"])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        est = e_step(summed_energies(X), self.params_, self.n_nodes)
        return np.stack([est.t_A, est.t_CS], axis=1)

    def predict(self, X):
        return np.where(self.predict_proba(X)[:, 0] >= 0.5, "A", "CS")

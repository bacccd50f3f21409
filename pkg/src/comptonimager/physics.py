"""Compton kinematics, Klein-Nishina deposit densities and attenuation data.

Energies are in MeV and lengths in mm throughout the package.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

_COS_TOL = 1e-12
_ANTIDERIV_GUARD = 1e-12


@dataclass(frozen=True)
class PhysicalConstants:
    mc2: float = 0.511  # electron rest energy, MeV
    r_e: float = 2.8179  # classical electron radius, fm

    def __post_init__(self):
        if not self.mc2 > 0:
            raise ValueError("mc2 must be positive")


CONSTANTS = PhysicalConstants()
MC2 = CONSTANTS.mc2


def max_deposit(E0):
    """Compton edge: the largest energy one scattering can deposit."""
    E0 = np.asarray(E0, dtype=float)
    return E0 - E0 / (1.0 + 2.0 * E0 / MC2)


def compton_cosine(E0, E1):
    """Cosine of the scattering angle, unclipped (may leave [-1, 1])."""
    E0 = np.asarray(E0, dtype=float)
    E1 = np.asarray(E1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 - MC2 * (1.0 / (E0 - E1) - 1.0 / E0)


def compton_angle(E0, E1):
    """Scattering angle in radians for a deposit ``E1`` from a photon of energy ``E0``.

    Raises
    ------
    ValueError
        If the cosine leaves [-1, 1] by more than 1e-12.
    """
    c = compton_cosine(E0, E1)
    if np.any(~np.isfinite(c)) or np.any(np.abs(c) > 1.0 + _COS_TOL):
        raise ValueError("deposit outside Compton kinematic range")
    out = np.arccos(np.clip(c, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def deposit_from_angle(E0, omega):
    """Inverse of :func:`compton_angle`."""
    E0 = np.asarray(E0, dtype=float)
    scattered = E0 / (1.0 + (E0 / MC2) * (1.0 - np.cos(omega)))
    return E0 - scattered


def _kn_unnormalized(E0, E1):
    # Klein-Nishina cross section expressed per unit deposited energy,
    # lambda^2 (lambda + 1/lambda - sin^2) * |d cos / dE1|.
    lam = (E0 - E1) / E0
    q = E1 / (E0 - E1)
    c = 1.0 - (MC2 / E0) * q
    return lam**2 * (lam + q + c**2) * MC2 / (E0 - E1) ** 2


def kn_antiderivative(E0, E):
    """Closed-form antiderivative of the unnormalized Klein-Nishina deposit density.

    ``F(b) - F(a)`` is the integral of the density over ``[a, b]``.
    """
    E0 = np.asarray(E0, dtype=float)
    E = np.asarray(E, dtype=float)
    if np.any(E0 - E < _ANTIDERIV_GUARD):
        raise ValueError("E must stay below E0 (singular at E = E0)")
    r = 1.0 + MC2 / E0
    out = (MC2 / E0**2) * (
        -(E**2) / (2.0 * E0)
        + r**2 * E
        + (2.0 * r * MC2 - E0) * np.log(E0 - E)
        + MC2**2 / (E0 - E)
    )
    return float(out) if out.ndim == 0 else out


def kn_normalizer(E0):
    E0 = np.asarray(E0, dtype=float)
    return kn_antiderivative(E0, max_deposit(E0)) - kn_antiderivative(E0, np.zeros_like(E0))


def kn_deposit_density(E0, E1):
    """Normalized density of the deposit ``E1`` for one Compton scattering at ``E0``.

    Zero outside ``[0, max_deposit(E0)]``. Broadcasts over both arguments.
    """
    E0, E1 = np.broadcast_arrays(np.asarray(E0, dtype=float), np.asarray(E1, dtype=float))
    inside = (E1 >= 0) & (E1 <= max_deposit(E0)) & (E0 > 0)
    out = np.zeros(E0.shape)
    if np.any(inside):
        e0, e1 = E0[inside], E1[inside]
        out[inside] = _kn_unnormalized(e0, e1) / kn_normalizer(e0)
    return float(out) if out.ndim == 0 else out


def kn_log_density(E0, E1):
    """Log of :func:`kn_deposit_density`; ``-inf`` off the support. No scalar unboxing."""
    E0, E1 = np.broadcast_arrays(np.asarray(E0, dtype=float), np.asarray(E1, dtype=float))
    inside = (E1 >= 0) & (E1 <= max_deposit(E0)) & (E0 > 0)
    out = np.full(E0.shape, -np.inf)
    if np.any(inside):
        e0, e1 = E0[inside], E1[inside]
        out[inside] = np.log(_kn_unnormalized(e0, e1)) - np.log(kn_normalizer(e0))
    return out


def sample_kn_deposit(E0: float, rng: np.random.Generator, size=None):
    """Draw Compton deposits at energy ``E0`` by rejection from a flat envelope."""
    emax = float(max_deposit(E0))
    # density is convex-ish on the support; its max sits at an endpoint
    bound = 1.0001 * max(_kn_unnormalized(E0, 0.0), _kn_unnormalized(E0, emax))
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(0)
    while out.size < n:
        m = max(16, 2 * (n - out.size))
        x = rng.uniform(0.0, emax, m)
        u = rng.uniform(0.0, bound, m)
        out = np.concatenate([out, x[u < _kn_unnormalized(E0, x)]])
    out = out[:n]
    return float(out[0]) if size is None else out.reshape(size)


_KINDS = ("total", "photo", "compton", "interaction")


@dataclass(frozen=True)
class AttenuationTable:
    """Linear attenuation coefficients (1/mm) of the sensor material versus energy (MeV).

    ``interaction`` is photo + Compton, the attenuation that actually produces
    recorded interactions; any residual in ``total`` (coherent scattering)
    is treated as non-interacting.
    """

    energy: np.ndarray
    mu_total: np.ndarray
    mu_photo: np.ndarray
    mu_compton: np.ndarray
    _logs: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in
                  (self.energy, self.mu_total, self.mu_photo, self.mu_compton)]
        e, tot, ph, co = arrays
        if e.ndim != 1 or len({a.shape for a in arrays}) != 1 or e.size < 2:
            raise ValueError("attenuation columns must be 1-D and of equal length >= 2")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(tot <= 0) or np.any(ph <= 0) or np.any(co <= 0):
            raise ValueError("attenuation coefficients must be positive")
        if np.any(ph + co > tot * (1 + 1e-9)):
            raise ValueError("mu_photo + mu_compton exceeds mu_total")
        for name, a in zip(("energy", "mu_total", "mu_photo", "mu_compton"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        logs = {
            "total": np.log(tot),
            "photo": np.log(ph),
            "compton": np.log(co),
            "interaction": np.log(ph + co),
        }
        object.__setattr__(self, "_logs", logs)
        object.__setattr__(self, "_loge", np.log(e))
        object.__setattr__(self, "_lo_ok", float(e[0]) * (1 - 1e-12))
        object.__setattr__(self, "_hi_ok", float(e[-1]) * (1 + 1e-12))

    @property
    def e_min(self) -> float:
        return float(self.energy[0])

    @property
    def e_max(self) -> float:
        return float(self.energy[-1])

    @classmethod
    def from_csv(cls, path) -> "AttenuationTable":
        """Read ``energy_mev,mu_total_mm,mu_photo_mm,mu_compton_mm`` rows."""
        text = Path(path).read_text() if not hasattr(path, "read") else path.read()
        return cls._parse(text, str(path))

    @classmethod
    def _parse(cls, text: str, source: str) -> "AttenuationTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        expected = ["energy_mev", "mu_total_mm", "mu_photo_mm", "mu_compton_mm"]
        if header is None or [h.strip() for h in header] != expected:
            raise ValueError(f"{source}: header must be {','.join(expected)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
            if len(rows[-1]) != 4:
                raise ValueError(f"{source}:{lineno}: expected 4 columns")
        data = np.array(rows, dtype=float)
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3])

    def to_csv(self) -> str:
        lines = ["energy_mev,mu_total_mm,mu_photo_mm,mu_compton_mm"]
        for row in zip(self.energy, self.mu_total, self.mu_photo, self.mu_compton):
            lines.append(",".join(f"{v:.9g}" for v in row))
        return "\n".join(lines) + "\n"

    def mu(self, kind: str, E):
        """Log-log interpolated coefficient; exact at the nodes."""
        if kind not in _KINDS:
            raise ValueError(f"unknown attenuation kind {kind!r}; choose from {_KINDS}")
        if isinstance(E, float):
            if not self._lo_ok <= E <= self._hi_ok:
                raise ValueError(
                    f"energy outside attenuation table range [{self.e_min}, {self.e_max}] MeV")
            return math.exp(np.interp(math.log(E), self._loge, self._logs[kind]))
        E = np.asarray(E, dtype=float)
        if np.any(~(E >= self._lo_ok)) or np.any(~(E <= self._hi_ok)):
            raise ValueError(
                f"energy outside attenuation table range [{self.e_min}, {self.e_max}] MeV")
        out = np.exp(np.interp(np.log(E), self._loge, self._logs[kind]))
        return float(out) if out.ndim == 0 else out

    def mu_fast(self, kind: str, E):
        # No range check; energies outside the table are clamped to the end rows.
        return np.exp(np.interp(np.log(E), self._loge, self._logs[kind]))

    def absorb_fraction(self, E):
        """Probability that an interaction at ``E`` is photoelectric absorption."""
        return self.mu("photo", E) / self.mu("interaction", E)


def mu(table: AttenuationTable, kind: str, E):
    return table.mu(kind, E)


def load_lyso() -> AttenuationTable:
    """The bundled LYSO (Lu1.9Y0.1SiO5, 7.1 g/cm^3) table."""
    text = resources.files("comptonimager").joinpath("data/lyso_attenuation.csv").read_text()
    return AttenuationTable._parse(text, "lyso_attenuation.csv")


def analytic_p_absorb(table: AttenuationTable, E0: float, n_nodes: int = 4001) -> float:
    """Probability that the second interaction is an absorption, given a first Compton scattering.

    Integrates the absorption fraction at the scattered energy against the
    Klein-Nishina deposit density with the trapezoidal rule.
    """
    e1 = np.linspace(0.0, float(max_deposit(E0)), n_nodes)
    weights = kn_deposit_density(E0, e1)
    ratio = table.absorb_fraction(E0 - e1)
    p = np.trapezoid(ratio * weights, e1) / np.trapezoid(weights, e1)
    return float(p)

"""Monte Carlo photon transport through the sensor array and noisy event generation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from . import physics, sphere, truncnorm
from .forward import Event, Interaction, NoiseScales, NoisyEvent, sample_first_interaction
from .geometry import DetectorArray, SphereModel


@dataclass(frozen=True)
class SourceSpec:
    direction: tuple
    energy: float = 0.6617
    intensity: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if d.shape != (3,) or n == 0:
            raise ValueError("source direction must be a nonzero 3-vector")
        object.__setattr__(self, "direction", tuple(d / n))
        if not self.energy > 0:
            raise ValueError("source energy must be positive")
        if not 0 <= self.intensity <= 1:
            raise ValueError("source intensity must lie in [0, 1]")

    @classmethod
    def from_lonlat(cls, lon_deg, lat_deg, energy=0.6617, intensity=1.0):
        return cls(tuple(sphere.lonlat_to_unit(lon_deg, lat_deg)), energy, intensity)


@dataclass(frozen=True)
class SimConfig:
    sources: Sequence[SourceSpec]
    n_events: int
    seed: int = 0
    outlier_fraction: float = 0.0
    noise: NoiseScales = field(default_factory=NoiseScales)
    add_noise: bool = True
    radius: float = 300.0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise ValueError("at least one source is required")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        total = sum(s.intensity for s in self.sources) + self.outlier_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"source intensities plus outlier fraction sum to {total}, not 1")
        if self.n_events < 0:
            raise ValueError("n_events must be nonnegative")


def photon_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based stream: Philox keyed by ``seed``, counter set by (stream, index)."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(stream), int(index)]))


def transport_photon(array: DetectorArray, table: physics.AttenuationTable, r0, E0: float,
                     rng: np.random.Generator) -> Event | None:
    """Follow one photon from ``r0`` to its second interaction.

    Returns ``None`` for photons absorbed at the first interaction or
    escaping before a second one.
    """
    r0 = np.asarray(r0, dtype=float)
    dir1, depth1, _ = sample_first_interaction(array, table, r0, E0, rng)
    r1, _ = array.point_at_depth(r0, dir1, depth1)
    if r1 is None:  # numerically grazing exit; treat as escape
        return None
    if rng.random() < table.absorb_fraction(E0):
        return None
    E1 = physics.sample_kn_deposit(E0, rng)
    omega = physics.compton_angle(E0, E1)
    dir2 = sphere.directions_from_cos(dir1, np.array([np.cos(omega)]),
                                      np.array([2.0 * np.pi * rng.random()]))[0]
    E_mid = E0 - E1
    depth2 = -np.log1p(-rng.random()) / table.mu("interaction", E_mid)
    r2, _ = array.point_at_depth(r1, dir2, depth2)
    if r2 is None:
        return None
    if rng.random() < table.absorb_fraction(E_mid):
        kind, E2 = "A", E_mid
    else:
        kind, E2 = "CS", physics.sample_kn_deposit(E_mid, rng)
    return Event(Interaction(r1, E1), Interaction(r2, E2), kind)


def simulate_photons(array, table, r0, E0, n_photons: int, seed: int = 0, stream: int = 7):
    """Transport ``n_photons`` independent photons; returns the events that produced two interactions."""
    out = []
    for i in range(n_photons):
        ev = transport_photon(array, table, r0, E0, photon_rng(seed, stream, i))
        if ev is not None:
            out.append(ev)
    return out


def add_noise(array: DetectorArray, event: Event, scales: NoiseScales, rng: np.random.Generator):
    """Observed interactions: truncated Gaussians within the true sensor and on E >= 0."""
    sig = scales.position_sigmas()
    out = []
    for it in (event.first, event.second):
        p = np.asarray(it.position)
        k = array.containing_sensor(p)
        pos = truncnorm.draw(p, sig, array.lo[k], array.hi[k], rng.random(3))
        E = float(truncnorm.draw(it.deposit, scales.sigma_E, 0.0, np.inf, rng.random()))
        out.append(Interaction(pos, E))
    return out


def _source_event(array, table, config, src, rng):
    r0 = np.asarray(src.direction) * config.radius
    while True:
        ev = transport_photon(array, table, r0, src.energy, rng)
        if ev is not None:
            return ev


def generate_events(array: DetectorArray, table: physics.AttenuationTable, config: SimConfig):
    """Draw ``config.n_events`` noisy events with truth records.

    Each event slot has its own counter-based stream, so slots are
    independent of each other and of evaluation order. Outlier slots
    produce, with equal odds, a time-swapped pair or a pair mixing two
    independent photons.
    """
    weights = np.array([s.intensity for s in config.sources] + [config.outlier_fraction])
    cum = np.cumsum(weights) / weights.sum()
    src_w = np.array([s.intensity for s in config.sources])
    src_cum = np.cumsum(src_w) / src_w.sum()
    events = []
    for i in range(config.n_events):
        rng = photon_rng(config.seed, 1, i)
        pick = int(np.searchsorted(cum, rng.random(), side="right"))
        pick = min(pick, len(weights) - 1)
        if pick < len(config.sources):
            truth = _source_event(array, table, config, config.sources[pick], rng)
            label = pick
        else:
            label = "outlier"
            k1 = int(np.searchsorted(src_cum, rng.random(), side="right"))
            base = _source_event(array, table, config, config.sources[min(k1, len(src_cum) - 1)], rng)
            if rng.random() < 0.5:
                truth = Event(base.second, base.first, base.second_kind)
            else:
                k2 = int(np.searchsorted(src_cum, rng.random(), side="right"))
                other = _source_event(array, table, config, config.sources[min(k2, len(src_cum) - 1)], rng)
                truth = Event(base.first, other.second, other.second_kind)
        if config.add_noise:
            first, second = add_noise(array, truth, config.noise, rng)
        else:
            first, second = truth.first, truth.second
        events.append(NoisyEvent(first, second, id=i, truth=truth, source=label))
    return events


def summed_energy_histogram(events, bins=100, range=None):
    """Histogram of the summed observed deposits; returns (counts, edges)."""
    if len(events) == 0:
        raise ValueError("no events")
    sums = np.array([e.first.deposit + e.second.deposit for e in events])
    if range is None:
        lo, hi = sums.min(), sums.max()
        range = (lo - 0.5, hi + 0.5) if lo == hi else (lo, hi)
    return np.histogram(sums, bins=bins, range=range)


# -- event files -----------------------------------------------------------------


def event_to_json(ev: NoisyEvent) -> str:
    rec = {"id": int(ev.id), "r1": list(ev.first.position), "E1": ev.first.deposit,
           "r2": list(ev.second.position), "E2": ev.second.deposit}
    if ev.truth is not None:
        t = ev.truth
        rec["truth"] = {"source": ev.source, "kind": t.second_kind, "r1": list(t.first.position),
                        "E1": t.first.deposit, "r2": list(t.second.position), "E2": t.second.deposit}
    return json.dumps(rec, separators=(",", ":"))


def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(event_to_json(ev) + "\n")


class EventFileError(ValueError):
    pass


def _vec3(v, name, lineno):
    if not (isinstance(v, list) and len(v) == 3):
        raise EventFileError(f"line {lineno}: {name} must be a list of three numbers")
    return tuple(float(x) for x in v)


def read_events(path) -> list[NoisyEvent]:
    """Parse a JSON Lines event file; errors name the offending line."""
    events = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            first = Interaction(_vec3(rec["r1"], "r1", lineno), float(rec["E1"]))
            second = Interaction(_vec3(rec["r2"], "r2", lineno), float(rec["E2"]))
            truth, source = None, None
            if "truth" in rec:
                t = rec["truth"]
                truth = Event(Interaction(_vec3(t["r1"], "truth.r1", lineno), float(t["E1"])),
                              Interaction(_vec3(t["r2"], "truth.r2", lineno), float(t["E2"])), t["kind"])
                source = t["source"]
            events.append(NoisyEvent(first, second, id=int(rec["id"]), truth=truth, source=source))
        except EventFileError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise EventFileError(f"line {lineno}: malformed event ({exc})") from None
    return events

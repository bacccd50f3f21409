"""Bayesian inversion for a single-material Compton imager."""
from .analysis import (BackProjector, DegenerateSeparationError, SphereGrid, back_project, box_stats, bp_modes,
                       credible_coverage, deentangle, spherical_mean)
from .energy_em import EmConfig, EnergyEM, run_em
from .forward import DirectionPriorLut, NoiseScales, build_direction_lut, event_log_likelihood
from .geometry import DetectorArray, Sensor, SphereModel
from .localize import GibbsConfig, GibbsLocalizer, Hyperparams, run_gibbs
from .physics import AttenuationTable, load_lyso
from .simulate import SimConfig, SourceSpec, generate_events, read_events, write_events

__version__ = "0.1.0"

__all__ = [
    "AttenuationTable", "BackProjector", "DegenerateSeparationError", "DetectorArray", "DirectionPriorLut",
    "EmConfig", "EnergyEM", "GibbsConfig", "GibbsLocalizer", "Hyperparams", "NoiseScales", "Sensor",
    "SimConfig", "SourceSpec", "SphereGrid", "SphereModel", "back_project", "box_stats", "bp_modes",
    "build_direction_lut", "credible_coverage", "deentangle", "event_log_likelihood", "generate_events",
    "load_lyso", "read_events", "run_em", "run_gibbs", "spherical_mean", "write_events",
]

#!/usr/bin/env python3
"""
Beam Source
===========

Supersonic beam model: particle species, velocity distribution, de Broglie
wavelengths and the collimation geometry that sets divergence and
transverse coherence.

All quantities are SI.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from scipy import constants, stats

from vortex_errors import DomainError

logger = logging.getLogger(__name__)

HE4_MASS = 6.6465e-27  # kg
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


class DetectionClass(str, Enum):
    SINGLET_ATOM = "singlet_atom"
    TRIPLET_ATOM = "triplet_atom"
    DIMER = "dimer"


@dataclass(frozen=True)
class ParticleSpecies:
    """A detectable beam constituent"""
    name: str
    mass: float
    detection_class: DetectionClass

    def __post_init__(self):
        if not self.mass > 0:
            raise DomainError(f"Species {self.name!r}: mass must be > 0, got {self.mass}")
        object.__setattr__(self, "detection_class", DetectionClass(self.detection_class))


HE_SINGLET = ParticleSpecies("he_singlet", HE4_MASS, DetectionClass.SINGLET_ATOM)
HE_TRIPLET = ParticleSpecies("he_triplet", HE4_MASS, DetectionClass.TRIPLET_ATOM)
HE2_DIMER = ParticleSpecies("he2_dimer", 2 * HE4_MASS, DetectionClass.DIMER)

SPECIES_CATALOG: Dict[str, ParticleSpecies] = {
    s.name: s for s in (HE_SINGLET, HE_TRIPLET, HE2_DIMER)
}


@dataclass(frozen=True)
class BeamModel:
    """Beam speed distribution and species composition.

    `composition` holds (species, weight) pairs as given; `fractions` is the
    normalized view.
    """
    mean_speed: float
    fractional_fwhm: float
    composition: Tuple[Tuple[ParticleSpecies, float], ...] = field(default=((HE_TRIPLET, 1.0),))

    def __post_init__(self):
        if not self.mean_speed > 0:
            raise DomainError(f"mean_speed must be > 0, got {self.mean_speed}")
        if not 0 <= self.fractional_fwhm < 1:
            raise DomainError(f"fractional_fwhm must be in [0, 1), got {self.fractional_fwhm}")
        if not self.composition:
            raise DomainError("Beam composition is empty")
        weights = [float(w) for _, w in self.composition]
        if any(w < 0 for w in weights):
            raise DomainError(f"Composition weights must be >= 0, got {weights}")
        total = sum(weights)
        if total <= 0:
            raise DomainError("Composition weights sum to zero")
        names = [s.name for s, _ in self.composition]
        if len(set(names)) != len(names):
            raise DomainError(f"Duplicate species in composition: {names}")
        object.__setattr__(self, "composition", tuple((s, w) for (s, _), w in zip(self.composition, weights)))

    @property
    def species(self) -> List[ParticleSpecies]:
        return [s for s, _ in self.composition]

    @property
    def fractions(self) -> Tuple[Tuple[ParticleSpecies, float], ...]:
        total = sum(w for _, w in self.composition)
        return tuple((s, w / total) for s, w in self.composition)


@dataclass(frozen=True)
class BeamlineGeometry:
    """Skimmer/grating/detector distances and collimating apertures"""
    valve_to_skimmer: float
    skimmer_to_grating: float
    grating_to_detector: float
    skimmer_aperture: float
    grating_array_extent: float

    def __post_init__(self):
        for name in ("valve_to_skimmer", "skimmer_to_grating", "grating_to_detector"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        # apertures may shrink to zero (point-source limit)
        for name in ("skimmer_aperture", "grating_array_extent"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class CoherenceReport:
    species: str
    wavelength: float
    divergence: float
    coherence_length: float
    hologram_diameter: float

    @property
    def coherence_ratio(self) -> float:
        return self.coherence_length / self.hologram_diameter


def de_broglie_wavelength(mass: float, speed: float) -> float:
    """λ = h / (m v)"""
    if not mass > 0:
        raise DomainError(f"mass must be > 0, got {mass}")
    if not speed > 0:
        raise DomainError(f"speed must be > 0, got {speed}")
    return constants.h / (mass * speed)


def mean_wavelength(beam: BeamModel, species: ParticleSpecies) -> float:
    """Wavelength at the mean beam speed"""
    return de_broglie_wavelength(species.mass, beam.mean_speed)


def wavelength_samples(beam: BeamModel, species: ParticleSpecies, count: int) -> List[Tuple[float, float]]:
    """Equal-weight Gaussian speed quantiles mapped to wavelengths.

    Returns (wavelength, weight) pairs in ascending wavelength. Quantile k
    sits at Φ⁻¹((k + ½) / count) standard deviations from the mean speed.
    """
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    if count == 1 or beam.fractional_fwhm == 0:
        return [(mean_wavelength(beam, species), 1.0)]

    sigma = beam.fractional_fwhm * FWHM_TO_SIGMA * beam.mean_speed
    z = stats.norm.ppf((np.arange(count) + 0.5) / count)
    speeds = beam.mean_speed + sigma * z
    speeds = speeds[speeds > 0]
    if len(speeds) < count:
        logger.warning(f"⚠️ Dropped {count - len(speeds)} non-positive speed quantiles")

    weight = 1.0 / len(speeds)
    return [(de_broglie_wavelength(species.mass, v), weight) for v in speeds[::-1]]


def divergence_angle(geometry: BeamlineGeometry) -> float:
    """Full geometric collimation angle (aperture + array) / distance"""
    if not geometry.skimmer_to_grating > 0:
        raise DomainError("skimmer_to_grating must be > 0")
    return (geometry.skimmer_aperture + geometry.grating_array_extent) / geometry.skimmer_to_grating


def transverse_coherence_length(wavelength: float, divergence: float) -> float:
    if not divergence > 0:
        raise DomainError(f"divergence must be > 0 (infinite coherence is out of model), got {divergence}")
    if not wavelength > 0:
        raise DomainError(f"wavelength must be > 0, got {wavelength}")
    return wavelength / divergence


def coherence_report(beam: BeamModel, geometry: BeamlineGeometry, species: ParticleSpecies,
                     hologram_diameter: float) -> CoherenceReport:
    """Compare the transverse coherence length with the hologram size"""
    wavelength = mean_wavelength(beam, species)
    divergence = divergence_angle(geometry)
    report = CoherenceReport(
        species=species.name,
        wavelength=wavelength,
        divergence=divergence,
        coherence_length=transverse_coherence_length(wavelength, divergence),
        hologram_diameter=hologram_diameter,
    )
    if report.coherence_ratio < 1:
        logger.warning(
            f"⚠️ {species.name}: coherence length {report.coherence_length * 1e9:.0f} nm is shorter than "
            f"the {hologram_diameter * 1e9:.0f} nm hologram (ratio {report.coherence_ratio:.2f})"
        )
    return report

#!/usr/bin/env python3
"""
Instrument Model
================

Incoherent instrument effects on top of the monochromatic far field:

    chromatic average -> array factor -> collimation blur -> species mixing

plus Monte Carlo detection events, laser deflection of triplet atoms and
detector accumulation.

Every species is propagated onto one common odd-sized angular grid
(sim_pixel_angle, half widths) so maps of different wavelengths mix
without resampling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from beam_source import (SPECIES_CATALOG, BeamlineGeometry, BeamModel, DetectionClass, ParticleSpecies,
                         divergence_angle, mean_wavelength, wavelength_samples)
from diffraction import (IntensityMap, Normalization, array_factor, array_intensity_factor,
                         check_same_grid, far_field_window, intensity, normalize)
from hologram import (DEFAULT_PIXEL_PITCH, HologramSpec, RasterMask, TileLayout, erode_open_regions,
                      narrowed_spec, rasterize)
from vortex_errors import DomainError, SamplingError

logger = logging.getLogger(__name__)

RNG_ID = "philox4x64-10/numpy"
EVENT_CHUNK = 65536
# counter word 2 selects the stream; species draws use 1 + species index
SPLIT_STREAM = 0
DEFLECTION_STREAM = 2 ** 32


class ArrayMode(str, Enum):
    NONE = "none"
    COHERENT = "coherent"
    INCOHERENT = "incoherent"
    BOTH = "both"


class ErosionMode(str, Enum):
    MORPHOLOGICAL = "morphological"
    ANALYTIC = "analytic"


@dataclass(frozen=True)
class DeflectionModel:
    """Rigid laser kick along θy plus Gaussian heating"""
    mean_kick: float
    kick_spread: float = 0.0
    affected_class: DetectionClass = DetectionClass.TRIPLET_ATOM

    def __post_init__(self):
        if self.kick_spread < 0:
            raise DomainError(f"kick_spread must be >= 0, got {self.kick_spread}")
        object.__setattr__(self, "affected_class", DetectionClass(self.affected_class))


@dataclass(frozen=True)
class InstrumentModel:
    beam: BeamModel
    geometry: BeamlineGeometry
    layout: TileLayout
    spec: HologramSpec
    erosion_margin: float = 0.0
    detector_pixel_angle: float = 30e-6
    wavelength_sample_count: int = 31
    pixel_pitch: float = DEFAULT_PIXEL_PITCH
    sim_pixel_angle: float = 10e-6
    half_width_x: float = 4.5e-3
    half_width_y: float = 1.5e-3
    array_mode: ArrayMode = ArrayMode.COHERENT
    erosion_mode: ErosionMode = ErosionMode.MORPHOLOGICAL
    collimation: bool = True
    deflection: Optional[DeflectionModel] = None

    def __post_init__(self):
        if not self.detector_pixel_angle > 0:
            raise DomainError(f"detector_pixel_angle must be > 0, got {self.detector_pixel_angle}")
        if self.wavelength_sample_count < 1:
            raise DomainError(f"wavelength_sample_count must be >= 1, got {self.wavelength_sample_count}")
        if self.erosion_margin < 0:
            raise DomainError(f"erosion_margin must be >= 0, got {self.erosion_margin}")
        for name in ("sim_pixel_angle", "half_width_x", "half_width_y"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        object.__setattr__(self, "array_mode", ArrayMode(self.array_mode))
        object.__setattr__(self, "erosion_mode", ErosionMode(self.erosion_mode))
        self.layout.check_fits(self.spec)

    @property
    def effective_open_width(self) -> float:
        return self.spec.open_width - 2 * self.erosion_margin

    def ideal(self) -> "InstrumentModel":
        """Monochromatic single hologram without blur"""
        return replace(self, beam=replace(self.beam, fractional_fwhm=0.0), array_mode=ArrayMode.NONE,
                       collimation=False)


@dataclass
class EventList:
    """Detected impacts; angles in rad"""
    frame: pd.DataFrame
    rng_seed: int
    rng: str = RNG_ID

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def theta_x(self) -> np.ndarray:
        return self.frame["theta_x"].to_numpy()

    @property
    def theta_y(self) -> np.ndarray:
        return self.frame["theta_y"].to_numpy()

    @property
    def species(self) -> np.ndarray:
        return self.frame["species"].to_numpy()


@dataclass
class DetectorImage:
    counts: np.ndarray
    pixel_angle: float
    total_events: int = field(default=-1)

    def __post_init__(self):
        if self.total_events < 0:
            self.total_events = int(self.counts.sum())

    def to_intensity_map(self) -> IntensityMap:
        return IntensityMap(self.counts.astype(np.float64), self.pixel_angle, Normalization.RAW)

    @classmethod
    def from_intensity_map(cls, intensity_map: IntensityMap) -> "DetectorImage":
        counts = np.rint(intensity_map.values).astype(np.int64)
        if not np.allclose(counts, intensity_map.values):
            raise DomainError("Map values are not integer counts")
        return cls(counts, intensity_map.angular_pitch)


def _empty_events(seed: int) -> EventList:
    frame = pd.DataFrame({"theta_x": np.empty(0), "theta_y": np.empty(0), "species": np.empty(0, dtype=object)})
    return EventList(frame, seed)


@lru_cache(maxsize=32)
def _mask_for(spec: HologramSpec, pixel_pitch: float, margin: float, erosion_mode: ErosionMode) -> RasterMask:
    if erosion_mode == ErosionMode.ANALYTIC:
        return rasterize(narrowed_spec(spec, margin), pixel_pitch, antialias=True)
    return erode_open_regions(rasterize(spec, pixel_pitch), margin)


def hologram_mask(model: InstrumentModel) -> RasterMask:
    """Single-hologram raster with van der Waals narrowing applied"""
    return _mask_for(model.spec, model.pixel_pitch, model.erosion_margin, model.erosion_mode)


def monochromatic_intensity(model: InstrumentModel, wavelength: float) -> IntensityMap:
    """Raw single-wavelength map on the common grid, coherent array included"""
    field_ = far_field_window(hologram_mask(model), wavelength, model.sim_pixel_angle,
                              model.half_width_x, model.half_width_y)
    if model.array_mode in (ArrayMode.COHERENT, ArrayMode.BOTH) and not model.layout.is_single:
        lobe = wavelength / max(model.layout.extent_x, model.layout.extent_y)
        if model.sim_pixel_angle <= lobe / 2:
            return intensity(array_factor(model.layout, wavelength, field_), Normalization.RAW)
        # lattice fringes unresolved on this grid: use their pixel average
        mono = intensity(field_, Normalization.RAW)
        factor = array_intensity_factor(model.layout, wavelength, mono.angles_x(), mono.angles_y(),
                                        bin_width=model.sim_pixel_angle)
        return IntensityMap(mono.values * factor, mono.angular_pitch, Normalization.RAW)
    return intensity(field_, Normalization.RAW)


def rescale_map(intensity_map: IntensityMap, scale: float) -> IntensityMap:
    """Stretch angles by `scale` about the centre, keeping the total"""
    if scale == 1.0:
        return replace(intensity_map, values=intensity_map.values.copy())
    rows, cols = intensity_map.shape
    cr, cc = intensity_map.center_index
    r = (np.arange(rows) - cr) / scale + cr
    c = (np.arange(cols) - cc) / scale + cc
    rr, ccs = np.meshgrid(r, c, indexing="ij")
    values = ndimage.map_coordinates(intensity_map.values, [rr, ccs], order=1, mode="constant", cval=0.0)
    values = np.clip(values, 0.0, None)
    if values.sum() > 0:
        values *= intensity_map.total / values.sum()
    return IntensityMap(values, intensity_map.angular_pitch, intensity_map.normalization)


def _top_hat(width_px: float) -> np.ndarray:
    """Unit-sum box of full width `width_px` with fractional edge taps"""
    if width_px <= 0:
        return np.ones(1)
    half = width_px / 2
    reach = int(np.ceil(half - 0.5 - 1e-9))
    taps = np.arange(-reach, reach + 1)
    weights = np.clip(np.minimum(taps + 0.5, half) - np.maximum(taps - 0.5, -half), 0.0, None)
    return weights / weights.sum()


def top_hat_blur(intensity_map: IntensityMap, width: float) -> IntensityMap:
    """Separable top-hat convolution of full angular `width` on both axes"""
    if width < 0:
        raise DomainError(f"Blur width must be >= 0, got {width}")
    kernel = _top_hat(width / intensity_map.angular_pitch)
    if len(kernel) > min(intensity_map.shape):
        raise DomainError(
            f"Blur kernel ({width * 1e6:.1f} urad, {len(kernel)} px) is wider than the "
            f"{intensity_map.shape[1]}x{intensity_map.shape[0]} map"
        )
    if len(kernel) == 1:
        return replace(intensity_map, values=intensity_map.values.copy())
    values = ndimage.convolve1d(intensity_map.values, kernel, axis=0, mode="reflect")
    values = ndimage.convolve1d(values, kernel, axis=1, mode="reflect")
    return IntensityMap(np.clip(values, 0.0, None), intensity_map.angular_pitch, intensity_map.normalization)


def collimation_blur(intensity_map: IntensityMap, geometry: BeamlineGeometry) -> IntensityMap:
    """Top-hat of full width divergence_angle(geometry)"""
    return top_hat_blur(intensity_map, divergence_angle(geometry))


def array_envelope_blur(intensity_map: IntensityMap, layout: TileLayout,
                        geometry: BeamlineGeometry) -> IntensityMap:
    """Incoherent array: each hologram projects from its own position"""
    width = max(layout.extent_x, layout.extent_y) / geometry.grating_to_detector
    return top_hat_blur(intensity_map, width)


def polychromatic_intensity(model: InstrumentModel, species: ParticleSpecies) -> IntensityMap:
    """Velocity-averaged map of one species (array effects included), unit sum"""
    lam_bar = mean_wavelength(model.beam, species)
    mono = normalize(monochromatic_intensity(model, lam_bar), Normalization.UNIT_SUM)

    samples = wavelength_samples(model.beam, species, model.wavelength_sample_count)
    if len(samples) == 1:
        result = mono
    else:
        values = np.zeros_like(mono.values)
        for lam, weight in samples:
            values += weight * rescale_map(mono, lam / lam_bar).values
        result = IntensityMap(values, mono.angular_pitch, Normalization.UNIT_SUM)

    if model.array_mode in (ArrayMode.INCOHERENT, ArrayMode.BOTH):
        result = array_envelope_blur(result, model.layout, model.geometry)
    logger.debug(f"Chromatic average for {species.name}: {len(samples)} wavelengths around {lam_bar * 1e12:.2f} pm")
    return result


def mixture_intensity(per_species: Sequence[Tuple[IntensityMap, float]]) -> IntensityMap:
    """Weighted incoherent sum of unit-sum maps"""
    if not per_species:
        raise DomainError("No species maps to mix")
    reference = per_species[0][0]
    for m, _ in per_species[1:]:
        check_same_grid(reference, m)
    if any(w < 0 for _, w in per_species):
        raise DomainError("Mixture weights must be >= 0")
    if sum(w for _, w in per_species) <= 0:
        raise DomainError("Mixture weights sum to zero")

    values = np.zeros(reference.shape)
    for m, w in per_species:
        if w > 0:
            values += w * normalize(m, Normalization.UNIT_SUM).values
    return normalize(IntensityMap(values, reference.angular_pitch), Normalization.UNIT_SUM)


def species_intensity(model: InstrumentModel, species: ParticleSpecies) -> IntensityMap:
    """Chromatic average, array effects and collimation blur for one species"""
    result = polychromatic_intensity(model, species)
    if model.collimation:
        result = collimation_blur(result, model.geometry)
    return normalize(result, Normalization.UNIT_SUM)


def species_maps(model: InstrumentModel, workers: int = 1) -> Dict[str, IntensityMap]:
    """Unit-sum maps of every species with non-zero weight, in composition order"""
    active = [s for s, w in model.beam.composition if w > 0]
    if workers > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(lambda s: species_intensity(model, s), active))
    else:
        maps = [species_intensity(model, s) for s in active]
    return {s.name: m for s, m in zip(active, maps)}


def simulate(model: InstrumentModel, workers: int = 1) -> IntensityMap:
    """Final mixed, blurred map"""
    maps = species_maps(model, workers=workers)
    weights = dict((s.name, w) for s, w in model.beam.fractions)
    result = mixture_intensity([(m, weights[name]) for name, m in maps.items()])
    logger.info(
        f"🌀 Simulated {len(maps)} species on {result.shape[1]}x{result.shape[0]} bins "
        f"({model.sim_pixel_angle * 1e6:.1f} urad)"
    )
    return result


def _philox(seed: int, stream: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, stream, chunk]))


def _draw_chunk(cdf: np.ndarray, n: int, seed: int, stream: int, chunk: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = _philox(seed, stream, chunk)
    u = rng.random(n)
    jitter = rng.random((2, n))
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    return idx, jitter


def sample_events(intensity_map: IntensityMap, count: int, seed: int, species_tag: str, stream: int = 0,
                  workers: int = 1) -> EventList:
    """Draw impacts from the map as a pixel PMF with uniform jitter in each pixel.

    Chunk c of EVENT_CHUNK draws uses Philox counter [0, 0, stream, c], so
    the output does not depend on `workers`.
    """
    if count < 0:
        raise DomainError(f"count must be >= 0, got {count}")
    if seed < 0:
        raise DomainError(f"seed must be >= 0, got {seed}")
    if count == 0:
        return _empty_events(seed)
    total = intensity_map.total
    if not total > 0:
        raise SamplingError("Cannot sample events from an all-zero map")

    cdf = np.cumsum(intensity_map.values.ravel() / total)
    cdf[-1] = 1.0
    sizes = [min(EVENT_CHUNK, count - start) for start in range(0, count, EVENT_CHUNK)]

    def draw(chunk: int):
        return _draw_chunk(cdf, sizes[chunk], seed, stream, chunk)

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(draw, range(len(sizes))))
    else:
        parts = [draw(c) for c in range(len(sizes))]

    idx = np.concatenate([p[0] for p in parts])
    jitter = np.concatenate([p[1] for p in parts], axis=1)
    rows, cols = np.divmod(idx, intensity_map.shape[1])
    cr, cc = intensity_map.center_index
    pitch = intensity_map.angular_pitch
    frame = pd.DataFrame({
        "theta_x": (cols - cc + jitter[0] - 0.5) * pitch,
        "theta_y": (rows - cr + jitter[1] - 0.5) * pitch,
        "species": np.full(count, species_tag, dtype=object),
    })
    return EventList(frame, seed)


def sample_species_events(maps: Mapping[str, IntensityMap], weights: Mapping[str, float], count: int, seed: int,
                          workers: int = 1) -> EventList:
    """Split `count` over species by a seeded multinomial draw, then sample each map"""
    names = list(maps)
    w = np.array([weights.get(n, 0.0) for n in names], dtype=np.float64)
    if count < 0:
        raise DomainError(f"count must be >= 0, got {count}")
    if count == 0:
        return _empty_events(seed)
    if not w.sum() > 0:
        raise SamplingError("Species weights sum to zero")
    counts = _philox(seed, SPLIT_STREAM, 0).multinomial(count, w / w.sum())

    parts = [sample_events(maps[name], int(n), seed, name, stream=k + 1, workers=workers).frame
             for k, (name, n) in enumerate(zip(names, counts))]
    frame = pd.concat(parts, ignore_index=True)
    logger.info("🎲 Sampled " + ", ".join(f"{n} {name}" for name, n in zip(names, counts)))
    return EventList(frame, seed)


def apply_deflection(events: EventList, model: DeflectionModel, seed: int,
                     species_classes: Optional[Mapping[str, DetectionClass]] = None) -> EventList:
    """Kick θy of every event whose species belongs to the affected class"""
    classes = {name: s.detection_class for name, s in SPECIES_CATALOG.items()}
    classes.update(species_classes or {})
    frame = events.frame.copy()
    tags = frame["species"].to_numpy()
    affected = np.array([classes.get(t, t) == model.affected_class for t in tags], dtype=bool)
    n = int(affected.sum())
    if n:
        noise = np.zeros(n)
        if model.kick_spread > 0:
            noise = _philox(seed, DEFLECTION_STREAM, 0).normal(0.0, model.kick_spread, n)
        theta_y = frame["theta_y"].to_numpy().copy()
        theta_y[affected] += model.mean_kick + noise
        frame["theta_y"] = theta_y
    logger.info(f"💨 Deflected {n} of {len(frame)} events ({model.affected_class.value})")
    return EventList(frame, events.rng_seed, events.rng)


def _half_extent(values: np.ndarray, pixel_angle: float) -> int:
    if len(values) == 0:
        return 0
    return int(np.ceil(np.abs(values).max() / pixel_angle + 0.5))


def accumulate(events: EventList, pixel_angle: float, half_width_x: Optional[float] = None,
               half_width_y: Optional[float] = None) -> DetectorImage:
    """2-D histogram on an odd grid centred on zero angle.

    Without explicit half widths the grid grows to hold every event; with
    them, events outside the detector are dropped (and logged).
    """
    if not pixel_angle > 0:
        raise DomainError(f"pixel_angle must be > 0, got {pixel_angle}")
    kx = (_half_extent(events.theta_x, pixel_angle) if half_width_x is None
          else int(round(half_width_x / pixel_angle)))
    ky = (_half_extent(events.theta_y, pixel_angle) if half_width_y is None
          else int(round(half_width_y / pixel_angle)))
    edges_x = (np.arange(-kx, kx + 2) - 0.5) * pixel_angle
    edges_y = (np.arange(-ky, ky + 2) - 0.5) * pixel_angle
    counts, _, _ = np.histogram2d(events.theta_y, events.theta_x, bins=[edges_y, edges_x])
    counts = counts.astype(np.int64)
    dropped = len(events) - int(counts.sum())
    if dropped:
        logger.warning(f"⚠️ {dropped} events fell outside the detector and were dropped")
    return DetectorImage(counts, pixel_angle, int(counts.sum()))


def species_classes(species: List[ParticleSpecies]) -> Dict[str, DetectionClass]:
    return {s.name: s.detection_class for s in species}

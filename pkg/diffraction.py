#!/usr/bin/env python3
"""
Fraunhofer Diffraction
======================

Scalar far-field propagation of a plane matter wave through a raster mask,
the lattice factor of a periodic hologram array, and topological-charge
measurement of the diffracted vortices.

Angular grids are paraxial: pixel k of an n-pixel axis sits at
(k - n//2) * angular_pitch. The transform kernel is exp(+2πi x θ / λ) with
x measured from the mask centre, so the order at +m λ/d of an
n-dislocation fork carries topological charge +m n.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy import fft, ndimage

from hologram import RasterMask, TileLayout, pixel_centers
from vortex_errors import (DomainError, GridMismatchError, PhysicsValidityError,
                           PropagationError, UnreliableWindingError)

logger = logging.getLogger(__name__)

MAX_TRANSFORM_SIZE = 16384
FRESNEL_WARNING = 0.1
WINDING_SAMPLES = 512
AMPLITUDE_FLOOR = 1e-6


class Normalization(str, Enum):
    UNIT_SUM = "unit_sum"
    PEAK_ONE = "peak_one"
    RAW = "raw"


def _axis_angles(n: int, pitch: float) -> np.ndarray:
    return (np.arange(n) - n // 2) * pitch


@dataclass
class FarField:
    """Complex far-field amplitude on a square-pitch angular grid [θy, θx]"""
    amplitude: np.ndarray
    angular_pitch: float
    wavelength: float
    total_input_flux: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.amplitude.shape

    def angles_x(self) -> np.ndarray:
        return _axis_angles(self.amplitude.shape[1], self.angular_pitch)

    def angles_y(self) -> np.ndarray:
        return _axis_angles(self.amplitude.shape[0], self.angular_pitch)


@dataclass
class IntensityMap:
    """Non-negative probability density on an angular grid [θy, θx]"""
    values: np.ndarray
    angular_pitch: float
    normalization: Normalization = Normalization.RAW

    def __post_init__(self):
        self.normalization = Normalization(self.normalization)
        if not self.angular_pitch > 0:
            raise DomainError(f"angular_pitch must be > 0, got {self.angular_pitch}")
        if np.any(self.values < 0):
            raise DomainError("Intensity values must be non-negative")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def center_index(self) -> Tuple[int, int]:
        """(row, col) of zero angle"""
        return self.values.shape[0] // 2, self.values.shape[1] // 2

    def angles_x(self) -> np.ndarray:
        return _axis_angles(self.values.shape[1], self.angular_pitch)

    def angles_y(self) -> np.ndarray:
        return _axis_angles(self.values.shape[0], self.angular_pitch)

    def same_grid(self, other: "IntensityMap") -> bool:
        return self.shape == other.shape and np.isclose(self.angular_pitch, other.angular_pitch, rtol=1e-12, atol=0)

    def normalized(self, normalization: Union[Normalization, str]) -> "IntensityMap":
        return normalize(self, normalization)


def transform_size(mask: RasterMask, pad_factor: int) -> int:
    if pad_factor < 1:
        raise DomainError(f"pad_factor must be >= 1, got {pad_factor}")
    n = fft.next_fast_len(pad_factor * max(mask.width, mask.height))
    if n > MAX_TRANSFORM_SIZE:
        raise PropagationError(
            f"Transform of {n}x{n} exceeds the {MAX_TRANSFORM_SIZE} limit "
            f"(mask {mask.width}x{mask.height}, pad {pad_factor})"
        )
    return n


def fresnel_number(diameter: float, wavelength: float, distance: float) -> float:
    """D² / (4 λ L)"""
    if not (diameter > 0 and wavelength > 0 and distance > 0):
        raise DomainError("diameter, wavelength and distance must be > 0")
    return diameter ** 2 / (4 * wavelength * distance)


def check_fraunhofer(diameter: float, wavelength: float, distance: float, force: bool = False) -> float:
    """Warn above 0.1 and refuse at Fresnel number >= 1 unless forced"""
    nf = fresnel_number(diameter, wavelength, distance)
    if nf >= 1 and not force:
        raise PhysicsValidityError(
            f"Fresnel number {nf:.3g} >= 1: the far-field model does not apply at {distance:.3g} m"
        )
    if nf > FRESNEL_WARNING:
        logger.warning(f"⚠️ Fresnel number {nf:.3g} exceeds {FRESNEL_WARNING}; far-field results are approximate")
    return nf


def _check_wavelength(wavelength: float) -> None:
    if not wavelength > 0:
        raise DomainError(f"wavelength must be > 0, got {wavelength}")


def far_field(mask: RasterMask, wavelength: float, pad_factor: int = 8, distance: Optional[float] = None,
              workers: Optional[int] = None) -> FarField:
    """Zero-padded discrete Fourier transform of the mask transmission.

    Frequency bin k maps to θ = λ k / (pixel_pitch N). The orthonormal
    transform keeps Σ|A|² equal to Σ t², the open pixel count of a binary
    mask.
    """
    _check_wavelength(wavelength)
    n = transform_size(mask, pad_factor)
    if distance is not None:
        diameter = mask.source_spec.diameter if mask.source_spec else max(mask.width, mask.height) * mask.pixel_pitch
        nf = fresnel_number(diameter, wavelength, distance)
        if nf > FRESNEL_WARNING:
            logger.warning(f"⚠️ Fresnel number {nf:.3g} exceeds {FRESNEL_WARNING}")

    padded = np.zeros((n, n), dtype=np.complex128)
    padded[:mask.height, :mask.width] = mask.transmission
    amplitude = fft.ifft2(padded, norm="ortho", workers=workers)

    # reference the phase to the mask centre instead of pixel (0, 0)
    k = fft.fftfreq(n, d=1.0 / n)
    ramp_x = np.exp(-2j * np.pi * k * (mask.width - 1) / 2.0 / n)
    ramp_y = np.exp(-2j * np.pi * k * (mask.height - 1) / 2.0 / n)
    amplitude *= ramp_y[:, None]
    amplitude *= ramp_x[None, :]
    amplitude = fft.fftshift(amplitude)

    if not np.all(np.isfinite(amplitude)):
        raise PropagationError("Far-field transform produced non-finite values")

    pitch = wavelength / (mask.pixel_pitch * n)
    logger.debug(f"🌀 Far field {n}x{n}, {pitch * 1e6:.3f} urad/bin at λ = {wavelength * 1e12:.2f} pm")
    return FarField(amplitude, pitch, wavelength, mask.open_pixels)


def far_field_window(mask: RasterMask, wavelength: float, angular_pitch: float,
                     half_width_x: float, half_width_y: float) -> FarField:
    """Same transform as far_field, evaluated on an odd symmetric angular grid.

    A matrix DFT lets every wavelength share one grid. At
    angular_pitch = λ / (pixel_pitch N) the values equal far_field's bins.
    """
    _check_wavelength(wavelength)
    if not angular_pitch > 0:
        raise DomainError(f"angular_pitch must be > 0, got {angular_pitch}")
    kx = int(round(half_width_x / angular_pitch))
    ky = int(round(half_width_y / angular_pitch))
    if 2 * max(kx, ky) + 1 > MAX_TRANSFORM_SIZE:
        raise PropagationError(f"Angular window of {2 * max(kx, ky) + 1} bins exceeds {MAX_TRANSFORM_SIZE}")

    n_eff = wavelength / (mask.pixel_pitch * angular_pitch)
    x = pixel_centers(mask.width, mask.pixel_pitch)
    y = pixel_centers(mask.height, mask.pixel_pitch)
    theta_x = np.arange(-kx, kx + 1) * angular_pitch
    theta_y = np.arange(-ky, ky + 1) * angular_pitch
    ex = np.exp(2j * np.pi * np.outer(theta_x, x) / wavelength)
    ey = np.exp(2j * np.pi * np.outer(theta_y, y) / wavelength)

    amplitude = ey @ mask.transmission @ ex.T / n_eff
    if not np.all(np.isfinite(amplitude)):
        raise PropagationError("Windowed transform produced non-finite values")
    return FarField(amplitude, angular_pitch, wavelength, mask.open_pixels)


def _lattice_sum(count: int, pitch: float, angles: np.ndarray, wavelength: float) -> np.ndarray:
    positions = pixel_centers(count, pitch)
    return np.exp(2j * np.pi * np.outer(angles, positions) / wavelength).sum(axis=1)


def array_factor(layout: TileLayout, wavelength: float, field: FarField) -> FarField:
    """Multiply a single-hologram field by the coherent lattice sum.

    Point-sampled: fringes at λ/pitch narrower than the grid pitch alias, in
    which case array_intensity_factor is the right tool.
    """
    _check_wavelength(wavelength)
    if layout.is_single:
        return replace(field, amplitude=field.amplitude.copy())

    lobe = wavelength / (max(layout.count_x * layout.pitch_x, layout.count_y * layout.pitch_y))
    if field.angular_pitch > lobe / 2:
        logger.warning(
            f"⚠️ Array factor undersampled: grid pitch {field.angular_pitch * 1e6:.2f} urad vs "
            f"lattice lobe {lobe * 1e6:.3f} urad"
        )
    ax = _lattice_sum(layout.count_x, layout.pitch_x, field.angles_x(), wavelength)
    ay = _lattice_sum(layout.count_y, layout.pitch_y, field.angles_y(), wavelength)
    amplitude = field.amplitude * ay[:, None] * ax[None, :]
    return replace(field, amplitude=amplitude)


def _binned_lattice_power(count: int, pitch: float, angles: np.ndarray, bin_width: float,
                          wavelength: float) -> np.ndarray:
    # |Σ exp(iqφ)|² = Σ_q (N - |q|) cos(qφ), averaged over the bin
    q = np.arange(1, count)
    phase = 2 * np.pi * np.outer(angles, q) * pitch / wavelength
    smear = np.sinc(q * pitch * bin_width / wavelength)
    return count + 2 * (np.cos(phase) * ((count - q) * smear)).sum(axis=1)


def array_intensity_factor(layout: TileLayout, wavelength: float, angles_x: np.ndarray, angles_y: np.ndarray,
                           bin_width: float = 0.0) -> np.ndarray:
    """|array factor|² averaged over bins of `bin_width`, as a [θy, θx] grid.

    With bin_width = 0 it is the point value, N_x² N_y² on axis.
    """
    _check_wavelength(wavelength)
    fx = _binned_lattice_power(layout.count_x, layout.pitch_x, np.asarray(angles_x), bin_width, wavelength)
    fy = _binned_lattice_power(layout.count_y, layout.pitch_y, np.asarray(angles_y), bin_width, wavelength)
    return np.clip(np.outer(fy, fx), 0.0, None)


def normalize(intensity_map: IntensityMap, normalization: Union[Normalization, str]) -> IntensityMap:
    normalization = Normalization(normalization)
    values = intensity_map.values
    if normalization == Normalization.UNIT_SUM and values.sum() > 0:
        values = values / values.sum()
    elif normalization == Normalization.PEAK_ONE and values.max() > 0:
        values = values / values.max()
    else:
        values = values.copy()
    return IntensityMap(values, intensity_map.angular_pitch, normalization)


def intensity(field: FarField, normalization: Union[Normalization, str] = Normalization.UNIT_SUM) -> IntensityMap:
    """|A|² with the requested normalization"""
    values = field.amplitude.real ** 2 + field.amplitude.imag ** 2
    return normalize(IntensityMap(values, field.angular_pitch, Normalization.RAW), normalization)


def order_center(order: int, wavelength: float, period: float) -> float:
    """Paraxial diffraction angle m λ / d"""
    if not period > 0:
        raise DomainError(f"period must be > 0, got {period}")
    return order * wavelength / period


def _fractional_index(angles: np.ndarray, n: int, pitch: float) -> np.ndarray:
    return angles / pitch + n // 2


def _sample(values: np.ndarray, pitch: float, theta_x: np.ndarray, theta_y: np.ndarray) -> np.ndarray:
    rows = _fractional_index(theta_y, values.shape[0], pitch)
    cols = _fractional_index(theta_x, values.shape[1], pitch)
    if rows.min() < 0 or cols.min() < 0 or rows.max() > values.shape[0] - 1 or cols.max() > values.shape[1] - 1:
        raise DomainError("Sampling circle leaves the angular grid")
    coords = np.vstack([rows, cols])
    if np.iscomplexobj(values):
        return (ndimage.map_coordinates(values.real, coords, order=1)
                + 1j * ndimage.map_coordinates(values.imag, coords, order=1))
    return ndimage.map_coordinates(values, coords, order=1)


def ring_radius(source: Union[FarField, IntensityMap], center: Tuple[float, float], max_radius: float,
                samples: int = 256) -> float:
    """Radius of the brightest azimuthal average around `center` = (θx, θy)"""
    if isinstance(source, FarField):
        values = np.abs(source.amplitude) ** 2
    else:
        values = source.values
    pitch = source.angular_pitch
    radii = np.arange(0.0, max_radius + pitch / 4, pitch / 2)
    phi = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    tx = center[0] + np.outer(radii, np.cos(phi))
    ty = center[1] + np.outer(radii, np.sin(phi))
    profile = _sample(values, pitch, tx.ravel(), ty.ravel()).reshape(tx.shape).mean(axis=1)
    return float(radii[int(np.argmax(profile))])


def measure_topological_charge(field: FarField, center: Tuple[float, float], radius: float,
                               samples: int = WINDING_SAMPLES) -> float:
    """Phase accumulated around a circle, in units of 2π.

    The amplitude is bilinearly interpolated at `samples` points on the
    counter-clockwise circle; wrapped neighbour phase differences are summed.
    """
    if not radius > 0:
        raise DomainError(f"radius must be > 0, got {radius}")
    phi = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    tx = center[0] + radius * np.cos(phi)
    ty = center[1] + radius * np.sin(phi)
    values = _sample(field.amplitude, field.angular_pitch, tx, ty)

    floor = AMPLITUDE_FLOOR * np.abs(field.amplitude).max()
    weakest = np.abs(values).min()
    if weakest <= floor:
        raise UnreliableWindingError(
            f"Amplitude {weakest:.3g} on the winding circle is below the floor {floor:.3g}; "
            f"move the circle onto the bright ring"
        )
    steps = np.angle(np.roll(values, -1) / values)
    return float(steps.sum() / (2 * np.pi))


def check_same_grid(first: IntensityMap, second: IntensityMap) -> None:
    if not first.same_grid(second):
        raise GridMismatchError(
            f"Angular grids differ: {first.shape} @ {first.angular_pitch:.6g} rad vs "
            f"{second.shape} @ {second.angular_pitch:.6g} rad"
        )

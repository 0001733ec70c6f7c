#!/usr/bin/env python3
"""
Hologram Design
===============

Binary fork-dislocation amplitude masks built with the computer-generated
holography rule

    open  <=>  r <= D/2  and  frac(u/d - n*phi/2pi) < f

plus van der Waals narrowing, periodic tiling and fabrication export.

Raster convention: occupancy[row, col] with row index increasing along +y
and column index along +x. Pixel j of an N-pixel axis sits at
(j - (N-1)/2) * pixel_pitch, so the grid is symmetric about its centre.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from adapters import mask_formats
from vortex_errors import DomainError, ResolutionError

logger = logging.getLogger(__name__)

DEFAULT_PIXEL_PITCH = 2.5e-9
MIN_SAMPLES_PER_PERIOD = 20


class FringeAxis(str, Enum):
    X = "x"
    Y = "y"


class MaskFormat(str, Enum):
    RASTER_BITMAP = "raster_bitmap"
    VECTOR_POLYGONS = "vector_polygons"


@dataclass(frozen=True)
class HologramSpec:
    """Parametric fork grating"""
    period: float
    dislocations: int
    diameter: float
    open_fraction: float
    fringe_axis: FringeAxis = FringeAxis.X

    def __post_init__(self):
        if not self.period > 0:
            raise DomainError(f"period must be > 0, got {self.period}")
        if not self.diameter > 0:
            raise DomainError(f"diameter must be > 0, got {self.diameter}")
        if not 0 < self.open_fraction < 1:
            raise DomainError(f"open_fraction must be in (0, 1), got {self.open_fraction}")
        if int(self.dislocations) != self.dislocations or self.dislocations < 0:
            raise DomainError(f"dislocations must be an integer >= 0, got {self.dislocations}")
        object.__setattr__(self, "dislocations", int(self.dislocations))
        object.__setattr__(self, "fringe_axis", FringeAxis(self.fringe_axis))

    @property
    def open_width(self) -> float:
        return self.open_fraction * self.period

    def with_open_fraction(self, open_fraction: float) -> "HologramSpec":
        return replace(self, open_fraction=open_fraction)


@dataclass(frozen=True)
class TileLayout:
    """Periodic repetition of one hologram"""
    pitch_x: float
    pitch_y: float
    count_x: int = 1
    count_y: int = 1

    def __post_init__(self):
        if not (self.pitch_x > 0 and self.pitch_y > 0):
            raise DomainError(f"Tile pitches must be > 0, got ({self.pitch_x}, {self.pitch_y})")
        if self.count_x < 1 or self.count_y < 1:
            raise DomainError(f"Tile counts must be >= 1, got ({self.count_x}, {self.count_y})")

    @property
    def extent_x(self) -> float:
        return self.count_x * self.pitch_x

    @property
    def extent_y(self) -> float:
        return self.count_y * self.pitch_y

    @property
    def is_single(self) -> bool:
        return self.count_x == 1 and self.count_y == 1

    def check_fits(self, spec: HologramSpec) -> None:
        if self.pitch_x < spec.diameter or self.pitch_y < spec.diameter:
            raise DomainError(
                f"Tile pitch ({self.pitch_x * 1e9:.0f} x {self.pitch_y * 1e9:.0f} nm) is smaller than "
                f"the hologram diameter ({spec.diameter * 1e9:.0f} nm)"
            )


@dataclass
class RasterMask:
    """Discretized transmission screen.

    `occupancy` is boolean (True = transmitting) or, for antialiased
    rasters, a float open-area coverage in [0, 1].
    """
    occupancy: np.ndarray
    pixel_pitch: float
    origin: Tuple[float, float] = (0.0, 0.0)
    source_spec: Optional[HologramSpec] = None

    def __post_init__(self):
        if not self.pixel_pitch > 0:
            raise DomainError(f"pixel_pitch must be > 0, got {self.pixel_pitch}")
        if self.occupancy.ndim != 2:
            raise DomainError(f"occupancy must be 2-D, got shape {self.occupancy.shape}")

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def is_binary(self) -> bool:
        return self.occupancy.dtype == bool

    @property
    def transmission(self) -> np.ndarray:
        return self.occupancy.astype(np.float64)

    @property
    def open_pixels(self) -> float:
        return float(self.transmission.sum())

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Physical x (columns) and y (rows) of pixel centres"""
        return (pixel_centers(self.width, self.pixel_pitch) + self.origin[0],
                pixel_centers(self.height, self.pixel_pitch) + self.origin[1])


@dataclass
class MaskStatistics:
    width: int
    height: int
    open_pixels: float
    disk_pixels: int
    open_fraction_in_disk: float
    open_area: float
    blocked_islands: int


def pixel_centers(count: int, pitch: float) -> np.ndarray:
    return (np.arange(count) - (count - 1) / 2.0) * pitch


def _fringe_phase(x: np.ndarray, y: np.ndarray, spec: HologramSpec) -> np.ndarray:
    u = x if spec.fringe_axis == FringeAxis.X else y
    return u / spec.period - spec.dislocations * np.arctan2(y, x) / (2 * np.pi)


def _aperture(x: np.ndarray, y: np.ndarray, spec: HologramSpec) -> np.ndarray:
    r = np.hypot(x, y)
    # r = 0 is blocked: the azimuth is undefined there
    return (r <= spec.diameter / 2) & (r > 0)


def fork_transmission(x, y, spec: HologramSpec):
    """True where the fork grating transmits. Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = _fringe_phase(x, y, spec)
    result = _aperture(x, y, spec) & ((s - np.floor(s)) < spec.open_fraction)
    return bool(result) if result.ndim == 0 else result


def _open_cumulative(s: np.ndarray, open_fraction: float) -> np.ndarray:
    """Open length of [0, s) in fringe units"""
    whole = np.floor(s)
    return whole * open_fraction + np.minimum(s - whole, open_fraction)


def _coverage(x: np.ndarray, y: np.ndarray, spec: HologramSpec, pixel_pitch: float) -> np.ndarray:
    s = _fringe_phase(x, y, spec)
    delta = pixel_pitch / spec.period
    cov = (_open_cumulative(s + delta / 2, spec.open_fraction)
           - _open_cumulative(s - delta / 2, spec.open_fraction)) / delta
    return np.where(_aperture(x, y, spec), np.clip(cov, 0.0, 1.0), 0.0)


def rasterize(spec: HologramSpec, pixel_pitch: float = DEFAULT_PIXEL_PITCH, extent: Optional[float] = None,
              antialias: bool = False, workers: int = 1) -> RasterMask:
    """Sample the fork rule at pixel centres on a square grid.

    extent defaults to the hologram diameter. With `antialias` each pixel
    holds the open fraction of its width along the fringe axis, making the
    duty cycle a continuous parameter. Row blocks are evaluated in parallel;
    the result does not depend on `workers`.
    """
    if not pixel_pitch > 0:
        raise DomainError(f"pixel_pitch must be > 0, got {pixel_pitch}")
    if pixel_pitch > spec.period / MIN_SAMPLES_PER_PERIOD * (1 + 1e-9):
        raise ResolutionError(
            f"Pixel pitch {pixel_pitch * 1e9:.3g} nm is too coarse for a {spec.period * 1e9:.3g} nm period "
            f"(need <= period/{MIN_SAMPLES_PER_PERIOD})"
        )
    extent = spec.diameter if extent is None else extent
    if extent < spec.diameter * (1 - 1e-9):
        raise DomainError(f"extent {extent} is smaller than the hologram diameter {spec.diameter}")

    n = int(np.ceil(extent / pixel_pitch - 1e-9))
    xs = pixel_centers(n, pixel_pitch)

    def build(rows: np.ndarray) -> np.ndarray:
        x, y = np.meshgrid(xs, xs[rows])
        if antialias:
            return _coverage(x, y, spec, pixel_pitch)
        return fork_transmission(x, y, spec)

    blocks = np.array_split(np.arange(n), max(1, min(workers, n)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(build, blocks))
    else:
        parts = [build(rows) for rows in blocks]

    mask = RasterMask(np.vstack(parts), pixel_pitch, source_spec=spec)
    logger.debug(f"Rasterized {spec} on {n}x{n} pixels")
    return mask


def narrowed_spec(spec: HologramSpec, margin: float) -> HologramSpec:
    """Analytic van der Waals narrowing: each slit edge recedes by `margin`"""
    if margin < 0:
        raise DomainError(f"margin must be >= 0, got {margin}")
    open_fraction = spec.open_fraction - 2 * margin / spec.period
    if open_fraction <= 0:
        raise DomainError(
            f"Erosion margin {margin * 1e9:.2f} nm closes the {spec.open_width * 1e9:.2f} nm slits completely"
        )
    return spec.with_open_fraction(open_fraction)


def _disk_structure(radius_px: float) -> np.ndarray:
    r = int(np.floor(radius_px + 1e-9))
    i, j = np.mgrid[-r:r + 1, -r:r + 1]
    return i ** 2 + j ** 2 <= radius_px ** 2 + 1e-9


def erode_open_regions(mask: RasterMask, margin: float) -> RasterMask:
    """Morphological erosion of the open set by a disk of radius `margin`.

    The region outside the raster counts as blocked.
    """
    if margin < 0:
        raise DomainError(f"margin must be >= 0, got {margin}")
    if not mask.is_binary:
        raise DomainError("Morphological erosion needs a binary mask; use narrowed_spec for coverage rasters")
    if margin == 0:
        return replace(mask, occupancy=mask.occupancy.copy())

    structure = _disk_structure(margin / mask.pixel_pitch)
    eroded = ndimage.binary_erosion(mask.occupancy, structure=structure, border_value=0)
    if mask.occupancy.any() and not eroded.any():
        logger.warning(f"⚠️ Erosion by {margin * 1e9:.2f} nm blocked every open pixel")
    return replace(mask, occupancy=eroded)


def disk_mask(diameter: float, pixel_pitch: float = DEFAULT_PIXEL_PITCH, extent: Optional[float] = None) -> RasterMask:
    """All-open circular aperture"""
    if not diameter > 0:
        raise DomainError(f"diameter must be > 0, got {diameter}")
    extent = diameter if extent is None else extent
    n = int(np.ceil(extent / pixel_pitch - 1e-9))
    xs = pixel_centers(n, pixel_pitch)
    x, y = np.meshgrid(xs, xs)
    return RasterMask(np.hypot(x, y) <= diameter / 2, pixel_pitch)


def straight_grating_mask(period: float, open_fraction: float, pixel_pitch: float = DEFAULT_PIXEL_PITCH,
                          periods: int = 6, height: Optional[int] = None) -> RasterMask:
    """Aperture-free straight-slit grating, an integer number of periods wide"""
    px_per_period = period / pixel_pitch
    if abs(px_per_period - round(px_per_period)) > 1e-6:
        raise ResolutionError(f"Period {period} is not a whole number of {pixel_pitch} pixels")
    if not 0 < open_fraction < 1:
        raise DomainError(f"open_fraction must be in (0, 1), got {open_fraction}")
    n = int(round(px_per_period)) * periods
    u = pixel_centers(n, pixel_pitch) / period
    row = (u - np.floor(u)) < open_fraction
    return RasterMask(np.tile(row, (height or n, 1)), pixel_pitch)


def tile_mask(mask: RasterMask, layout: TileLayout) -> RasterMask:
    """Repeat one hologram raster over the array layout.

    Each cell is one pitch wide; the mask is centred in it and cropped if
    its extent exceeds the pitch.
    """
    cells = []
    for pitch, size in ((layout.pitch_y, mask.height), (layout.pitch_x, mask.width)):
        cell = pitch / mask.pixel_pitch
        if abs(cell - round(cell)) > 1e-6:
            raise ResolutionError(f"Tile pitch {pitch} is not a whole number of {mask.pixel_pitch} pixels")
        cells.append(int(round(cell)))
    cell_h, cell_w = cells

    cell = np.zeros((cell_h, cell_w), dtype=mask.occupancy.dtype)
    src_r0 = max(0, (mask.height - cell_h) // 2)
    src_c0 = max(0, (mask.width - cell_w) // 2)
    h = min(mask.height, cell_h)
    w = min(mask.width, cell_w)
    dst_r0 = (cell_h - h) // 2
    dst_c0 = (cell_w - w) // 2
    cell[dst_r0:dst_r0 + h, dst_c0:dst_c0 + w] = mask.occupancy[src_r0:src_r0 + h, src_c0:src_c0 + w]

    tiled = np.tile(cell, (layout.count_y, layout.count_x))
    logger.info(f"🧩 Tiled {layout.count_x}x{layout.count_y} holograms into {tiled.shape[1]}x{tiled.shape[0]} pixels")
    return RasterMask(tiled, mask.pixel_pitch, origin=mask.origin, source_spec=mask.source_spec)


def mask_statistics(mask: RasterMask, spec: Optional[HologramSpec] = None) -> MaskStatistics:
    spec = spec or mask.source_spec
    x, y = mask.coordinates()
    xx, yy = np.meshgrid(x - mask.origin[0], y - mask.origin[1])
    disk = np.hypot(xx, yy) <= (spec.diameter / 2 if spec else np.inf)
    open_in_disk = float(mask.transmission[disk].sum())
    _, islands = ndimage.label(~(mask.transmission > 0.5))
    return MaskStatistics(
        width=mask.width,
        height=mask.height,
        open_pixels=mask.open_pixels,
        disk_pixels=int(disk.sum()),
        open_fraction_in_disk=open_in_disk / max(int(disk.sum()), 1),
        open_area=mask.open_pixels * mask.pixel_pitch ** 2,
        blocked_islands=int(islands),
    )


def export_mask(mask: RasterMask, fmt: Union[MaskFormat, str], path: Optional[Union[str, Path]] = None) -> bytes:
    """Serialize a binary mask for fabrication; writes `path` when given"""
    fmt = MaskFormat(fmt)
    blocked = ~(mask.transmission > 0.5)
    if fmt == MaskFormat.RASTER_BITMAP:
        data = mask_formats.encode_pbm(blocked)
    else:
        data = mask_formats.encode_svg(blocked, mask.pixel_pitch, spec=mask.source_spec)
    if path is not None:
        Path(path).write_bytes(data)
        logger.info(f"✅ Mask written: {path} ({fmt.value}, {len(data)} bytes)")
    return data


def read_pbm(data: Union[bytes, str, Path], pixel_pitch: float = DEFAULT_PIXEL_PITCH) -> RasterMask:
    """Re-import a plain bitmap written by export_mask"""
    if isinstance(data, (str, Path)):
        source = str(data)
        data = Path(data).read_bytes()
    else:
        source = "<bytes>"
    blocked = mask_formats.decode_pbm(data, source=source)
    return RasterMask(~blocked, pixel_pitch)

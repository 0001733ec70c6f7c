#!/usr/bin/env python3
"""
Profile Analysis and Fitting
============================

Line cuts through detector images or simulated maps, diffraction-order
peak finding, dark-core contrast of vortex rings, and least-squares fitting
of instrument parameters against the forward model.

Fitting profiles out amplitude and baseline by bounded linear least squares
and runs a bounded Nelder-Mead simplex over the remaining parameters, from
the start point plus seeded random restarts.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from jinja2 import Template
from scipy import ndimage, optimize, stats

from beam_source import ParticleSpecies
from diffraction import IntensityMap, order_center
from instrument import DetectorImage, ErosionMode, EventList, InstrumentModel, simulate
from vortex_errors import DomainError, FitAbortError

logger = logging.getLogger(__name__)

REPORT_TEMPLATE_PATH = Path(__file__).resolve().parent / "fit_report_template.txt"
CONTRAST_CAP = 1e6


class Weighting(str, Enum):
    POISSON = "poisson"
    UNIFORM = "uniform"


@dataclass
class LineCut:
    positions: np.ndarray
    values: np.ndarray
    box_width: float
    box_height: float
    center_y: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.positions.shape != self.values.shape:
            raise DomainError("Line-cut positions and values differ in length")
        if len(self.positions) > 1 and np.any(np.diff(self.positions) <= 0):
            raise DomainError("Line-cut positions must be strictly increasing")


@dataclass
class OrderPeak:
    order: int
    position: float
    height: float
    found: bool = True
    lobes: Optional[Tuple[float, float]] = None


def _as_map(image: Union[DetectorImage, IntensityMap]) -> Tuple[np.ndarray, float]:
    if isinstance(image, DetectorImage):
        return image.counts.astype(np.float64), image.pixel_angle
    return image.values, image.angular_pitch


def _overlap_weights(n: int, pitch: float, lo: float, hi: float) -> np.ndarray:
    """Fraction of each pixel of an n-pixel centred axis inside [lo, hi]"""
    centers = (np.arange(n) - n // 2) * pitch
    left = np.maximum(centers - pitch / 2, lo)
    right = np.minimum(centers + pitch / 2, hi)
    return np.clip(right - left, 0.0, None) / pitch


def extract_line_cut(image: Union[DetectorImage, IntensityMap], center_y: float, box_width: float,
                     box_height: float, positions: Optional[Sequence[float]] = None) -> LineCut:
    """Sum box_width x box_height boxes stepped along θx.

    Partial pixels contribute by their overlap fraction. Positions default
    to every multiple of box_width whose box fits the image.
    """
    values, pitch = _as_map(image)
    if not (box_width > 0 and box_height > 0):
        raise DomainError("Box width and height must be > 0")
    rows, cols = values.shape
    x_lo, x_hi = (-(cols // 2) - 0.5) * pitch, (cols - 1 - cols // 2 + 0.5) * pitch
    y_lo, y_hi = (-(rows // 2) - 0.5) * pitch, (rows - 1 - rows // 2 + 0.5) * pitch
    tol = 1e-9 * pitch

    if positions is None:
        k_max = int(np.floor((min(-x_lo, x_hi) - box_width / 2 + tol) / box_width))
        if k_max < 0:
            raise DomainError(f"Box width {box_width * 1e6:.1f} urad exceeds the image")
        positions = np.arange(-k_max, k_max + 1) * box_width
    positions = np.asarray(positions, dtype=np.float64)

    if (center_y - box_height / 2 < y_lo - tol or center_y + box_height / 2 > y_hi + tol
            or positions.min() - box_width / 2 < x_lo - tol or positions.max() + box_width / 2 > x_hi + tol):
        raise DomainError("Line-cut box exceeds the image")

    wy = _overlap_weights(rows, pitch, center_y - box_height / 2, center_y + box_height / 2)
    column_sums = wy @ values
    wx = np.stack([_overlap_weights(cols, pitch, p - box_width / 2, p + box_width / 2) for p in positions])
    return LineCut(positions, wx @ column_sums, box_width, box_height, center_y)


def _local_maxima(values: np.ndarray) -> np.ndarray:
    interior = np.arange(1, len(values) - 1)
    is_max = (values[interior] >= values[interior - 1]) & (values[interior] > values[interior + 1])
    return interior[is_max]


def find_order_peaks(cut: LineCut, wavelength: float, period: float, max_order: int,
                     dislocations: int = 0) -> List[OrderPeak]:
    """Maxima within ±λ/(4d) of each order centre m λ/d.

    Vortex orders (|m| n >= 1) show two lobes on a cut through the ring; the
    reported position is their midpoint and the height the larger lobe. A
    window without a local maximum gives found=False.
    """
    span = max_order * wavelength / period
    if cut.positions.min() > -span or cut.positions.max() < span:
        raise DomainError(f"Line cut does not span ±{span * 1e3:.3f} mrad")
    half = wavelength / (4 * period)
    maxima = _local_maxima(cut.values)
    peaks = []
    for m in range(-max_order, max_order + 1):
        center = order_center(m, wavelength, period)
        inside = maxima[np.abs(cut.positions[maxima] - center) <= half]
        if len(inside) == 0:
            peaks.append(OrderPeak(m, center, 0.0, found=False))
            continue
        best = inside[np.argmax(cut.values[inside])]
        if abs(m) * dislocations >= 1:
            left = inside[cut.positions[inside] < center]
            right = inside[cut.positions[inside] >= center]
            if len(left) and len(right):
                lo = left[np.argmax(cut.values[left])]
                hi = right[np.argmax(cut.values[right])]
                lobes = (float(cut.positions[lo]), float(cut.positions[hi]))
                height = float(max(cut.values[lo], cut.values[hi]))
                peaks.append(OrderPeak(m, 0.5 * (lobes[0] + lobes[1]), height, lobes=lobes))
                continue
        peaks.append(OrderPeak(m, float(cut.positions[best]), float(cut.values[best])))
    return peaks


def find_unassigned_peaks(cut: LineCut, wavelength: float, period: float, max_order: int,
                          min_fraction: float = 0.01) -> List[Tuple[float, float]]:
    """Local maxima outside every order window, above min_fraction of the cut maximum"""
    half = wavelength / (4 * period)
    centers = np.array([order_center(m, wavelength, period) for m in range(-max_order, max_order + 1)])
    threshold = min_fraction * cut.values.max()
    found = []
    for i in _local_maxima(cut.values):
        pos = cut.positions[i]
        if np.all(np.abs(pos - centers) > half) and cut.values[i] >= threshold:
            found.append((float(pos), float(cut.values[i])))
    return found


def _sample_map(values: np.ndarray, pitch: float, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    rows = ty / pitch + values.shape[0] // 2
    cols = tx / pitch + values.shape[1] // 2
    if rows.min() < 0 or cols.min() < 0 or rows.max() > values.shape[0] - 1 or cols.max() > values.shape[1] - 1:
        raise DomainError("Ring lies outside the map")
    return ndimage.map_coordinates(values, np.vstack([rows, cols]), order=1)


def ring_dark_core_contrast(intensity_map: IntensityMap, center: Tuple[float, float], ring_radius: float,
                            samples: int = 256) -> float:
    """Mean ring intensity over azimuth divided by the intensity at the centre.

    A zero centre returns CONTRAST_CAP.
    """
    values, pitch = _as_map(intensity_map)
    phi = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    ring = _sample_map(values, pitch, center[0] + ring_radius * np.cos(phi),
                       center[1] + ring_radius * np.sin(phi)).mean()
    core = float(_sample_map(values, pitch, np.array([center[0]]), np.array([center[1]]))[0])
    if core <= 0 or ring / core > CONTRAST_CAP:
        return CONTRAST_CAP
    return float(ring / core)


def theta_y_shift_test(before: EventList, after: EventList, center_x: float, half_width: float) -> float:
    """Two-sample KS p-value of θy inside the strip |θx - center_x| < half_width"""
    a = before.theta_y[np.abs(before.theta_x - center_x) < half_width]
    b = after.theta_y[np.abs(after.theta_x - center_x) < half_width]
    if len(a) == 0 or len(b) == 0:
        raise DomainError(f"No events in the strip at {center_x * 1e3:.3f} mrad")
    return float(stats.ks_2samp(a, b).pvalue)


@dataclass
class FitParameter:
    value: float
    lower: float
    upper: float
    free: bool = True

    def __post_init__(self):
        if self.lower > self.upper:
            raise DomainError(f"Bounds [{self.lower}, {self.upper}] are inverted")
        if not self.lower <= self.value <= self.upper:
            raise DomainError(f"Start value {self.value} outside bounds [{self.lower}, {self.upper}]")


def fit_bound_problems(width: FitParameter, fwhm: FitParameter, weights: Dict[str, FitParameter],
                       period: Optional[float] = None) -> List[Tuple[str, str]]:
    """(bound, reason) for every bound the forward model cannot be evaluated at.

    The width must stay inside (0, period) and the FWHM inside [0, 1); the
    period check is skipped when no period is given.
    """
    problems = []
    if width.lower <= 0:
        problems.append(("open_width_effective.min", f"must be > 0, got {width.lower}"))
    if period is not None and width.upper >= period:
        problems.append(("open_width_effective.max", f"must be below the period {period}, got {width.upper}"))
    if fwhm.lower < 0:
        problems.append(("fractional_fwhm.min", f"must be >= 0, got {fwhm.lower}"))
    if fwhm.upper >= 1:
        problems.append(("fractional_fwhm.max", f"must be < 1, got {fwhm.upper}"))
    for name, p in weights.items():
        if p.lower < 0:
            problems.append((f"species_weights.{name}.min", f"must be >= 0, got {p.lower}"))
    return problems


@dataclass
class FitModel:
    """Fit parameters and settings.

    Species weights are relative; the mixture is renormalized to one, so
    fix at least one weight to remove the degeneracy with amplitude.
    """
    open_width_effective: FitParameter
    fractional_fwhm: FitParameter
    species_weights: Dict[str, FitParameter] = field(default_factory=dict)
    amplitude: FitParameter = field(default_factory=lambda: FitParameter(1.0, 0.0, np.inf))
    baseline: Optional[FitParameter] = None
    weighting: Weighting = Weighting.UNIFORM
    restarts: int = 3
    max_iterations: int = 500
    tolerance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.weighting = Weighting(self.weighting)
        problems = self.bound_problems()
        if problems:
            raise DomainError("; ".join(f"{name}: {reason}" for name, reason in problems))
        if self.restarts < 0 or self.max_iterations < 1:
            raise DomainError("restarts must be >= 0 and max_iterations >= 1")

    def bound_problems(self, period: Optional[float] = None) -> List[Tuple[str, str]]:
        return fit_bound_problems(self.open_width_effective, self.fractional_fwhm, self.species_weights, period)

    def nonlinear(self) -> Dict[str, FitParameter]:
        params = {"open_width_effective": self.open_width_effective, "fractional_fwhm": self.fractional_fwhm}
        params.update({f"weight:{name}": p for name, p in self.species_weights.items()})
        return params


@dataclass
class FitResult:
    parameters: Dict[str, float]
    amplitude: float
    baseline: float
    residual: float
    initial_residual: float
    iterations: int
    evaluations: int
    converged: bool
    best_fit: np.ndarray
    positions: np.ndarray
    message: str = ""

    @property
    def open_width_effective(self) -> float:
        return self.parameters["open_width_effective"]


def model_with_parameters(forward: InstrumentModel, params: Dict[str, float],
                          species: Optional[Dict[str, ParticleSpecies]] = None) -> InstrumentModel:
    """Forward model at the given effective width, FWHM and species weights"""
    width = params["open_width_effective"]
    period = forward.spec.period
    if not 0 < width < period:
        raise DomainError(f"open_width_effective must be in (0, {period}), got {width}")
    spec = forward.spec
    margin = (spec.open_width - width) / 2
    if margin < 0:
        # wider than fabricated: widen the design and drop erosion
        spec = spec.with_open_fraction(width / period)
        margin = 0.0

    catalog = {s.name: s for s in forward.beam.species}
    catalog.update(species or {})
    weights = dict((s.name, w) for s, w in forward.beam.composition)
    for key, value in params.items():
        if key.startswith("weight:"):
            weights[key[len("weight:"):]] = value
    unknown = sorted(set(weights) - set(catalog))
    if unknown:
        raise DomainError(f"Unknown species in fit weights: {', '.join(unknown)}")
    composition = tuple((catalog[name], w) for name, w in weights.items() if w > 0)
    if not composition:
        raise DomainError("All species weights are zero")

    beam = replace(forward.beam, fractional_fwhm=params["fractional_fwhm"], composition=composition)
    return replace(forward, beam=beam, spec=spec, erosion_margin=margin, erosion_mode=ErosionMode.ANALYTIC)


def simulate_line_cut(forward: InstrumentModel, params: Dict[str, float], positions: np.ndarray, center_y: float,
                      box_width: float, box_height: float,
                      species: Optional[Dict[str, ParticleSpecies]] = None) -> np.ndarray:
    """Full pipeline (erosion, far field, array, chromatic, blur, mixture) cut at `positions`"""
    model = model_with_parameters(forward, params, species)
    return extract_line_cut(simulate(model), center_y, box_width, box_height, positions).values


class _Objective:
    """Weighted residual with amplitude and baseline profiled out"""

    def __init__(self, data: LineCut, model: FitModel, forward: InstrumentModel,
                 species: Optional[Dict[str, ParticleSpecies]]):
        self.data = data
        self.model = model
        self.forward = forward
        self.species = species
        self.params = model.nonlinear()
        self.free = [name for name, p in self.params.items() if p.free]
        if model.weighting == Weighting.POISSON:
            self.sqrt_w = 1.0 / np.sqrt(np.maximum(data.values, 1.0))
        else:
            self.sqrt_w = np.ones_like(data.values)
        self.baseline = model.baseline or FitParameter(0.0, 0.0, 0.05 * max(data.values.max(), 0.0))

    def values(self, z: np.ndarray) -> Dict[str, float]:
        values = {name: p.value for name, p in self.params.items()}
        for name, zi in zip(self.free, z):
            p = self.params[name]
            values[name] = p.lower + float(np.clip(zi, 0.0, 1.0)) * (p.upper - p.lower)
        return values

    def start(self) -> np.ndarray:
        return np.array([(self.params[n].value - self.params[n].lower) / (self.params[n].upper - self.params[n].lower)
                         if self.params[n].upper > self.params[n].lower else 0.0 for n in self.free])

    def linear(self, curve: np.ndarray) -> Tuple[float, float, float]:
        """Best amplitude, baseline and residual for a model curve"""
        amp, base = self.model.amplitude, self.baseline
        target = self.data.values.copy()
        columns, lower, upper, names = [], [], [], []
        for name, p, col in (("amplitude", amp, curve), ("baseline", base, np.ones_like(curve))):
            if p.free and p.upper > p.lower:
                columns.append(col)
                lower.append(p.lower)
                upper.append(p.upper)
                names.append(name)
            else:
                target = target - p.value * col
        solved = {"amplitude": amp.value, "baseline": base.value}
        if columns:
            a = np.column_stack(columns) * self.sqrt_w[:, None]
            x = optimize.lsq_linear(a, target * self.sqrt_w, bounds=(lower, upper)).x
            solved.update(zip(names, x.tolist()))
        resid = self.data.values - solved["amplitude"] * curve - solved["baseline"]
        return solved["amplitude"], solved["baseline"], float(np.sum((resid * self.sqrt_w) ** 2))

    def curve(self, values: Dict[str, float]) -> np.ndarray:
        return simulate_line_cut(self.forward, values, self.data.positions, self.data.center_y,
                                 self.data.box_width, self.data.box_height, self.species)

    def __call__(self, z: np.ndarray) -> float:
        values = self.values(z)
        residual = self.linear(self.curve(values))[2]
        if not np.isfinite(residual):
            raise FitAbortError(f"Non-finite residual at parameters {values}")
        return residual


def _run_simplex(objective: _Objective, z0: np.ndarray, model: FitModel, f_scale: float) -> optimize.OptimizeResult:
    return optimize.minimize(
        objective, z0, method="Nelder-Mead",
        bounds=[(0.0, 1.0)] * len(z0),
        options={"maxiter": model.max_iterations, "xatol": 1e-6, "fatol": model.tolerance * f_scale},
    )


def fit_profile(data: LineCut, model: FitModel, forward: InstrumentModel,
                species: Optional[Dict[str, ParticleSpecies]] = None, workers: int = 1) -> FitResult:
    """Least-squares fit of the forward model to a line cut.

    Simplex runs start from the given values and from `restarts` seeded
    random points inside the bounds; the lowest residual wins (ties go to
    the earliest run). Runs may execute concurrently without changing the
    result.
    """
    problems = model.bound_problems(forward.spec.period)
    if problems:
        raise DomainError("; ".join(f"{name}: {reason}" for name, reason in problems))
    objective = _Objective(data, model, forward, species)
    z0 = objective.start()
    start_values = objective.values(z0)
    start_curve = objective.curve(start_values)
    amp0, base0, initial = objective.linear(start_curve)
    if not np.isfinite(initial):
        raise FitAbortError(f"Non-finite residual at start parameters {start_values}")

    scale = max(float(np.sum((data.values * objective.sqrt_w) ** 2)), np.finfo(float).tiny)
    if not objective.free or initial <= model.tolerance * scale:
        logger.info(f"✅ Fit start already at tolerance (residual {initial:.6g})")
        return FitResult(start_values, amp0, base0, initial, initial, 0, 1, True, amp0 * start_curve + base0,
                         data.positions, "start point within tolerance")

    rng = np.random.Generator(np.random.Philox(key=model.seed))
    starts = [z0] + [rng.random(len(z0)) for _ in range(model.restarts)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(lambda z: _run_simplex(objective, z, model, initial), starts))
    else:
        runs = [_run_simplex(objective, z, model, initial) for z in starts]

    best_index = min(range(len(runs)), key=lambda i: (runs[i].fun, i))
    best = runs[best_index]
    evaluations = sum(int(r.nfev) for r in runs) + 1

    if best.fun > initial:
        logger.warning("⚠️ No simplex run improved on the start point")
        return FitResult(start_values, amp0, base0, initial, initial, int(best.nit), evaluations, False,
                         amp0 * start_curve + base0, data.positions, "no improvement over start")

    values = objective.values(best.x)
    curve = objective.curve(values)
    amp, base, residual = objective.linear(curve)
    converged = bool(best.success)
    logger.info(
        f"{'✅' if converged else '⚠️'} Fit {'converged' if converged else 'did not converge'}: "
        f"width {values['open_width_effective'] * 1e9:.2f} nm, residual {initial:.6g} -> {residual:.6g} "
        f"(run {best_index}, {best.nit} iterations)"
    )
    return FitResult(values, amp, base, residual, initial, int(best.nit), evaluations, converged,
                     amp * curve + base, data.positions, str(best.message))


def render_fit_report(result: FitResult, data_source: str, config_hash: str,
                      comparison: Optional[FitResult] = None) -> str:
    """Human-readable report followed by a key=value block"""
    template = Template(REPORT_TEMPLATE_PATH.read_text(encoding="utf-8"))
    return template.render(result=result, data_source=data_source, config_hash=config_hash,
                           comparison=comparison, width_nm=result.open_width_effective * 1e9,
                           comparison_width_nm=comparison.open_width_effective * 1e9 if comparison else None)


#!/usr/bin/env python3
"""
Configuration Manager for the Vortex Beam Toolkit
Loads, validates, serializes and hashes experiment configuration files.

An experiment configuration is one JSON document. Every dimensional value
is a string with an explicit unit ("100 nm", "30 urad", "1090 m/s");
dimensionless values are bare numbers. Unknown keys are rejected.
"""

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from analysis import FitModel, FitParameter, Weighting, fit_bound_problems
from beam_source import (SPECIES_CATALOG, BeamlineGeometry, BeamModel, DetectionClass, ParticleSpecies)
from hologram import FringeAxis, HologramSpec, TileLayout
from instrument import ArrayMode, DeflectionModel, ErosionMode, InstrumentModel
from units import format_quantity, parse_quantity
from vortex_errors import ConfigError, VortexError

_REQUIRED = object()

SECTIONS = ("name", "species", "beam", "geometry", "hologram", "layout", "instrument", "analysis")


@dataclass
class AnalysisSettings:
    center_y: float = 0.0
    box_width: float = 30e-6
    box_height: float = 90e-6
    max_order: int = 2
    fit: Optional[FitModel] = None


@dataclass
class ExperimentConfig:
    name: str
    instrument: InstrumentModel
    analysis: AnalysisSettings
    species: Dict[str, ParticleSpecies] = field(default_factory=dict)
    source: Optional[str] = field(default=None, compare=False)
    sha256: Optional[str] = field(default=None, compare=False)

    @property
    def spec(self) -> HologramSpec:
        return self.instrument.spec

    def all_species(self) -> Dict[str, ParticleSpecies]:
        catalog = dict(SPECIES_CATALOG)
        catalog.update(self.species)
        return catalog


def config_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


_JSON_TOKEN = re.compile(r'"(?:[^"\\]|\\.)*"\s*:?|[{}\[\]]')


def key_lines(text: str) -> Dict[str, int]:
    """First line of every object key, by dotted path. Array items share the array's path."""
    lines: Dict[str, int] = {}
    containers: List[Tuple[str, str]] = []
    last_key = ""
    for match in _JSON_TOKEN.finditer(text):
        token = match.group()
        if token in ("{", "["):
            inside_array = bool(containers) and containers[-1][0] == "["
            containers.append((token, containers[-1][1] if inside_array else last_key))
        elif token in ("}", "]"):
            if containers:
                containers.pop()
        elif token.endswith(":"):
            raw = token[:-1].rstrip()
            try:
                name = json.loads(raw)
            except ValueError:
                name = raw[1:-1]
            prefix = containers[-1][1] if containers else ""
            last_key = f"{prefix}.{name}" if prefix else name
            lines.setdefault(last_key, text.count("\n", 0, match.start()) + 1)
    return lines


class _Reader:
    """Typed access to the JSON tree with line-located errors"""

    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source
        self._lines = key_lines(text)

    def line_of(self, path: str) -> Optional[int]:
        """Line of the key at `path`, else of its nearest ancestor present in the file"""
        parts = path.split(".")
        while parts:
            line = self._lines.get(".".join(parts))
            if line is not None:
                return line
            parts.pop()
        return None

    def error(self, path: str, reason: str) -> ConfigError:
        return ConfigError(path, reason, line=self.line_of(path), source=self.source)

    def section(self, tree: Dict[str, Any], key: str, path: str, allowed: Tuple[str, ...],
                required: bool = True) -> Dict[str, Any]:
        value = tree.get(key)
        full = f"{path}.{key}" if path else key
        if value is None:
            if required:
                raise self.error(full, "missing section")
            return {}
        if not isinstance(value, dict):
            raise self.error(full, "expected an object")
        for k in value:
            if allowed and k not in allowed:
                raise self.error(f"{full}.{k}", f"unknown key (allowed: {', '.join(allowed)})")
        return value

    def quantity(self, tree: Dict[str, Any], key: str, path: str, dimension: str, default=_REQUIRED) -> float:
        full = f"{path}.{key}"
        if key not in tree:
            if default is _REQUIRED:
                raise self.error(full, f"missing {dimension}")
            return default
        try:
            return parse_quantity(tree[key], dimension, full)
        except ConfigError as e:
            raise self.error(full, e.reason)

    def number(self, tree: Dict[str, Any], key: str, path: str, default=_REQUIRED, integer: bool = False):
        full = f"{path}.{key}"
        if key not in tree:
            if default is _REQUIRED:
                raise self.error(full, "missing value")
            return default
        value = tree[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(full, f"expected a bare number, got {value!r}")
        if integer:
            if int(value) != value:
                raise self.error(full, f"expected an integer, got {value!r}")
            return int(value)
        return float(value)

    def choice(self, tree: Dict[str, Any], key: str, path: str, enum, default=_REQUIRED):
        full = f"{path}.{key}"
        if key not in tree:
            if default is _REQUIRED:
                raise self.error(full, "missing value")
            return default
        try:
            return enum(tree[key])
        except ValueError:
            raise self.error(full, f"expected one of {', '.join(e.value for e in enum)}, got {tree[key]!r}")

    def flag(self, tree: Dict[str, Any], key: str, path: str, default: bool) -> bool:
        value = tree.get(key, default)
        if not isinstance(value, bool):
            raise self.error(f"{path}.{key}", f"expected true or false, got {value!r}")
        return value


class ConfigManager:
    """Reads and writes experiment configuration files."""

    def __init__(self, config_path: Optional[str] = None):
        load_dotenv()
        self.config_file = self._get_config_path(config_path)

    def _get_config_path(self, config_path: Optional[str]) -> Optional[Path]:
        """Explicit path, else VORTEX_CONFIG from the environment"""
        path = config_path or os.getenv("VORTEX_CONFIG")
        return Path(path) if path else None

    def _load_config(self) -> Tuple[str, bytes]:
        if self.config_file is None:
            raise ConfigError("config", "no configuration given (use --config or set VORTEX_CONFIG)")
        try:
            data = self.config_file.read_bytes()
        except OSError as e:
            raise ConfigError("config", f"cannot read file: {e}", source=str(self.config_file))
        return data.decode("utf-8"), data

    def load(self) -> ExperimentConfig:
        text, data = self._load_config()
        config = parse_config(text, source=str(self.config_file))
        config.sha256 = config_hash(data)
        return config

    def validate_config_file(self, path: str) -> Tuple[bool, str]:
        """
        Validate a configuration file and return (is_valid, error_message).
        """
        if not path:
            return False, "No file path provided"
        file_path = Path(path)
        if not file_path.exists():
            return False, f"File does not exist: {path}"
        if not file_path.is_file():
            return False, f"Path is not a file: {path}"
        try:
            parse_config(file_path.read_text(encoding="utf-8"), source=str(path))
        except VortexError as e:
            return False, str(e)
        return True, "Configuration is valid"

    def save(self, config: ExperimentConfig, path: str) -> None:
        Path(path).write_text(serialize_config(config), encoding="utf-8")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Build module objects from configuration text"""
    reader = _Reader(text, source)
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e.msg}", line=e.lineno, source=source)
    if not isinstance(tree, dict):
        raise ConfigError("config", "top level must be an object", line=1, source=source)
    for key in tree:
        if key not in SECTIONS:
            raise reader.error(key, f"unknown section (allowed: {', '.join(SECTIONS)})")

    name = tree.get("name", Path(source).stem)
    if not isinstance(name, str):
        raise reader.error("name", "expected a string")

    species = _parse_species(reader, tree)
    catalog = dict(SPECIES_CATALOG)
    catalog.update(species)

    try:
        beam = _parse_beam(reader, tree, catalog)
        geometry = _parse_geometry(reader, tree)
        spec = _parse_hologram(reader, tree)
        layout = _parse_layout(reader, tree)
        instrument = _parse_instrument(reader, tree, beam, geometry, layout, spec)
        analysis = _parse_analysis(reader, tree, instrument)
    except ConfigError:
        raise
    except VortexError as e:
        raise ConfigError("config", str(e), source=source)
    return ExperimentConfig(name, instrument, analysis, species, source=source)


def _parse_species(reader: _Reader, tree: Dict[str, Any]) -> Dict[str, ParticleSpecies]:
    table = reader.section(tree, "species", "", (), required=False)
    result = {}
    for name, entry in table.items():
        path = f"species.{name}"
        entry = reader.section(table, name, "species", ("mass", "detection_class"))
        result[name] = ParticleSpecies(
            name,
            reader.quantity(entry, "mass", path, "mass"),
            reader.choice(entry, "detection_class", path, DetectionClass),
        )
    return result


def _parse_beam(reader: _Reader, tree: Dict[str, Any], catalog: Dict[str, ParticleSpecies]) -> BeamModel:
    section = reader.section(tree, "beam", "", ("mean_speed", "fractional_fwhm", "composition"))
    composition = reader.section(section, "composition", "beam", ())
    pairs = []
    for name in composition:
        if name not in catalog:
            raise reader.error(f"beam.composition.{name}",
                               f"unknown species (known: {', '.join(catalog)})")
        pairs.append((catalog[name], reader.number(composition, name, "beam.composition")))
    if not pairs:
        raise reader.error("beam.composition", "at least one species is required")
    return BeamModel(
        mean_speed=reader.quantity(section, "mean_speed", "beam", "speed"),
        fractional_fwhm=reader.number(section, "fractional_fwhm", "beam"),
        composition=tuple(pairs),
    )


def _parse_geometry(reader: _Reader, tree: Dict[str, Any]) -> BeamlineGeometry:
    keys = ("valve_to_skimmer", "skimmer_to_grating", "grating_to_detector", "skimmer_aperture",
            "grating_array_extent")
    section = reader.section(tree, "geometry", "", keys)
    return BeamlineGeometry(**{k: reader.quantity(section, k, "geometry", "length") for k in keys})


def _parse_hologram(reader: _Reader, tree: Dict[str, Any]) -> HologramSpec:
    section = reader.section(tree, "hologram", "",
                             ("period", "dislocations", "diameter", "open_fraction", "fringe_axis"))
    return HologramSpec(
        period=reader.quantity(section, "period", "hologram", "length"),
        dislocations=reader.number(section, "dislocations", "hologram", integer=True),
        diameter=reader.quantity(section, "diameter", "hologram", "length"),
        open_fraction=reader.number(section, "open_fraction", "hologram"),
        fringe_axis=reader.choice(section, "fringe_axis", "hologram", FringeAxis, FringeAxis.X),
    )


def _parse_layout(reader: _Reader, tree: Dict[str, Any]) -> TileLayout:
    section = reader.section(tree, "layout", "", ("pitch_x", "pitch_y", "count_x", "count_y"))
    return TileLayout(
        pitch_x=reader.quantity(section, "pitch_x", "layout", "length"),
        pitch_y=reader.quantity(section, "pitch_y", "layout", "length"),
        count_x=reader.number(section, "count_x", "layout", 1, integer=True),
        count_y=reader.number(section, "count_y", "layout", 1, integer=True),
    )


INSTRUMENT_KEYS = ("erosion_margin", "detector_pixel_angle", "wavelength_sample_count", "pixel_pitch",
                   "sim_pixel_angle", "half_width_x", "half_width_y", "array_mode",
                   "erosion_mode", "collimation", "deflection")


def _parse_instrument(reader: _Reader, tree: Dict[str, Any], beam: BeamModel, geometry: BeamlineGeometry,
                      layout: TileLayout, spec: HologramSpec) -> InstrumentModel:
    section = reader.section(tree, "instrument", "", INSTRUMENT_KEYS)
    defaults = InstrumentModel(beam, geometry, layout, spec)
    deflection = None
    if "deflection" in section:
        entry = reader.section(section, "deflection", "instrument", ("mean_kick", "kick_spread", "affected_class"))
        path = "instrument.deflection"
        deflection = DeflectionModel(
            mean_kick=reader.quantity(entry, "mean_kick", path, "angle"),
            kick_spread=reader.quantity(entry, "kick_spread", path, "angle", 0.0),
            affected_class=reader.choice(entry, "affected_class", path, DetectionClass, DetectionClass.TRIPLET_ATOM),
        )
    p = "instrument"
    return InstrumentModel(
        beam=beam,
        geometry=geometry,
        layout=layout,
        spec=spec,
        erosion_margin=reader.quantity(section, "erosion_margin", p, "length", 0.0),
        detector_pixel_angle=reader.quantity(section, "detector_pixel_angle", p, "angle"),
        wavelength_sample_count=reader.number(section, "wavelength_sample_count", p,
                                              defaults.wavelength_sample_count, integer=True),
        pixel_pitch=reader.quantity(section, "pixel_pitch", p, "length", defaults.pixel_pitch),
        sim_pixel_angle=reader.quantity(section, "sim_pixel_angle", p, "angle", defaults.sim_pixel_angle),
        half_width_x=reader.quantity(section, "half_width_x", p, "angle", defaults.half_width_x),
        half_width_y=reader.quantity(section, "half_width_y", p, "angle", defaults.half_width_y),
        array_mode=reader.choice(section, "array_mode", p, ArrayMode, defaults.array_mode),
        erosion_mode=reader.choice(section, "erosion_mode", p, ErosionMode, defaults.erosion_mode),
        collimation=reader.flag(section, "collimation", p, True),
        deflection=deflection,
    )


def _parse_parameter(reader: _Reader, tree: Dict[str, Any], key: str, path: str, dimension: Optional[str],
                     default: Optional[FitParameter]) -> Optional[FitParameter]:
    if key not in tree:
        return default
    full = f"{path}.{key}"
    entry = reader.section(tree, key, path, ("value", "min", "max", "free"))

    def get(name):
        if dimension:
            return reader.quantity(entry, name, full, dimension)
        return reader.number(entry, name, full)

    try:
        return FitParameter(get("value"), get("min"), get("max"), reader.flag(entry, "free", full, True))
    except VortexError as e:
        raise reader.error(full, str(e))


def _parse_analysis(reader: _Reader, tree: Dict[str, Any], instrument: InstrumentModel) -> AnalysisSettings:
    section = reader.section(tree, "analysis", "", ("center_y", "box_width", "box_height", "max_order", "fit"),
                             required=False)
    p = "analysis"
    settings = AnalysisSettings(
        center_y=reader.quantity(section, "center_y", p, "angle", 0.0),
        box_width=reader.quantity(section, "box_width", p, "angle", 30e-6),
        box_height=reader.quantity(section, "box_height", p, "angle", 90e-6),
        max_order=reader.number(section, "max_order", p, 2, integer=True),
    )
    settings.fit = _parse_fit(reader, section, instrument)
    return settings


FIT_KEYS = ("open_width_effective", "fractional_fwhm", "species_weights", "baseline", "weighting", "restarts",
            "max_iterations", "tolerance", "seed")


def default_fit_model(instrument: InstrumentModel) -> FitModel:
    period = instrument.spec.period
    width = instrument.effective_open_width
    fwhm = instrument.beam.fractional_fwhm
    return FitModel(
        open_width_effective=FitParameter(width, min(0.1 * period, width), max(0.9 * period, width)),
        fractional_fwhm=FitParameter(fwhm, 0.0, max(0.1, fwhm)),
    )


def _parse_fit(reader: _Reader, analysis: Dict[str, Any], instrument: InstrumentModel) -> FitModel:
    default = default_fit_model(instrument)
    section = reader.section(analysis, "fit", "analysis", FIT_KEYS, required=False)
    if not section:
        return default
    p = "analysis.fit"
    weights = {}
    table = reader.section(section, "species_weights", p, (), required=False)
    for name in table:
        if name not in {s.name for s in instrument.beam.species}:
            raise reader.error(f"{p}.species_weights.{name}", "species is not in beam.composition")
        weights[name] = _parse_parameter(reader, table, name, f"{p}.species_weights", None, None)
    width = _parse_parameter(reader, section, "open_width_effective", p, "length", default.open_width_effective)
    fwhm = _parse_parameter(reader, section, "fractional_fwhm", p, None, default.fractional_fwhm)
    problems = fit_bound_problems(width, fwhm, weights, instrument.spec.period)
    if problems:
        bound, reason = problems[0]
        raise reader.error(f"{p}.{bound}", reason)
    try:
        return FitModel(
            open_width_effective=width,
            fractional_fwhm=fwhm,
            species_weights=weights,
            baseline=_parse_parameter(reader, section, "baseline", p, None, None),
            weighting=reader.choice(section, "weighting", p, Weighting, default.weighting),
            restarts=reader.number(section, "restarts", p, 3, integer=True),
            max_iterations=reader.number(section, "max_iterations", p, 500, integer=True),
            tolerance=reader.number(section, "tolerance", p, 1e-8),
            seed=reader.number(section, "seed", p, 0, integer=True),
        )
    except ConfigError:
        raise
    except VortexError as e:
        raise reader.error(p, str(e))


def _parameter_tree(param: FitParameter, dimension: Optional[str]) -> Dict[str, Any]:
    fmt = (lambda v: format_quantity(v, dimension)) if dimension else float
    return {"value": fmt(param.value), "min": fmt(param.lower), "max": fmt(param.upper), "free": param.free}


def config_tree(config: ExperimentConfig) -> Dict[str, Any]:
    """SI-unit JSON tree that parses back to an equal configuration"""
    inst = config.instrument
    length = lambda v: format_quantity(v, "length")  # noqa: E731
    angle = lambda v: format_quantity(v, "angle")  # noqa: E731

    instrument: Dict[str, Any] = {
        "erosion_margin": length(inst.erosion_margin),
        "detector_pixel_angle": angle(inst.detector_pixel_angle),
        "wavelength_sample_count": inst.wavelength_sample_count,
        "pixel_pitch": length(inst.pixel_pitch),
        "sim_pixel_angle": angle(inst.sim_pixel_angle),
        "half_width_x": angle(inst.half_width_x),
        "half_width_y": angle(inst.half_width_y),
        "array_mode": inst.array_mode.value,
        "erosion_mode": inst.erosion_mode.value,
        "collimation": inst.collimation,
    }
    if inst.deflection is not None:
        instrument["deflection"] = {
            "mean_kick": angle(inst.deflection.mean_kick),
            "kick_spread": angle(inst.deflection.kick_spread),
            "affected_class": inst.deflection.affected_class.value,
        }

    analysis: Dict[str, Any] = {
        "center_y": angle(config.analysis.center_y),
        "box_width": angle(config.analysis.box_width),
        "box_height": angle(config.analysis.box_height),
        "max_order": config.analysis.max_order,
    }
    fit = config.analysis.fit
    if fit is not None:
        analysis["fit"] = {
            "open_width_effective": _parameter_tree(fit.open_width_effective, "length"),
            "fractional_fwhm": _parameter_tree(fit.fractional_fwhm, None),
            "species_weights": {k: _parameter_tree(v, None) for k, v in fit.species_weights.items()},
            "weighting": fit.weighting.value,
            "restarts": fit.restarts,
            "max_iterations": fit.max_iterations,
            "tolerance": fit.tolerance,
            "seed": fit.seed,
        }
        if fit.baseline is not None:
            analysis["fit"]["baseline"] = _parameter_tree(fit.baseline, None)

    tree: Dict[str, Any] = {"name": config.name}
    if config.species:
        tree["species"] = {
            name: {"mass": format_quantity(s.mass, "mass"), "detection_class": s.detection_class.value}
            for name, s in config.species.items()
        }
    geometry = inst.geometry
    tree.update({
        "beam": {
            "mean_speed": format_quantity(inst.beam.mean_speed, "speed"),
            "fractional_fwhm": inst.beam.fractional_fwhm,
            "composition": {s.name: w for s, w in inst.beam.composition},
        },
        "geometry": {k: length(getattr(geometry, k)) for k in
                     ("valve_to_skimmer", "skimmer_to_grating", "grating_to_detector", "skimmer_aperture",
                      "grating_array_extent")},
        "hologram": {
            "period": length(inst.spec.period),
            "dislocations": inst.spec.dislocations,
            "diameter": length(inst.spec.diameter),
            "open_fraction": inst.spec.open_fraction,
            "fringe_axis": inst.spec.fringe_axis.value,
        },
        "layout": {
            "pitch_x": length(inst.layout.pitch_x),
            "pitch_y": length(inst.layout.pitch_y),
            "count_x": inst.layout.count_x,
            "count_y": inst.layout.count_y,
        },
        "instrument": instrument,
        "analysis": analysis,
    })
    return tree


def serialize_config(config: ExperimentConfig) -> str:
    return json.dumps(config_tree(config), indent=2, ensure_ascii=False) + "\n"

#!/usr/bin/env python3
"""
Vortex Beam Toolkit - Command Line
==================================

Design fork holograms, simulate far-field detector maps, sample detection
events and fit line cuts, all from one experiment configuration file.

    python vortex_cli.py --config configs/single_edge_600nm.json design -o out/fork
    python vortex_cli.py --config configs/single_edge_600nm.json simulate -o out/map.vwi --plot out/map.png
    python vortex_cli.py --config configs/single_edge_600nm.json events --count 200000 --seed 7 -o out/events.csv
    python vortex_cli.py --config configs/single_edge_600nm.json fit --data out/events.vwi -o out/fit.txt

Exit codes: 0 success, 1 user error, 2 physics-validity failure,
3 non-convergence.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from adapters import data_formats, mask_formats, rendering
from analysis import (FitParameter, LineCut, extract_line_cut, find_order_peaks, find_unassigned_peaks,
                      fit_profile, render_fit_report)
from beam_source import coherence_report, divergence_angle, mean_wavelength
from config_manager import ConfigManager, ExperimentConfig
from diffraction import IntensityMap, Normalization, check_fraunhofer, fresnel_number, normalize, order_center
from hologram import MaskFormat, erode_open_regions, export_mask, mask_statistics, rasterize
from instrument import (RNG_ID, DetectorImage, InstrumentModel, accumulate, apply_deflection, sample_species_events,
                        simulate, species_classes, species_maps)
from run_ledger import RunLedger
from vortex_errors import ConfigError, VortexError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_NOT_CONVERGED = 3


def _workers(args) -> int:
    return max(1, int(args.workers))


def _restricted(model: InstrumentModel, config: ExperimentConfig, species: Optional[str]) -> InstrumentModel:
    if not species:
        return model
    names = [s.name for s in model.beam.species]
    if species not in names:
        raise ConfigError("--species", f"{species!r} is not in beam.composition ({', '.join(names)})")
    chosen = config.all_species()[species]
    return replace(model, beam=replace(model.beam, composition=((chosen, 1.0),)))


def _check_physics(model: InstrumentModel, force: bool) -> None:
    for s in model.beam.species:
        check_fraunhofer(model.spec.diameter, mean_wavelength(model.beam, s), model.geometry.grating_to_detector,
                         force=force)
        if divergence_angle(model.geometry) > 0:
            coherence_report(model.beam, model.geometry, s, model.spec.diameter)


def _provenance(config: ExperimentConfig, command: str, **extra) -> Dict[str, object]:
    entries: Dict[str, object] = {"command": command, "config_sha256": config.sha256, "config_name": config.name}
    entries.update(extra)
    return entries


def cmd_design(config: ExperimentConfig, output: str, fmt: str = "both", erode: bool = False,
               plot: Optional[str] = None, workers: int = 1) -> List[Path]:
    """Rasterize the configured hologram and export fabrication files"""
    inst = config.instrument
    mask = rasterize(config.spec, inst.pixel_pitch, workers=workers)
    if erode:
        mask = erode_open_regions(mask, inst.erosion_margin)
    stats = mask_statistics(mask, config.spec)

    base = Path(output)
    base.parent.mkdir(parents=True, exist_ok=True)
    written = []
    formats = [MaskFormat.RASTER_BITMAP, MaskFormat.VECTOR_POLYGONS] if fmt == "both" else [MaskFormat(fmt)]
    for f in formats:
        path = base.with_suffix(".pbm" if f == MaskFormat.RASTER_BITMAP else ".svg")
        data = export_mask(mask, f, path)
        written.append(path)
        if f == MaskFormat.VECTOR_POLYGONS:
            polygon_area = mask_formats.svg_blocked_area(data)
            pixel_area = (mask.width * mask.height - mask.open_pixels) * (inst.pixel_pitch * 1e9) ** 2
            print(f"   polygon area {polygon_area:.0f} nm² vs blocked pixels {pixel_area:.0f} nm²")

    spec = config.spec
    print(f"✅ Hologram: d = {spec.period * 1e9:.1f} nm, n = {spec.dislocations}, D = {spec.diameter * 1e9:.0f} nm"
          f"{' (eroded)' if erode else ''}")
    print(f"   {stats.width}x{stats.height} pixels at {inst.pixel_pitch * 1e9:.2f} nm, "
          f"open fraction in disk {stats.open_fraction_in_disk:.4f} (design {spec.open_fraction:.4f}), "
          f"open area {stats.open_area * 1e12:.4f} μm², {stats.blocked_islands} blocked islands")
    if plot:
        written.append(rendering.render_mask(mask.occupancy, inst.pixel_pitch, plot, title=config.name))
    return written


def cmd_simulate(config: ExperimentConfig, output: str, ideal: bool = False, species: Optional[str] = None,
                 normalization: str = "unit_sum", force: bool = False, plot: Optional[str] = None,
                 saturate: Optional[float] = None, log_scale: bool = False, workers: int = 1) -> IntensityMap:
    """Write the final mixed, blurred map in VWI1 format with a provenance sidecar"""
    model = _restricted(config.instrument, config, species)
    if ideal:
        model = model.ideal()
    _check_physics(model, force)

    result = normalize(simulate(model, workers=workers), normalization)
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    data_formats.write_vwi(output, result.values, result.angular_pitch, result.normalization.value)
    data_formats.write_metadata(output, _provenance(config, "simulate", ideal=ideal, species=species or "all",
                                                    normalization=result.normalization.value))
    print(f"✅ Map written: {output} ({result.shape[1]}x{result.shape[0]}, "
          f"{result.angular_pitch * 1e6:.2f} urad/pixel)")
    if plot:
        rendering.render_map(result.values, result.angular_pitch, plot, saturate=saturate, log=log_scale,
                             title=config.name)
    return result


def cmd_events(config: ExperimentConfig, count: int, seed: int, output: str, image: Optional[str] = None,
               deflect: bool = True, force: bool = False, plot: Optional[str] = None,
               saturate: Optional[float] = None, workers: int = 1) -> DetectorImage:
    """Sample detection events and accumulate the detector image"""
    model = config.instrument
    _check_physics(model, force)
    maps = species_maps(model, workers=workers)
    weights = {s.name: w for s, w in model.beam.fractions}
    events = sample_species_events(maps, weights, count, seed, workers=workers)
    if deflect and model.deflection is not None:
        events = apply_deflection(events, model.deflection, seed, species_classes(model.beam.species))

    Path(output).parent.mkdir(parents=True, exist_ok=True)
    text = data_formats.encode_events(events.theta_x, events.theta_y, events.species, seed, RNG_ID, config.sha256)
    Path(output).write_text(text, encoding="utf-8")

    detector = accumulate(events, model.detector_pixel_angle, model.half_width_x, model.half_width_y)
    image = image or str(Path(output).with_suffix(".vwi"))
    data_formats.write_vwi(image, detector.counts.astype(float), detector.pixel_angle, Normalization.RAW.value)
    data_formats.write_metadata(image, _provenance(config, "events", seed=seed, rng=RNG_ID, count=count))
    print(f"✅ {len(events)} events written: {output}")
    print(f"✅ Detector image written: {image} ({detector.total_events} counts, "
          f"{detector.pixel_angle * 1e6:.0f} urad pixels)")
    if plot:
        rendering.render_map(detector.counts.astype(float), detector.pixel_angle, plot, saturate=saturate,
                             title=f"{config.name}: {detector.total_events} events")
    return detector


def load_line_cut(config: ExperimentConfig, path: str) -> LineCut:
    """A VWI1 image is cut with the configured boxes; a CSV is read as a line cut"""
    settings = config.analysis
    if data_formats.is_vwi(path):
        values, pitch, norm = data_formats.read_vwi(path)
        return extract_line_cut(IntensityMap(values, pitch, norm), settings.center_y, settings.box_width,
                                settings.box_height)
    positions, values, comments = data_formats.decode_line_cut(Path(path).read_text(encoding="utf-8"), path)
    return LineCut(positions, values,
                   float(comments.get("box_width", settings.box_width)),
                   float(comments.get("box_height", settings.box_height)),
                   float(comments.get("center_y", settings.center_y)))


def _write_cut(path: Path, cut: LineCut, values=None) -> None:
    extra = {"box_width": cut.box_width, "box_height": cut.box_height, "center_y": cut.center_y}
    path.write_text(data_formats.encode_line_cut(cut.positions, cut.values if values is None else values, extra),
                    encoding="utf-8")


def cmd_fit(config: ExperimentConfig, data: str, output: str, compare_fixed_width: bool = False,
            plot: Optional[str] = None, workers: int = 1, force: bool = False) -> int:
    """Fit the configured parameters to a line cut; writes report and best-fit curve"""
    _check_physics(config.instrument, force)
    cut = load_line_cut(config, data)
    fit_model = config.analysis.fit
    species = config.all_species()
    result = fit_profile(cut, fit_model, config.instrument, species=species, workers=workers)

    comparison = None
    if compare_fixed_width:
        fabricated = config.spec.open_width
        fixed = replace(fit_model, open_width_effective=FitParameter(fabricated, fabricated, fabricated, free=False))
        comparison = fit_profile(cut, fixed, config.instrument, species=species, workers=workers)

    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_fit_report(result, data, config.sha256 or "", comparison), encoding="utf-8")
    stem = out.with_suffix("")
    _write_cut(Path(f"{stem}_data.csv"), cut)
    _write_cut(Path(f"{stem}_bestfit.csv"), cut, result.best_fit)
    print(f"{'✅' if result.converged else '⚠️'} Fit report written: {out}")
    print(f"   effective open width {result.open_width_effective * 1e9:.2f} nm, residual {result.residual:.6g}")

    if plot:
        curves = [("best fit", result.best_fit)]
        if comparison is not None:
            curves.append((f"width fixed at {config.spec.open_width * 1e9:.0f} nm", comparison.best_fit))
        rendering.render_line_cut(cut.positions, cut.values, plot, curves, title=config.name)

    if not result.converged:
        print("⚠️ Fit did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_cut(config: ExperimentConfig, image: str, output: str, max_order: Optional[int] = None) -> LineCut:
    """Extract the configured line cut from a VWI1 image"""
    cut = load_line_cut(config, image)
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    _write_cut(Path(output), cut)
    print(f"✅ Line cut written: {output} ({len(cut.positions)} boxes)")

    spec = config.spec
    lam = mean_wavelength(config.instrument.beam, config.instrument.beam.species[0])
    max_order = config.analysis.max_order if max_order is None else max_order
    try:
        peaks = find_order_peaks(cut, lam, spec.period, max_order, spec.dislocations)
    except VortexError as e:
        logger.warning(f"⚠️ Peak search skipped: {e}")
        return cut
    table = pd.DataFrame([{"order": p.order, "position_urad": round(p.position * 1e6, 1),
                           "height": p.height, "found": p.found} for p in peaks])
    print(table.to_string(index=False))
    for position, height in find_unassigned_peaks(cut, lam, spec.period, max_order):
        print(f"   unassigned maximum at {position * 1e6:.1f} urad (height {height:.4g})")
    return cut


def cmd_info(config: ExperimentConfig) -> pd.DataFrame:
    """Wavelengths, coherence and Fresnel numbers per species"""
    model = config.instrument
    spec = config.spec
    rows = []
    for s, w in model.beam.fractions:
        lam = mean_wavelength(model.beam, s)
        row = {
            "species": s.name,
            "weight": round(w, 4),
            "wavelength_pm": round(lam * 1e12, 2),
            "order1_mrad": round(order_center(1, lam, spec.period) * 1e3, 4),
            "fresnel": f"{fresnel_number(spec.diameter, lam, model.geometry.grating_to_detector):.2e}",
        }
        if divergence_angle(model.geometry) > 0:
            report = coherence_report(model.beam, model.geometry, s, spec.diameter)
            row["coherence_nm"] = round(report.coherence_length * 1e9, 0)
            row["coherence/D"] = round(report.coherence_ratio, 2)
        rows.append(row)
    table = pd.DataFrame(rows)
    print(f"📋 {config.name}: divergence {divergence_angle(model.geometry) * 1e6:.1f} urad, "
          f"effective open width {model.effective_open_width * 1e9:.1f} nm")
    print(table.to_string(index=False))
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Matter-wave vortex hologram toolkit")
    parser.add_argument("--config", default=None, help="Experiment configuration (default: $VORTEX_CONFIG)")
    parser.add_argument("--log-level", default=os.getenv("VORTEX_LOG_LEVEL", "INFO"))
    parser.add_argument("--workers", type=int, default=int(os.getenv("VORTEX_WORKERS", "1")),
                        help="Threads for transforms and sampling (results do not depend on it)")
    parser.add_argument("--ledger", default=os.getenv("VORTEX_RUN_LEDGER"), help="Append a run record to this JSON file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="Rasterize and export the hologram mask")
    p.add_argument("-o", "--output", required=True, help="Output path prefix (.pbm/.svg appended)")
    p.add_argument("--format", default="both", choices=["both"] + [f.value for f in MaskFormat])
    p.add_argument("--erode", action="store_true", help="Apply the configured van der Waals margin")
    p.add_argument("--plot", help="PNG rendering of the mask")

    p = sub.add_parser("simulate", help="Simulate the detector-plane intensity map")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--ideal", action="store_true", help="Monochromatic single hologram without blur")
    p.add_argument("--species", help="Simulate only this species")
    p.add_argument("--normalization", default="unit_sum", choices=[n.value for n in Normalization])
    p.add_argument("--force", action="store_true", help="Proceed even if the Fresnel number is >= 1")
    p.add_argument("--plot")
    p.add_argument("--saturate", type=float, help="Saturate the plot above this fraction of the maximum (e.g. 0.3)")
    p.add_argument("--log", action="store_true", help="Log-scale plot")

    p = sub.add_parser("events", help="Sample detection events and accumulate the detector image")
    p.add_argument("--count", type=int, default=200000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", required=True, help="Event list (CSV)")
    p.add_argument("--image", help="Detector image path (default: <output>.vwi)")
    p.add_argument("--no-deflection", action="store_true")
    p.add_argument("--force", action="store_true")
    p.add_argument("--plot")
    p.add_argument("--saturate", type=float)

    p = sub.add_parser("fit", help="Fit a line cut against the forward model")
    p.add_argument("--data", required=True, help="VWI1 detector image or line-cut CSV")
    p.add_argument("-o", "--output", required=True, help="Fit report")
    p.add_argument("--compare-fixed-width", action="store_true",
                   help="Also fit with the width fixed at the fabricated value")
    p.add_argument("--force", action="store_true", help="Proceed even if the Fresnel number is >= 1")
    p.add_argument("--plot")

    p = sub.add_parser("cut", help="Extract the configured line cut from a VWI1 image")
    p.add_argument("--image", required=True)
    p.add_argument("-o", "--output", required=True)

    sub.add_parser("info", help="Beam, coherence and Fresnel summary")
    return parser


def run(args: argparse.Namespace) -> int:
    config = ConfigManager(args.config).load()
    workers = _workers(args)
    status = EXIT_OK
    if args.command == "design":
        cmd_design(config, args.output, args.format, args.erode, args.plot, workers)
    elif args.command == "simulate":
        cmd_simulate(config, args.output, args.ideal, args.species, args.normalization, args.force, args.plot,
                     args.saturate, args.log, workers)
    elif args.command == "events":
        cmd_events(config, args.count, args.seed, args.output, args.image, not args.no_deflection, args.force,
                   args.plot, args.saturate, workers)
    elif args.command == "fit":
        status = cmd_fit(config, args.data, args.output, args.compare_fixed_width, args.plot, workers, args.force)
    elif args.command == "cut":
        cmd_cut(config, args.image, args.output)
    elif args.command == "info":
        cmd_info(config)

    if args.ledger:
        RunLedger(args.ledger).record(args.command, {
            "config": str(config.source), "config_sha256": config.sha256,
            "output": getattr(args, "output", None), "exit_code": status,
        })
    return status


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except VortexError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USER_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Hologram design: fork rule, rasterization, van der Waals erosion and mask export."""

import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from adapters import mask_formats
from hologram import (FringeAxis, HologramSpec, MaskFormat, RasterMask, TileLayout, disk_mask,
                      erode_open_regions, export_mask, fork_transmission, mask_statistics, narrowed_spec,
                      pixel_centers, rasterize, read_pbm, straight_grating_mask, tile_mask)
from vortex_errors import DataFormatError, DomainError, ResolutionError


class TestForkTransmission:

    def test_scalar_inputs_give_bool(self, fork_spec):
        assert fork_transmission(10e-9, 10e-9, fork_spec) in (True, False)
        assert isinstance(fork_transmission(10e-9, 10e-9, fork_spec), bool)

    def test_centre_and_outside_are_blocked(self, fork_spec):
        assert fork_transmission(0.0, 0.0, fork_spec) is False
        assert fork_transmission(301e-9, 0.0, fork_spec) is False

    def test_no_dislocation_is_straight_slits(self):
        spec = HologramSpec(100e-9, 0, 600e-9, 0.5)
        x = np.array([5e-9, 45e-9, 55e-9, 95e-9, -45e-9, -55e-9])
        y = np.full_like(x, 123e-9)
        expected = (x / 100e-9 - np.floor(x / 100e-9)) < 0.5
        assert np.array_equal(fork_transmission(x, y, spec), expected)

    @pytest.mark.parametrize("dislocations", [1, 2, 3])
    def test_rotation_by_one_nth_turn_shifts_one_fringe_near_the_origin(self, dislocations):
        spec = HologramSpec(100e-9, dislocations, 600e-9, 0.5)
        r = 1e-3 * spec.period
        # fringe phase targets well away from the 0 and 0.5 band edges
        targets = np.array([0.1, 0.25, 0.4, 0.6, 0.75, 0.9])
        phi = -2 * np.pi * targets / dislocations
        turned = phi + 2 * np.pi / dislocations
        before = fork_transmission(r * np.cos(phi), r * np.sin(phi), spec)
        after = fork_transmission(r * np.cos(turned), r * np.sin(turned), spec)
        assert np.array_equal(before, targets < 0.5)
        assert np.array_equal(after, before)

    def test_invalid_specs_are_rejected(self):
        for kwargs in ({"period": 0.0}, {"diameter": -1.0}, {"open_fraction": 1.0}, {"open_fraction": 0.0},
                       {"dislocations": -1}, {"dislocations": 1.5}):
            args = {"period": 100e-9, "dislocations": 1, "diameter": 600e-9, "open_fraction": 0.5, **kwargs}
            with pytest.raises(DomainError):
                HologramSpec(**args)


class TestRasterize:

    def test_reference_disk_spans_240_pixels(self, fork_mask):
        assert (fork_mask.height, fork_mask.width) == (240, 240)
        assert fork_mask.is_binary

    def test_open_fraction_inside_disk(self, fork_mask):
        stats = mask_statistics(fork_mask)
        assert stats.open_fraction_in_disk == pytest.approx(0.5, abs=0.01)
        assert stats.disk_pixels == pytest.approx(np.pi * 120 ** 2, rel=0.01)

    def test_coarse_pitch_is_rejected(self, fork_spec):
        with pytest.raises(ResolutionError):
            rasterize(fork_spec, 6e-9)

    def test_extent_smaller_than_disk_is_rejected(self, fork_spec):
        with pytest.raises(DomainError):
            rasterize(fork_spec, 2.5e-9, extent=500e-9)

    def test_rasterize_is_deterministic_across_workers(self, fork_spec, fork_mask):
        again = rasterize(fork_spec, 2.5e-9, workers=4)
        assert np.array_equal(again.occupancy, fork_mask.occupancy)

    def test_larger_extent_pads_with_blocked_pixels(self, fork_spec, fork_mask):
        padded = rasterize(fork_spec, 2.5e-9, extent=700e-9)
        assert padded.width == 280
        assert padded.open_pixels == fork_mask.open_pixels

    def test_straight_rows_repeat_inside_the_disk(self):
        spec = HologramSpec(100e-9, 0, 600e-9, 0.5)
        mask = rasterize(spec)
        x, y = mask.coordinates()
        xx, yy = np.meshgrid(x, y)
        inside = (np.hypot(xx, yy) <= 300e-9) & (np.hypot(xx, yy) > 0)
        slits = (xx / 100e-9 - np.floor(xx / 100e-9)) < 0.5
        assert np.array_equal(mask.occupancy, inside & slits)

    def test_half_period_shift_complements_straight_slits(self):
        straight = rasterize(HologramSpec(100e-9, 0, 600e-9, 0.5), 2.5e-9).occupancy
        # 20 px = d/2, 40 px = d; rows and columns 60..180 stay inside the disk
        interior = straight[60:180, 60:140]
        assert np.array_equal(straight[60:180, 80:160], ~interior)
        assert np.array_equal(straight[60:180, 100:180], interior)

    def test_fringe_axis_y_transposes_straight_slits(self):
        spec_x = HologramSpec(100e-9, 0, 600e-9, 0.5)
        spec_y = replace(spec_x, fringe_axis=FringeAxis.Y)
        assert np.array_equal(rasterize(spec_y).occupancy, rasterize(spec_x).occupancy.T)

    def test_antialiased_coverage_tracks_open_fraction(self, fork_spec):
        coarse = rasterize(fork_spec, antialias=True)
        assert not coarse.is_binary
        assert coarse.occupancy.min() >= 0 and coarse.occupancy.max() <= 1
        stats = mask_statistics(coarse)
        assert stats.open_fraction_in_disk == pytest.approx(0.5, abs=0.01)

        narrow = rasterize(narrowed_spec(fork_spec, 5e-9), antialias=True)
        assert mask_statistics(narrow).open_fraction_in_disk == pytest.approx(0.4, abs=0.01)


class TestErosion:

    def test_margin_narrows_55_nm_slits_to_40_nm(self):
        grating = straight_grating_mask(100e-9, 0.55, 2.5e-9, periods=6)
        assert grating.occupancy[120, 80:120].sum() == 22
        eroded = erode_open_regions(grating, 7.5e-9)
        # interior slit, away from the raster border
        assert eroded.occupancy[120, 80:120].sum() * 2.5e-9 == pytest.approx(40e-9)

    def test_zero_margin_is_identity(self, fork_mask):
        assert np.array_equal(erode_open_regions(fork_mask, 0.0).occupancy, fork_mask.occupancy)

    def test_erosion_never_opens_pixels(self, fork_mask):
        eroded = erode_open_regions(fork_mask, 5e-9)
        assert not np.any(eroded.occupancy & ~fork_mask.occupancy)
        assert eroded.open_pixels < fork_mask.open_pixels

    def test_full_erosion_warns(self, caplog):
        grating = straight_grating_mask(100e-9, 0.1, 2.5e-9, periods=3)
        with caplog.at_level(logging.WARNING):
            eroded = erode_open_regions(grating, 7.5e-9)
        assert eroded.open_pixels == 0
        assert "blocked every open pixel" in caplog.text

    @pytest.mark.parametrize("mask", [disk_mask(600e-9), straight_grating_mask(100e-9, 0.55, 2.5e-9, periods=6)],
                             ids=["disk", "grating"])
    def test_successive_margins_add(self, mask):
        twice = erode_open_regions(erode_open_regions(mask, 5e-9), 2.5e-9).occupancy
        once = erode_open_regions(mask, 7.5e-9).occupancy
        assert np.all(twice >= once)
        band = ndimage.binary_dilation(once, np.ones((3, 3), bool)) & ~ndimage.binary_erosion(once)
        assert not np.any((twice ^ once) & ~band)

    def test_successive_margins_add_on_the_fork(self, fork_mask):
        twice = erode_open_regions(erode_open_regions(fork_mask, 5e-9), 2.5e-9)
        once = erode_open_regions(fork_mask, 7.5e-9)
        assert np.all(twice.occupancy >= once.occupancy)
        assert twice.open_pixels - once.open_pixels <= 0.01 * once.open_pixels

    def test_negative_margin_and_coverage_masks_are_rejected(self, fork_mask, fork_spec):
        with pytest.raises(DomainError):
            erode_open_regions(fork_mask, -1e-9)
        with pytest.raises(DomainError):
            erode_open_regions(rasterize(fork_spec, antialias=True), 5e-9)

    def test_narrowed_spec(self):
        spec = HologramSpec(100e-9, 1, 600e-9, 0.55)
        assert narrowed_spec(spec, 7.5e-9).open_width == pytest.approx(40e-9)
        with pytest.raises(DomainError):
            narrowed_spec(spec, 30e-9)


class TestReferenceMasks:

    def test_disk_area(self):
        disk = disk_mask(600e-9)
        assert disk.open_pixels * (2.5e-9) ** 2 == pytest.approx(np.pi * (300e-9) ** 2, rel=0.01)

    def test_straight_grating_needs_whole_pixel_period(self):
        with pytest.raises(ResolutionError):
            straight_grating_mask(101e-9, 0.5, 2.5e-9)

    def test_tile_mask_repeats_cells(self, fork_mask):
        layout = TileLayout(0.8e-6, 0.8e-6, count_x=2, count_y=3)
        tiled = tile_mask(fork_mask, layout)
        assert (tiled.height, tiled.width) == (3 * 320, 2 * 320)
        assert tiled.open_pixels == 6 * fork_mask.open_pixels

    def test_every_tile_cell_holds_the_single_mask(self, fork_mask):
        tiled = tile_mask(fork_mask, TileLayout(0.8e-6, 0.8e-6, count_x=3, count_y=2)).occupancy
        expected = np.zeros((320, 320), dtype=bool)
        expected[40:280, 40:280] = fork_mask.occupancy
        for row in range(2):
            for col in range(3):
                cell = tiled[row * 320:(row + 1) * 320, col * 320:(col + 1) * 320]
                assert np.array_equal(cell, expected)

    def test_tile_pitch_must_fit_the_hologram(self, fork_spec):
        with pytest.raises(DomainError):
            TileLayout(0.5e-6, 1.2e-6).check_fits(fork_spec)
        with pytest.raises(DomainError):
            TileLayout(1.2e-6, 1.2e-6, count_x=0)

    def test_pixel_centres_are_symmetric(self):
        centres = pixel_centers(4, 1.0)
        assert np.array_equal(centres, [-1.5, -0.5, 0.5, 1.5])


class TestExport:

    def test_pbm_layout_top_row_first(self):
        mask = RasterMask(np.array([[True, False], [False, False]]), 2.5e-9)
        assert export_mask(mask, MaskFormat.RASTER_BITMAP) == b"P1\n2 2\n11\n01\n"

    def test_pbm_lines_are_short_and_reimport(self, fork_mask, tmp_path):
        path = tmp_path / "fork.pbm"
        data = export_mask(fork_mask, "raster_bitmap", path)
        assert path.read_bytes() == data
        assert data.startswith(b"P1\n240 240\n")
        assert max(len(line) for line in data.splitlines()) <= 70
        assert np.array_equal(read_pbm(path).occupancy, fork_mask.occupancy)

    def test_pbm_decode_errors_name_the_line(self):
        with pytest.raises(DataFormatError):
            mask_formats.decode_pbm(b"P4\n2 2\n")
        with pytest.raises(DataFormatError) as err:
            mask_formats.decode_pbm(b"P1\n2 2\n11\n0x\n")
        assert err.value.line == 4
        with pytest.raises(DataFormatError):
            mask_formats.decode_pbm(b"P1\n2 2\n111\n")

    def test_svg_polygons_match_blocked_pixels(self, fork_mask):
        data = export_mask(fork_mask, MaskFormat.VECTOR_POLYGONS)
        blocked_area = (fork_mask.width * fork_mask.height - fork_mask.open_pixels) * 2.5 ** 2
        assert mask_formats.svg_blocked_area(data) == pytest.approx(blocked_area, rel=0.01)
        assert mask_formats.svg_island_count(data) == mask_statistics(fork_mask).blocked_islands

    def test_svg_metadata_records_the_design(self, fork_mask):
        meta = mask_formats.svg_metadata(export_mask(fork_mask, MaskFormat.VECTOR_POLYGONS))
        assert meta["units"] == "nm"
        assert float(meta["period_nm"]) == pytest.approx(100)
        assert int(meta["dislocations"]) == 1
        assert float(meta["pixel_pitch_nm"]) == pytest.approx(2.5)

    def test_island_outline_with_hole(self):
        blocked = np.ones((5, 5), dtype=bool)
        blocked[2, 2] = False
        loops = mask_formats.trace_islands(blocked)
        assert len(loops) == 1
        areas = sorted(mask_formats.signed_area(loop) for loop in loops[0])
        assert areas == [-1.0, 25.0]

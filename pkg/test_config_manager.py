"""Configuration loading, unit handling, run ledger and data file formats."""

import hashlib

import numpy as np
import pytest

import run_ledger
from adapters import data_formats
from analysis import Weighting
from config_manager import ConfigManager, key_lines, parse_config, serialize_config
from instrument import ArrayMode, ErosionMode
from run_ledger import RunLedger
from units import format_quantity, parse_quantity
from vortex_errors import ConfigError, DataFormatError

BUNDLED = ["single_edge_600nm", "double_edge_600nm", "dimer_single_edge_400nm", "straight_grating_100nm"]

FIT_SECTION = """"analysis": {
    "box_width": "20 urad",
    "fit": {
      "open_width_effective": {"value": "50 nm", "min": "20 nm", "max": "80 nm"},
      "fractional_fwhm": {"value": 0.03, "min": 0.0, "max": 0.1}
    }
  }"""


def _with_fit_section(config_path, *replacements):
    text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
    text = text.replace('"analysis": {"box_width": "20 urad", "box_height": "60 urad", "max_order": 2}', FIT_SECTION)
    for old, new in replacements:
        text = text.replace(old, new)
    return text


class TestUnits:

    @pytest.mark.parametrize("text, dimension, expected", [
        ("100 nm", "length", 100e-9),
        ("1.2 um", "length", 1.2e-6),
        ("1.2 μm", "length", 1.2e-6),
        ("30 urad", "angle", 30e-6),
        ("4.5 mrad", "angle", 4.5e-3),
        ("1090 m/s", "speed", 1090.0),
        ("-15 urad", "angle", -15e-6),
    ])
    def test_parse(self, text, dimension, expected):
        assert parse_quantity(text, dimension) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("value, dimension", [(100, "length"), ("100", "length"), ("100 urad", "length"),
                                                  ("100 furlongs", "length"), ("fast m/s", "speed")])
    def test_rejects_missing_or_foreign_units(self, value, dimension):
        with pytest.raises(ConfigError):
            parse_quantity(value, dimension, "hologram.period")

    def test_format_is_exact(self):
        value = 1.0 / 3.0 * 1e-7
        assert parse_quantity(format_quantity(value, "length"), "length") == value


class TestParseConfig:

    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_configs_load(self, config_path, name):
        config = ConfigManager(str(config_path(name))).load()
        assert config.name == name
        assert config.sha256 == hashlib.sha256(config_path(name).read_bytes()).hexdigest()

    @pytest.mark.parametrize("name", BUNDLED)
    def test_serialize_round_trip(self, config_path, name):
        config = parse_config(config_path(name).read_text(encoding="utf-8"))
        again = parse_config(serialize_config(config))
        assert again == config
        assert serialize_config(again) == serialize_config(config)

    def test_reference_values(self, config_path):
        config = ConfigManager(str(config_path("single_edge_600nm"))).load()
        inst = config.instrument
        assert inst.spec.period == pytest.approx(100e-9)
        assert inst.spec.open_width == pytest.approx(55e-9)
        assert inst.effective_open_width == pytest.approx(40e-9)
        assert inst.geometry.grating_to_detector == pytest.approx(1.25)
        assert inst.array_mode == ArrayMode.COHERENT
        assert inst.erosion_mode == ErosionMode.MORPHOLOGICAL
        assert config.analysis.fit.weighting == Weighting.POISSON
        assert config.analysis.fit.open_width_effective.value == pytest.approx(55e-9)

    def test_defaults_when_sections_are_sparse(self, config_path):
        config = parse_config(config_path("straight_grating_100nm").read_text(encoding="utf-8"))
        assert config.instrument.deflection.mean_kick == pytest.approx(150e-6)
        assert config.instrument.wavelength_sample_count == 31
        fit = config.analysis.fit
        assert fit.weighting == Weighting.UNIFORM
        assert fit.open_width_effective.value == pytest.approx(50e-9)

    def test_missing_unit_names_field_and_line(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        broken = text.replace('"period": "100 nm"', '"period": 100')
        line = next(i for i, row in enumerate(broken.splitlines(), 1) if '"period"' in row)
        with pytest.raises(ConfigError) as err:
            parse_config(broken, "straight.json")
        assert err.value.field == "hologram.period"
        assert err.value.line == line
        assert "explicit unit" in err.value.reason
        assert str(err.value).startswith(f"straight.json:{line}:")

    def test_wrong_dimension_is_rejected(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        with pytest.raises(ConfigError) as err:
            parse_config(text.replace('"diameter": "400 nm"', '"diameter": "400 urad"'))
        assert err.value.field == "hologram.diameter"
        assert "angle" in err.value.reason

    def test_unknown_keys_and_sections(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        with pytest.raises(ConfigError) as err:
            parse_config(text.replace('"dislocations": 0,', '"dislocations": 0, "colour": "blue",'))
        assert err.value.field == "hologram.colour"
        with pytest.raises(ConfigError):
            parse_config(text.replace('"name":', '"extras": {}, "name":'))

    def test_unknown_species_in_composition(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        with pytest.raises(ConfigError) as err:
            parse_config(text.replace('"he2_dimer": 0.5', '"he3_trimer": 0.5'))
        assert err.value.field == "beam.composition.he3_trimer"

    def test_physics_errors_become_config_errors(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        with pytest.raises(ConfigError):
            parse_config(text.replace('"open_fraction": 0.5', '"open_fraction": 1.5'))
        with pytest.raises(ConfigError) as err:
            parse_config("{not json")
        assert err.value.line == 1

    def test_custom_species_table(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        text = text.replace('"beam": {', '"species": {"he3_atom": {"mass": "3.016 u", "detection_class": '
                                         '"triplet_atom"}},\n  "beam": {')
        config = parse_config(text.replace('"he2_dimer": 0.5', '"he3_atom": 0.5'))
        assert "he3_atom" in config.all_species()
        assert config.species["he3_atom"].mass == pytest.approx(3.016 * 1.66053906660e-27, rel=1e-6)

    def test_fit_section_parses(self, config_path):
        fit = parse_config(_with_fit_section(config_path)).analysis.fit
        assert fit.open_width_effective.upper == pytest.approx(80e-9)
        assert fit.fractional_fwhm.upper == pytest.approx(0.1)

    @pytest.mark.parametrize("old, new, field", [
        ('"max": "80 nm"', '"max": "100 nm"', "analysis.fit.open_width_effective.max"),
        ('"max": "80 nm"', '"max": "120 nm"', "analysis.fit.open_width_effective.max"),
        ('"min": "20 nm"', '"min": "0 nm"', "analysis.fit.open_width_effective.min"),
        ('"max": 0.1', '"max": 1.0', "analysis.fit.fractional_fwhm.max"),
        ('"min": 0.0, "max": 0.1', '"min": -0.1, "max": 0.1', "analysis.fit.fractional_fwhm.min"),
    ])
    def test_fit_bounds_outside_the_model_domain(self, config_path, old, new, field):
        text = _with_fit_section(config_path, (old, new))
        key = field.split(".")[2]
        line = next(i for i, row in enumerate(text.splitlines(), 1) if f'"{key}": {{"value"' in row)
        with pytest.raises(ConfigError) as err:
            parse_config(text, "straight.json")
        assert err.value.field == field
        assert err.value.line == line
        assert err.value.exit_code == 1

    def test_key_lines_follow_nesting(self):
        text = "\n".join([
            "{",
            '  "name": "fit",',
            '  "beam": {"max": 1},',
            '  "analysis": {',
            '    "fit": {',
            '      "width": {"value": 1, "max": 2},',
            '      "fwhm": {"value": 1, "max": 2}',
            "    }",
            "  },",
            '  "list": [{"a": "b:"}, {"b": 2}]',
            "}",
        ])
        lines = key_lines(text)
        assert lines["beam.max"] == 3
        assert lines["analysis.fit"] == 5
        assert lines["analysis.fit.width.max"] == 6
        assert lines["analysis.fit.fwhm.max"] == 7
        assert lines["list.a"] == 10 and lines["list.b"] == 10
        assert "b:" not in lines and "list.a.b" not in lines

    def test_missing_key_points_at_its_section(self, config_path):
        text = config_path("straight_grating_100nm").read_text(encoding="utf-8")
        broken = text.replace('"detector_pixel_angle": "20 urad",', "")
        line = next(i for i, row in enumerate(broken.splitlines(), 1) if '"instrument"' in row)
        with pytest.raises(ConfigError) as err:
            parse_config(broken)
        assert err.value.field == "instrument.detector_pixel_angle"
        assert err.value.line == line


class TestConfigManager:

    def test_environment_variable_selects_the_file(self, config_path, monkeypatch):
        monkeypatch.setenv("VORTEX_CONFIG", str(config_path("double_edge_600nm")))
        config = ConfigManager().load()
        assert config.spec.dislocations == 2

    def test_no_configuration_is_an_error(self, monkeypatch):
        monkeypatch.delenv("VORTEX_CONFIG", raising=False)
        with pytest.raises(ConfigError):
            ConfigManager().load()

    def test_validate_config_file(self, config_path, tmp_path):
        manager = ConfigManager(str(config_path("single_edge_600nm")))
        assert manager.validate_config_file(str(config_path("single_edge_600nm"))) == (True, "Configuration is valid")
        assert manager.validate_config_file("")[0] is False
        assert "does not exist" in manager.validate_config_file(str(tmp_path / "none.json"))[1]
        assert "not a file" in manager.validate_config_file(str(tmp_path))[1]
        bad = tmp_path / "bad.json"
        bad.write_text('{"name": "x"}', encoding="utf-8")
        ok, message = manager.validate_config_file(str(bad))
        assert not ok and "missing section" in message

    def test_save_writes_si_units(self, config_path, tmp_path):
        manager = ConfigManager(str(config_path("single_edge_600nm")))
        config = manager.load()
        target = tmp_path / "saved.json"
        manager.save(config, str(target))
        assert '"period": "1e-07 m"' in target.read_text(encoding="utf-8")
        assert ConfigManager(str(target)).load() == config


class TestRunLedger:

    def test_record_and_recent(self, tmp_path):
        ledger = RunLedger(str(tmp_path / "runs.json"))
        first = ledger.record("simulate", {"config_sha256": "abc"})
        ledger.record("fit", {"converged": True})
        assert first.startswith("simulate_")
        assert [r["command"] for r in ledger.recent()] == ["simulate", "fit"]
        assert ledger.recent(command="fit")[0]["details"] == {"converged": True}

    def test_ledger_keeps_latest_records(self, tmp_path, monkeypatch):
        monkeypatch.setattr(run_ledger, "MAX_RECORDS", 5)
        ledger = RunLedger(str(tmp_path / "runs.json"))
        for i in range(8):
            ledger.record("design", {"index": i})
        assert [r["details"]["index"] for r in ledger.recent()] == [3, 4, 5, 6, 7]

    def test_corrupt_ledger_reads_as_empty(self, tmp_path):
        path = tmp_path / "runs.json"
        path.write_text("{broken", encoding="utf-8")
        assert RunLedger(str(path)).recent() == []


class TestDataFormats:

    def test_vwi_header_and_payload(self, tmp_path):
        values = np.arange(6, dtype=float).reshape(2, 3)
        path = tmp_path / "map.vwi"
        data_formats.write_vwi(path, values, 30e-6, "unit_sum")
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        fields = header.decode("ascii").split()
        assert fields[:3] == ["VWI1", "3", "2"] and fields[4] == "unit_sum"
        assert float(fields[3]) == pytest.approx(30.0)
        assert len(payload) == 48
        assert data_formats.is_vwi(path)
        decoded, pitch, normalization = data_formats.read_vwi(path)
        assert np.array_equal(decoded, values)
        assert pitch == pytest.approx(30e-6)
        assert normalization == "unit_sum"

    def test_vwi_errors(self):
        with pytest.raises(DataFormatError) as err:
            data_formats.decode_vwi(b"VWI2 1 1 30 raw\n" + bytes(8))
        assert err.value.line == 1
        with pytest.raises(DataFormatError) as err:
            data_formats.decode_vwi(b"VWI1 2 2 30 raw\n" + bytes(8))
        assert err.value.line == 2

    def test_events_text(self):
        text = data_formats.encode_events(np.array([1e-6, -2.5e-6]), np.array([0.0, 3e-6]),
                                          np.array(["he_triplet", "he2_dimer"]), 7, "philox4x64", "abc")
        assert text.splitlines()[:4] == ["# seed=7", "# rng=philox4x64", "# config=abc",
                                         "theta_x_urad,theta_y_urad,species"]
        assert text.splitlines()[4] == "1.0000,0.0000,he_triplet"
        frame, seed, rng = data_formats.decode_events(text)
        assert seed == 7 and rng == "philox4x64"
        assert np.allclose(frame["theta_x"], [1e-6, -2.5e-6])
        assert list(frame["species"]) == ["he_triplet", "he2_dimer"]

    def test_event_errors_name_the_line(self):
        with pytest.raises(DataFormatError):
            data_formats.decode_events("theta_x_urad,theta_y_urad,species\n1,2,he\n")
        text = "# seed=1\n# rng=x\ntheta_x_urad,theta_y_urad,species\n1.0,2.0,he\nabc,2.0,he\n"
        with pytest.raises(DataFormatError) as err:
            data_formats.decode_events(text, "events.csv")
        assert err.value.line == 5
        assert str(err.value).startswith("events.csv:5:")

    def test_line_cut_text(self):
        text = data_formats.encode_line_cut(np.array([-30e-6, 0.0, 30e-6]), np.array([1.0, 5.0, 2.0]),
                                            {"box_width": 30e-6})
        positions, values, comments = data_formats.decode_line_cut(text)
        assert np.allclose(positions, [-30e-6, 0.0, 30e-6])
        assert np.array_equal(values, [1.0, 5.0, 2.0])
        assert float(comments["box_width"]) == pytest.approx(30e-6)
        with pytest.raises(DataFormatError) as err:
            data_formats.decode_line_cut("# a=1\nangle,value\n0,1\n")
        assert err.value.line == 2

    def test_metadata_sidecar(self, tmp_path):
        meta = data_formats.write_metadata(tmp_path / "map.vwi", {"seed": 3, "config_sha256": "abc"})
        assert meta.name == "map.vwi.meta"
        assert meta.read_text(encoding="utf-8") == "seed=3\nconfig_sha256=abc\n"

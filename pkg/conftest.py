"""Shared pytest fixtures: reference holograms, rasters and small instrument models."""

from dataclasses import replace
from pathlib import Path

import pytest

from beam_source import HE2_DIMER, HE_TRIPLET, BeamlineGeometry, BeamModel
from hologram import HologramSpec, TileLayout, rasterize
from instrument import ArrayMode, InstrumentModel

REPO_ROOT = Path(__file__).resolve().parent
CONFIG_DIR = REPO_ROOT / "configs"

HE4_SPEED = 1090.0


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo repetitions (deselect with -m 'not slow')")


@pytest.fixture(scope="session")
def fork_spec():
    return HologramSpec(period=100e-9, dislocations=1, diameter=600e-9, open_fraction=0.5)


@pytest.fixture(scope="session")
def fork_mask(fork_spec):
    return rasterize(fork_spec, 2.5e-9)


@pytest.fixture(scope="session")
def beamline():
    return BeamlineGeometry(
        valve_to_skimmer=0.4,
        skimmer_to_grating=1.4,
        grating_to_detector=1.25,
        skimmer_aperture=150e-6,
        grating_array_extent=50e-6,
    )


@pytest.fixture(scope="session")
def triplet_beam():
    return BeamModel(HE4_SPEED, 0.03, ((HE_TRIPLET, 1.0),))


@pytest.fixture(scope="session")
def mixed_beam():
    return BeamModel(HE4_SPEED, 0.03, ((HE_TRIPLET, 0.5), (HE2_DIMER, 0.5)))


@pytest.fixture(scope="session")
def small_model(triplet_beam, beamline, fork_spec):
    """Single hologram on a coarse 30 urad grid: fast enough for unit tests"""
    return InstrumentModel(
        beam=triplet_beam,
        geometry=beamline,
        layout=TileLayout(1.2e-6, 1.2e-6),
        spec=fork_spec,
        detector_pixel_angle=30e-6,
        wavelength_sample_count=11,
        sim_pixel_angle=30e-6,
        half_width_x=2.4e-3,
        half_width_y=1.2e-3,
        array_mode=ArrayMode.NONE,
    )


@pytest.fixture(scope="session")
def ideal_model(small_model):
    return small_model.ideal()


@pytest.fixture(scope="session")
def mixed_ideal_model(small_model, mixed_beam):
    return replace(small_model, beam=replace(mixed_beam, fractional_fwhm=0.0), collimation=False)


@pytest.fixture
def config_path():
    def _path(name: str) -> Path:
        return CONFIG_DIR / f"{name}.json"
    return _path

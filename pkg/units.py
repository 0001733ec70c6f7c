#!/usr/bin/env python3
"""
Unit-Suffixed Quantities
========================

Parses and formats the "<number> <unit>" strings used in experiment
configurations. All values are converted to SI on the way in; a missing or
foreign unit is rejected so a pm/nm slip can never pass silently.
"""

import re
from typing import Dict

from scipy import constants

from vortex_errors import ConfigError

UNIT_TABLE: Dict[str, Dict[str, float]] = {
    "length": {
        "pm": constants.pico,
        "nm": constants.nano,
        "um": constants.micro,
        "μm": constants.micro,
        "mm": constants.milli,
        "m": 1.0,
    },
    "angle": {
        "urad": constants.micro,
        "μrad": constants.micro,
        "mrad": constants.milli,
        "rad": 1.0,
    },
    "speed": {
        "m/s": 1.0,
        "km/s": constants.kilo,
    },
    "mass": {
        "kg": 1.0,
        "u": constants.atomic_mass,
    },
}

# Unit used when writing a dimension back out
SI_UNIT = {"length": "m", "angle": "rad", "speed": "m/s", "mass": "kg"}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([^\s\d].*?)?\s*$")


def parse_quantity(text: str, dimension: str, field: str = "value") -> float:
    """Convert a unit-suffixed string such as "100 nm" to SI.

    Raises ConfigError naming `field` when the unit is missing, unknown or
    of the wrong dimension.
    """
    if dimension not in UNIT_TABLE:
        raise ValueError(f"Unknown dimension: {dimension}")
    if not isinstance(text, str):
        raise ConfigError(field, f"expected a {dimension} with explicit unit (e.g. \"{_example(dimension)}\"), got {text!r}")

    match = _QUANTITY.match(text)
    if not match:
        raise ConfigError(field, f"cannot parse quantity {text!r}")
    number, unit = match.group(1), match.group(2)
    if not unit:
        raise ConfigError(field, f"missing unit in {text!r} (expected {dimension}, e.g. \"{_example(dimension)}\")")

    for dim, units in UNIT_TABLE.items():
        if unit in units:
            if dim != dimension:
                raise ConfigError(field, f"unit {unit!r} is a {dim}, expected a {dimension}")
            return float(number) * units[unit]
    raise ConfigError(field, f"unknown unit {unit!r} (allowed: {', '.join(UNIT_TABLE[dimension])})")


def format_quantity(value: float, dimension: str) -> str:
    """Format an SI value with its SI unit; repr keeps the float exact."""
    return f"{float(value)!r} {SI_UNIT[dimension]}"


def _example(dimension: str) -> str:
    return {"length": "100 nm", "angle": "30 urad", "speed": "1090 m/s", "mass": "4.0026 u"}[dimension]

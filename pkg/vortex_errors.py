#!/usr/bin/env python3
"""
Vortex Toolkit Errors
=====================

Exception hierarchy shared by every module. Each error carries the process
exit code the command-line front end reports for it.
"""

from typing import Optional


class VortexError(Exception):
    """Base class for toolkit errors"""
    exit_code = 1


class DomainError(VortexError, ValueError):
    """Physical input outside its domain (non-positive length, bad count, ...)"""


class ResolutionError(DomainError):
    """Raster pitch too coarse for the requested fringe period"""


class GridMismatchError(DomainError):
    """Maps or images defined on different angular grids"""


class SamplingError(DomainError):
    """Events requested from a map that carries no probability"""


class UnreliableWindingError(DomainError):
    """Winding circle passes through near-zero amplitude"""


class PropagationError(VortexError):
    """Transform too large or produced a non-finite field"""
    exit_code = 2


class PhysicsValidityError(VortexError):
    """Model assumptions violated (e.g. Fraunhofer regime)"""
    exit_code = 2


class FitAbortError(VortexError):
    """Forward model returned a non-finite residual during fitting"""
    exit_code = 3


class ConfigError(VortexError, ValueError):
    """Invalid experiment configuration, located by field and line"""

    def __init__(self, field: str, reason: str, line: Optional[int] = None, source: Optional[str] = None):
        self.field = field
        self.reason = reason
        self.line = line
        self.source = source
        location = source or "<config>"
        if line is not None:
            location = f"{location}:{line}"
        super().__init__(f"{location}: {field}: {reason}")


class DataFormatError(VortexError, ValueError):
    """Malformed data file; names the offending line"""

    def __init__(self, path: str, line: int, reason: str):
        self.path = path
        self.line = line
        self.reason = reason
        super().__init__(f"{path}:{line}: {reason}")

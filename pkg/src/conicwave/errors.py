# errors.py
"""Exception types shared across the package."""

from __future__ import annotations


class ConicwaveError(Exception):
    """Base class for all package errors."""


class DomainError(ConicwaveError):
    """Evaluation outside the mathematical domain (e.g. r <= 0)."""


class CapabilityError(ConicwaveError):
    """A derivative order or feature the object cannot provide."""


class ConfigurationError(ConicwaveError):
    """Invalid configuration: bad constants, empty lattices, schema errors."""


class PreconditionError(ConicwaveError):
    """An operation's stated precondition is violated."""


class DivergenceError(ConicwaveError):
    """Fixed-point iteration failed to converge."""

    def __init__(self, message: str, residual_history=None, ratio=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])
        self.ratio = ratio


class InversionError(ConicwaveError):
    """Newton inversion of a map failed to converge."""


class RangeError(ConicwaveError):
    """Query outside the image of a constructed map (e.g. flow inversion)."""


class ConsistencyError(ConicwaveError):
    """An a-posteriori consistency check failed (e.g. path left cutoff region)."""


class StiffnessError(ConicwaveError):
    """Time stepping failed: step-size underflow or linear solver stall."""


class SupportError(ConicwaveError):
    """Spectral support of a wave function leaks outside the built windows."""


class GluingError(ConicwaveError):
    """A re-initialization in the global gluing violates its smallness condition."""


class ThresholdError(ConicwaveError):
    """Time too small for an asymptotic construction (e.g. Morse reduction)."""


class OscillatoryIntegralError(ConicwaveError):
    """Oscillatory quadrature failed its self-consistency refinement check."""

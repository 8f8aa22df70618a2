"""Exception hierarchy shared by all jdcalc modules.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures (divergence, instability, lost positivity)
with 3, threshold violations with 1.
"""


class JdcalcError(Exception):
    """Base class for all errors raised by jdcalc."""


class ConfigurationError(JdcalcError):
    """Invalid configuration: bad grid, bad preset parameters, bad CLI config."""


class PresetLookupError(ConfigurationError):
    """Unknown preset name; carries the list of registered names."""

    def __init__(self, name, available):
        self.name = name
        self.available = list(available)
        super().__init__(
            f"unknown preset {name!r}; available presets: {', '.join(self.available)}"
        )


class InsufficientDataError(ConfigurationError):
    """A study was requested with too few grid levels or seeds."""


class NumericalError(JdcalcError):
    """Base class for runtime numerical failures."""


class DivergenceError(NumericalError):
    """State or field accumulation became non-finite."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class StabilityError(NumericalError):
    """Explicit density step would violate its stability bound."""

    def __init__(self, message, suggested_dt=None):
        self.suggested_dt = suggested_dt
        super().__init__(message)


class NegativityError(NumericalError):
    """Density went negative beyond the clipping tolerance."""


class NonMonotoneJumpError(NumericalError):
    """The per-event jump map x -> x + g is not strictly increasing."""


class CouplingError(JdcalcError):
    """Two objects that must share one noise realization do not."""

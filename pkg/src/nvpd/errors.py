"""Exception hierarchy for nvpd."""


class NVPDError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(NVPDError, ValueError):
    pass


class InvalidLifetimeError(InvalidParameterError):
    pass


class InvalidStateError(NVPDError, ValueError):
    pass


class NonFiniteError(NVPDError, ValueError):
    pass


class AmbiguousSteadyStateError(NVPDError):
    """The generator has more than one independent stationary vector.

    ``blocks`` lists the closed (absorbing) groups of levels; each one
    carries its own stationary distribution.
    """

    def __init__(self, blocks):
        self.blocks = [tuple(b) for b in blocks]
        names = "; ".join("{" + ", ".join(b) + "}" for b in self.blocks)
        super().__init__(
            f"steady state is not unique: {len(self.blocks)} decoupled blocks {names}"
        )


class NormalizationError(NVPDError):
    """Steady-state PL is zero, so a trace cannot be normalized."""


class PreprocessError(NVPDError):
    pass


class NoThresholdCrossingError(PreprocessError):
    pass


class OnsetNotFoundError(PreprocessError):
    """No positive-to-negative derivative change after the threshold (AOM rise not found)."""


class FitError(NVPDError):
    pass


class ConvergenceError(FitError):
    pass


class EmptyBandError(NVPDError):
    pass


class SchemaError(NVPDError, ValueError):
    """A config or sidecar document failed validation."""

"""Exception hierarchy shared by all stages."""


class SplatSimError(Exception):
    """Base class for errors raised by splatsim."""


class FormatError(SplatSimError):
    """Malformed or incomplete input file."""


class DataError(SplatSimError):
    """Well-formed input carrying invalid values (NaN, non-rigid extrinsics, ...)."""


class ConfigError(SplatSimError):
    """Invalid or inconsistent pipeline configuration."""


class SimulationError(SplatSimError):
    """Simulation precondition violated, e.g. a particle left the grid."""


class NumericalError(SimulationError):
    """Non-finite simulation state."""

    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle

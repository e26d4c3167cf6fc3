"""
Error hierarchy for TrapSim
Each class carries the CLI exit code it maps to
"""


class TrapSimError(Exception):
    """Base class for all simulator errors"""

    exit_code = 3


class InvalidArgumentError(TrapSimError, ValueError):
    """An input is non-finite, out of range or structurally wrong"""

    exit_code = 2


class AmbiguousDetuningError(InvalidArgumentError):
    """Trap wavelength sits between (or on) the D1 and D2 lines"""


class UnboundEnsembleError(InvalidArgumentError):
    """Thermal energy k_B*T reaches the trap depth"""


class OutOfModelError(InvalidArgumentError):
    """An atom energy lies outside the harmonic-trap model"""


class DegenerateDataError(InvalidArgumentError):
    """Data carry no information for a fit (e.g. constant y)"""


class ConfigError(TrapSimError):
    """Experiment configuration failed to parse or validate"""

    exit_code = 2

    def __init__(self, message: str, line: int = None):
        super().__init__(message)
        self.line = line


class NumericError(TrapSimError):
    """A computation produced non-finite values"""

    exit_code = 3

"""
Error Types
===========
One exception hierarchy for the whole simulator.

Every class carries the process exit code that main.py returns when the
error reaches the command line:

    2  configuration problems (bad keys, bad values, impossible geometry)
    3  runtime problems (domain errors, unstable integration, missing inputs)
    4  fit / convergence problems
"""


class InterferometerError(Exception):
    """Base class for all simulator errors."""
    exit_code = 3


class ConfigError(InterferometerError):
    """Invalid or inconsistent configuration."""
    exit_code = 2


class DomainError(InterferometerError, ValueError):
    """A physical input outside its allowed range."""
    exit_code = 3


class LadderStepError(InterferometerError):
    """Momentum-ladder integration step too coarse or numerically unstable."""
    exit_code = 3

    def __init__(self, message, max_dt=None):
        super().__init__(message)
        self.max_dt = max_dt


class MissingInputError(InterferometerError):
    """Report inputs absent from a run directory."""
    exit_code = 3

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("Missing input files: " + ", ".join(self.missing))


class FitError(InterferometerError):
    """Fringe fit could not produce a result."""
    exit_code = 4


class InsufficientDataError(FitError):
    """Too few bins to constrain the fringe model."""


class ConvergenceError(FitError):
    """Local refinement failed; carries the best coarse-grid point."""

    def __init__(self, message, best_guess=None):
        super().__init__(message)
        self.best_guess = best_guess


class SensitivityError(FitError):
    """Fringe slope vanishes, phase sensitivity undefined."""

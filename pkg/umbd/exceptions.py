"""
Exception classes for the UMBD refiner.

This module contains custom exception classes used throughout the package.
Each exception carries the process exit code the CLI reports for it.
"""


class UMBDError(Exception):
    """Base class for all errors raised by the package."""
    exit_code = 1


class ConfigurationError(UMBDError):
    """Exception raised for invalid configuration values or command-line flags."""
    exit_code = 2


class ShapeMismatchError(UMBDError, ValueError):
    """Exception raised when two maps that must align have different shapes."""
    exit_code = 2


class ScheduleRangeError(UMBDError, ValueError):
    """Exception raised when a diffusion step index falls outside the schedule."""
    exit_code = 2


class DatasetError(UMBDError):
    """Exception raised for missing or corrupt dataset files."""
    exit_code = 3


class CheckpointError(UMBDError):
    """Exception raised when a checkpoint cannot be read or has the wrong format."""
    exit_code = 3


class NumericalError(UMBDError):
    """Exception raised when training produces a non-finite loss."""
    exit_code = 4


class FreezeViolationError(UMBDError):
    """Exception raised when the parameters of a frozen network changed."""
    exit_code = 4

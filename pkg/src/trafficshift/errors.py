"""Exception types raised across the package."""


class TrafficShiftError(Exception):
    """Base class for package errors."""


class ConfigError(TrafficShiftError, ValueError):
    """Invalid configuration or experiment setup."""


class DataError(TrafficShiftError, ValueError):
    """Data is missing, too short, or filtered away entirely."""


class NumericError(TrafficShiftError, ArithmeticError):
    """Non-finite values or degenerate numerics."""

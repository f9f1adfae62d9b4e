'''
Exception classes shared by all modules. The command line maps each category to its own exit code.
'''
from __future__ import annotations


class EfpnError(Exception):
    category = 'internal'
    exitCode = 1


class ConfigurationError(EfpnError, ValueError):
    category = 'config'
    exitCode = 2


class DataError(EfpnError, ValueError):
    category = 'data'
    exitCode = 3


class NumericError(EfpnError, ArithmeticError):
    category = 'numeric'
    exitCode = 4


class CheckpointFileError(EfpnError, IOError):
    category = 'file'
    exitCode = 5


class UsageError(EfpnError, RuntimeError):
    category = 'usage'
    exitCode = 6


class PlanningError(EfpnError, RuntimeError):
    category = 'planning'
    exitCode = 6


class UndefinedMetricError(EfpnError, ValueError):
    category = 'metric'
    exitCode = 6

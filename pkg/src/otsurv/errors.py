"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes (see ``otsurv.cli``):
parse/config problems, bad data, solver failures, and numeric failures
are kept apart so callers can branch on the failure class.
"""


class OtsurvError(Exception):
    """Base class for all package errors."""


class ParameterError(OtsurvError):
    """An argument value is outside its documented domain."""


class ConfigError(ParameterError):
    """A configuration file is malformed or carries unknown keys."""


class FormatError(OtsurvError):
    """A file does not conform to its declared on-disk format."""


class DataError(OtsurvError):
    """Input data is syntactically fine but semantically unusable."""


class ShapeError(DataError):
    """Array dimensions are mutually inconsistent."""


class ConstraintError(OtsurvError):
    """A transport problem is infeasible as posed."""


class SolverError(OtsurvError):
    """A solver failed in a way that is not a convergence shortfall."""


class NumericError(OtsurvError):
    """A non-finite value reached a place that cannot tolerate one."""


class StateError(OtsurvError):
    """An object was used in an order its lifecycle forbids."""


class MetricUndefinedError(DataError):
    """A requested statistic is undefined on the given data."""

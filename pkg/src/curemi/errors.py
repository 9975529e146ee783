"""Exception classes raised across the package.

Every error carries a class name that the command-line front end prints
verbatim, so the names double as a machine-parsable error vocabulary.
"""


class CureMIError(Exception):
    """Base class for all package errors."""


# data ingestion
class MalformedRow(CureMIError):
    pass


class NonNumericCell(CureMIError):
    pass


class NegativeTime(CureMIError):
    pass


class StatusNotBinary(CureMIError):
    pass


class CovariateNotBinary(CureMIError):
    pass


class SchemaMismatch(CureMIError):
    pass


class SpecColumnUnknown(CureMIError):
    pass


class MissingDataPresent(CureMIError):
    pass


# numerical kernels
class Separation(CureMIError):
    pass


class RankDeficient(CureMIError):
    pass


class NoEvents(CureMIError):
    pass


class Monotone(CureMIError):
    pass


# estimation / imputation
class NotConverged(CureMIError):
    pass


class TooManyFailures(CureMIError):
    pass


class ZeroAcceptance(CureMIError):
    pass


class InitFailure(CureMIError):
    pass


class DimensionMismatch(CureMIError):
    pass


class UnknownScenario(CureMIError):
    pass

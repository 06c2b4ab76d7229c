"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`FPConnError`
so callers (and the CLI) can map failures onto exit codes.
"""


class FPConnError(Exception):
    """Base class for all library errors."""


class ParameterError(FPConnError, ValueError):
    """An argument is outside its documented range."""


class ConstructionError(FPConnError):
    """A derived structure (sphere, neighbourhood, permutation) could not be built."""


class DomainError(FPConnError):
    """The simulation domain is empty or a query falls outside of it."""


class AssemblyError(FPConnError):
    """The sparse operator could not be assembled consistently."""


class SpectralShiftError(AssemblyError):
    """The exponential length-bias shift kappa destroys diagonal positivity."""


class CalibrationError(FPConnError):
    """The angular calibration factor could not be determined."""


class SolverError(FPConnError):
    """Base class for linear solver failures."""


class NonConvergenceError(SolverError):
    """GMRES did not reach the requested tolerance.

    The partial :class:`~fpconn.solver.SolveReport` is attached as ``report``
    so the residual history can be inspected or logged.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SingularSystemError(SolverError):
    """The system matrix is (numerically) singular, e.g. the zero operator."""


class DegenerateRegionError(FPConnError):
    """A seed region has non-positive self connectivity."""


class InsufficientSamplesError(FPConnError):
    """A Monte-Carlo estimate received no hits in its target region."""


class SpecError(FPConnError):
    """A phantom specification is geometrically invalid."""


class UndefinedMetricError(FPConnError, ValueError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


class VolumeFormatError(FPConnError):
    """A volume file or its sidecar is missing, malformed or inconsistent."""


class ConfigError(FPConnError):
    """An experiment configuration is invalid or references missing inputs."""

"""Exception types raised by the library."""


class VolterraLiftError(ValueError):
    """Base class for invalid input and unsupported requests."""


class KernelError(VolterraLiftError):
    pass


class MeasureMismatchError(VolterraLiftError):
    """Two lift states (or a state and a measure) live on different measures."""


class NoInvariantMeasureError(VolterraLiftError):
    """The Gaussian lift has no invariant probability measure.

    Raised when the measure has an atom at 0 or, for closed-form kernels,
    when the integral of theta^-1 near zero diverges.
    """


class CovarianceError(VolterraLiftError):
    pass


class CoefficientError(VolterraLiftError):
    pass


class ConfigError(VolterraLiftError):
    """Configuration failed validation.

    ``problems`` is a list of ``(field, message)`` pairs.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{field}: {message}" for field, message in self.problems]
        super().__init__("invalid configuration\n  " + "\n  ".join(lines))

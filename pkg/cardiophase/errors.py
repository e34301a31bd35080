"""Exception hierarchy shared by all cardiophase modules.

Every domain failure derives from :class:`CardiophaseError`; the concrete classes also
derive from the built-in exception a caller would naturally catch (``ValueError`` for bad
data, ``RuntimeError`` for optimiser breakdowns) so library users are not forced to import
this module.
"""


class CardiophaseError(Exception):
    """Base class for all errors raised by cardiophase."""


class VolumeFormatError(CardiophaseError, ValueError):
    """A volume or field file could not be parsed.

    Parameters
    ----------
    message : str
        Human readable description.
    field : str, optional
        Name of the offending header field, if any.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DegenerateInputError(CardiophaseError, ValueError):
    """Input carries no usable signal (constant volume, no motion, flat descriptor)."""


class RegistrationError(CardiophaseError, RuntimeError):
    """The registration optimiser produced a non-finite loss.

    Attributes
    ----------
    iteration : int
        Iteration index (within the pyramid level) at which the failure occurred.
    level : int
        Pyramid level, 0 being the finest.
    pair : int or None
        Index ``t`` of the failing pair in a sequence registration.
    """

    def __init__(self, message, iteration, level=0, pair=None):
        super().__init__(message)
        self.iteration = iteration
        self.level = level
        self.pair = pair

    def __reduce__(self):
        # keep attributes when crossing a process pool boundary
        return (type(self), (self.args[0], self.iteration, self.level, self.pair))


class PhaseRuleError(CardiophaseError, ValueError):
    """A key-frame rule found no qualifying frame in its search interval.

    Attributes
    ----------
    rule : str
        Name of the failed rule (``"ES"``, ``"PF"``, ``"ED"``, ...).
    interval : tuple of int
        Cyclic search interval ``(start, stop)`` in frames.
    """

    def __init__(self, rule, interval, detail=""):
        message = f"rule {rule} failed: no qualifying frame in cyclic interval {list(interval)}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.rule = rule
        self.interval = tuple(interval)
        self.detail = detail

    def __reduce__(self):
        return (type(self), (self.rule, self.interval, self.detail))


class ConfigError(CardiophaseError, ValueError):
    """Invalid command-line usage or configuration file content."""

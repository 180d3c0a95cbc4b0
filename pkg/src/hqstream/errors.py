"""Exception hierarchy shared by every hqstream module."""


class HQError(Exception):
    """Base class for all hqstream errors."""


class ShapeError(HQError, ValueError):
    """Arrays that must agree in shape do not."""


class ScheduleError(HQError, ValueError):
    """A step schedule violates one of its invariants.

    ``layer`` and ``channel`` are 1-based / 0-based respectively and point at
    the first offending entry (``channel`` is None for per-layer fields).
    """

    def __init__(self, message, layer=None, channel=None):
        super().__init__(message)
        self.layer = layer
        self.channel = channel


class FormatError(HQError, ValueError):
    """A serialized latent or container could not be parsed."""


class DecodeError(HQError):
    """The entropy-coded payload is inconsistent with the model."""


class NestingError(HQError):
    """A value escaped the interval it was supposed to be nested in."""


class DegeneratePMFError(HQError):
    """The conditioning interval carries (numerically) zero probability."""

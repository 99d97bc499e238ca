"""Exception hierarchy shared by all gptvq modules."""


class GPTVQError(Exception):
    """Base class for every error raised by this package."""


class InputError(GPTVQError):
    """Malformed or inconsistent input data (files, shapes, containers)."""


class NumericError(GPTVQError):
    """A numerical procedure could not complete."""


class BadMagic(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class NonFinite(InputError):
    pass


class EmptyCalibration(InputError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class TooFewPoints(NumericError):
    pass


class ConfigShapeMismatch(InputError):
    pass


class NotPrepared(InputError):
    pass


class UnsupportedDimensionality(InputError):
    pass


class IndexOutOfRange(InputError):
    pass


class ShortBuffer(InputError):
    pass


class NonCanonicalPadding(InputError):
    pass


class CorruptHeader(InputError):
    pass


class NotIntegerCodebook(InputError):
    pass


class ZeroSignal(InputError):
    pass


class BadBits(InputError):
    pass


class InfeasibleOverhead(InputError):
    pass

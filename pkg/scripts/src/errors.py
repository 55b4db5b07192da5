"""
Exceptions raised by the defense pipeline. Every error carries the process exit
code the experiment runner reports for it.
"""


class OTCClipError(Exception):
    exit_code = 1


class InvalidConfigError(OTCClipError):
    exit_code = 2


class MissingInputError(OTCClipError):
    exit_code = 3


class NumericalError(OTCClipError):
    exit_code = 4


class DegenerateNormError(NumericalError):
    pass


class ShapeError(OTCClipError, ValueError):
    exit_code = 4


class TensorFormatError(OTCClipError):
    exit_code = 4

"""Exception hierarchy.

Every error raised by the package derives from :class:`CondNoiseError`.
The two intermediate classes fix the CLI exit code: data problems exit 3,
numeric failures exit 4.
"""


class CondNoiseError(Exception):
    exit_code = 1


class DataError(CondNoiseError):
    exit_code = 3


class NumericError(CondNoiseError):
    exit_code = 4


class UnsupportedFormat(DataError):
    pass


class BitDepthMismatch(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class InvalidSpec(DataError):
    pass


class EmptyPatch(DataError):
    pass


class TooFewPatches(NumericError):
    pass


class RankDeficient(NumericError):
    pass


class ShapeMismatch(DataError):
    pass


class NotDivisible(DataError):
    pass


class NotScalar(NumericError):
    pass


class UntrackedGraph(NumericError):
    pass


class DataEmpty(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class ZeroTruth(DataError):
    pass

"""Exception types shared across the package.

Plain I/O failures (missing files, permissions) are left to the builtin
OSError family; everything with package-specific meaning gets a class here.
"""


class SalientError(Exception):
    """Base class for package-specific errors."""


# audio front end
class UnsupportedFormat(SalientError):
    pass


class CorruptFile(SalientError):
    pass


class InvalidRange(SalientError):
    pass


class OutOfBounds(SalientError):
    pass


class TooShort(SalientError):
    pass


# corpus building / mixing
class SilentSignal(SalientError):
    pass


class NoiseTooShort(SalientError):
    pass


class ManifestEmpty(SalientError):
    pass


class UtteranceTooShort(SalientError):
    pass


class ParseError(SalientError):
    pass


class MissingFile(SalientError):
    pass


# autodiff engine
class ShapeMismatch(SalientError):
    pass


class NonFiniteValue(SalientError):
    pass


class NotScalar(SalientError):
    pass


class DetachedGraph(SalientError):
    pass


class InvalidStep(SalientError):
    pass


# losses
class QTooSmall(SalientError):
    pass


class DimMismatch(SalientError):
    pass


class TooFewSamples(SalientError):
    pass


# serialized artifacts (checkpoints, feature files)
class BadMagic(SalientError):
    pass


class VersionMismatch(SalientError):
    pass


class TruncatedFile(SalientError):
    pass


class ConfigMismatch(SalientError):
    pass


# training / resynthesis
class NonFiniteLoss(SalientError):
    pass


class InvalidIterations(SalientError):
    pass

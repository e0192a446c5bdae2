"""Exception types raised across the toolkit."""


class MkwsError(Exception):
    """Base class for all toolkit errors."""


class AudioFormatError(MkwsError):
    pass


class ShapeError(MkwsError, ValueError):
    pass


class AlignmentError(MkwsError, ValueError):
    pass


class ExtractionError(MkwsError, ValueError):
    pass


class ManifestError(MkwsError, ValueError):
    pass


class AugmentError(MkwsError, ValueError):
    pass


class ModelFormatError(MkwsError):
    pass


class ChecksumError(ModelFormatError):
    pass


class FingerprintMismatch(MkwsError):
    pass


class InsufficientDataError(MkwsError, ValueError):
    pass

"""Exception hierarchy shared by every obalex module."""


class ObalexError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(ObalexError, ValueError):
    pass


class EmptyExplanation(ObalexError, ValueError):
    """An explanation carries no positive attribution, so the score is undefined."""


class NoCorrectClassifications(ObalexError, ValueError):
    pass


class IoError(ObalexError, OSError):
    pass


class UnsupportedFormat(ObalexError, ValueError):
    pass


class BadMagic(ObalexError, ValueError):
    pass


class VersionUnsupported(ObalexError, ValueError):
    pass


class LabelOutOfRange(ObalexError, ValueError):
    pass


class EmptyDataset(ObalexError, ValueError):
    pass


class NotAConvLayer(ObalexError, ValueError):
    pass


class InvalidSpec(ObalexError, ValueError):
    pass

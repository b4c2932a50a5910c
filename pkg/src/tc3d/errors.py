"""Exception hierarchy shared by every tc3d module."""


class TC3DError(Exception):
    """Base class for all errors raised by tc3d."""


class ShapeError(TC3DError, ValueError):
    """Operand shapes do not compose."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(message)


class LabelError(TC3DError, ValueError):
    pass


class VideoTooShortError(TC3DError, ValueError):
    """A video has fewer frames than the sampler configuration needs."""

    def __init__(self, frame_count, required):
        self.frame_count = frame_count
        self.required = required
        super().__init__(
            f"video has {frame_count} frames, sampler needs at least {required}")


class CorruptStreamError(TC3DError, ValueError):
    """An encoded stream or container failed validation while decoding."""


class UnknownSymbolError(TC3DError, KeyError):
    pass


class EmptyHistogramError(TC3DError, ValueError):
    pass


class ConfigError(TC3DError, ValueError):
    pass

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes disagree; ``axis`` names the offending dimension."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class PaddingRequiredError(ShapeError):
    pass


class GraphStateError(RuntimeError):
    """Backward was requested on a graph whose buffers were already freed."""


class NonFiniteError(ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NoValidPixelsError(ValueError):
    pass


class FlowFormatError(ValueError):
    """Malformed flow or image file."""


class TruncatedFileError(FlowFormatError):
    pass


class LayoutError(ValueError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class ConfigError(ValueError):
    pass


class CheckpointFormatError(FlowFormatError):
    """Malformed or incompatible checkpoint file."""

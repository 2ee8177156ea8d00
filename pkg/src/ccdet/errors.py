"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/parameter shapes do not line up. The message names the offending dims."""


class DataFormatError(ValueError):
    """A file on disk failed validation (bad magic, truncation, unsorted events...)."""


class NumericalError(RuntimeError):
    """Non-finite values appeared where finite numbers were required."""

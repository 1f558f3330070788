"""Exception hierarchy shared by every ivfuse module."""


class FusionError(Exception):
    """Base class for all package errors."""


class InvalidConversion(FusionError):
    pass


class InvalidChannelCount(FusionError):
    pass


class ShapeError(FusionError, ValueError):
    pass


class NumericalError(FusionError, ArithmeticError):
    pass


class ConfigError(FusionError, ValueError):
    pass


class DataError(FusionError):
    pass


class ImageIOError(FusionError, OSError):
    pass


class FormatError(ImageIOError):
    pass


class WeightImportError(FusionError):
    """Raised when checkpoint entries do not match the model.

    ``problems`` lists one human-readable line per offending entry.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("weight import failed:\n  " + "\n  ".join(self.problems))


class MissingArtifact(FusionError):
    """A prerequisite checkpoint or file is absent."""

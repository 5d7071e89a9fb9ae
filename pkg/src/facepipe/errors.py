"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class FacepipeError(Exception):
    exit_code = 1


class InvalidInputError(FacepipeError, ValueError):
    exit_code = 3


class ConfigError(FacepipeError, ValueError):
    exit_code = 5


class ModelError(FacepipeError):
    exit_code = 2


class ModelFormatError(ModelError, ValueError):
    """Base for FTM container parse failures."""


class BadMagicError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


class DanglingRefError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


class QuantizationError(ModelError):
    pass


class DegenerateConfigurationError(FacepipeError, ValueError):
    pass


class NoFaceError(FacepipeError):
    exit_code = 4


class NotFoundError(FacepipeError, KeyError):
    pass


class DimensionMismatchError(FacepipeError, ValueError):
    pass


class EmptyGroundTruthError(FacepipeError, ValueError):
    pass


class BenchmarkError(FacepipeError, RuntimeError):
    pass

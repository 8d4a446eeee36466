""" Exception types raised across the package. All of them are plain builtin subclasses. """


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class MeasurementError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class StateError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    pass

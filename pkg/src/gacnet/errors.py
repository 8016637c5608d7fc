class GACNetError(Exception):
    pass


class ConfigurationError(GACNetError, ValueError):
    """Shapes, dims or config values are inconsistent."""


class DegenerateInputError(GACNetError, ValueError):
    """Input carries no usable measurements (e.g. no valid depth)."""


class EmptyInputError(DegenerateInputError):
    pass


class FormatError(GACNetError, ValueError):
    """File on disk does not follow the expected encoding."""


class TrainingError(GACNetError, RuntimeError):
    pass

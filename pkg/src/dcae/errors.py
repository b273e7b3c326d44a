"""Exception types shared across the codec."""


class DcaeError(Exception):
    """Base class for all codec errors."""


class DimensionError(DcaeError, ValueError):
    """Operand shapes do not agree."""


class IntegrityError(DcaeError, ArithmeticError):
    """A value became non-finite or violated a numeric invariant."""


class ConfigurationError(DcaeError, ValueError):
    pass


class CorruptStreamError(DcaeError, ValueError):
    """An entropy-coded stream failed to decode cleanly."""


class CorruptContainerError(DcaeError, ValueError):
    pass


class UnsupportedFormatError(DcaeError, ValueError):
    pass


class MetricUndefinedError(DcaeError, ValueError):
    pass

"""Exception types shared across the package."""


class UnipromptError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UnipromptError, ValueError):
    pass


class ConfigurationError(UnipromptError, ValueError):
    pass


class ContractError(UnipromptError, RuntimeError):
    """A caller violated an operation's precondition (e.g. non-scalar backward root)."""


class GraphError(ContractError):
    """Backward was requested on a graph that has already been consumed."""


class LengthError(UnipromptError, ValueError):
    pass


class DataError(UnipromptError, ValueError):
    pass


class IntegrityError(DataError):
    """On-disk payload does not match its header or recorded checksum."""


class NonFiniteLossError(UnipromptError, FloatingPointError):
    def __init__(self, message, batch_indices=None, dump_path=None):
        super().__init__(message)
        self.batch_indices = batch_indices
        self.dump_path = dump_path

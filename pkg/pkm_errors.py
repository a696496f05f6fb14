class ConfigurationError(ValueError):
    """Invalid dimensions, hyperparameters or configuration documents."""


class ContractViolation(RuntimeError):
    """A caller broke a usage contract (eval cache in backward, duplicate
    sparse indices, concurrent access during re-initialization...)."""


class NonFiniteError(FloatingPointError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OracleDivergence(AssertionError):
    def __init__(self, message, reproduction=None):
        super().__init__(message)
        self.reproduction = reproduction or {}

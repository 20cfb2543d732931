"""Exception types raised across the package."""


class MptError(Exception):
    """Base class for all package errors."""


class DimensionError(MptError, ValueError):
    pass


class VocabularyError(MptError, IndexError):
    def __init__(self, index, vocab_size):
        super().__init__(f"token id {index} outside vocabulary [0, {vocab_size})")
        self.index = index
        self.vocab_size = vocab_size


class ConfigurationError(MptError, ValueError):
    pass


class ContractError(MptError, ValueError):
    """A precondition of an operation was violated by the caller."""


class LengthError(MptError, ValueError):
    pass


class CheckpointError(MptError):
    pass


class SchemaError(ConfigurationError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergedError(MptError, RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss

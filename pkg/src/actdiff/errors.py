"""Exception types shared across the package."""


class ActDiffError(Exception):
    pass


class InvalidConfigError(ActDiffError, ValueError):
    """A configuration value violates its documented range."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class InvalidInputError(ActDiffError, ValueError):
    pass


class EmptyOverlapError(InvalidInputError):
    """Raised when prior and current chunks share no timesteps (h == l)."""


class NumericInputError(ActDiffError, ValueError):
    pass


class DivergenceError(ActDiffError, FloatingPointError):
    def __init__(self, step):
        super().__init__(f"sampler iterate became non-finite at step {step}")
        self.step = step


class ParseError(ActDiffError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VersionError(ActDiffError):
    pass


class ContractViolation(ActDiffError, RuntimeError):
    pass


class GenerationError(ActDiffError, RuntimeError):
    pass


class InvalidStateError(ActDiffError, RuntimeError):
    pass

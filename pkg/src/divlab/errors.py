"""Exception hierarchy shared across divlab."""


class DivlabError(Exception):
    """Base class for every error raised by divlab."""


class ContractError(DivlabError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    def __init__(self, op, *shapes):
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NumericError(DivlabError, ArithmeticError):
    """Non-finite values appeared during training or adaptation."""

    def __init__(self, message, step=None, value=None):
        self.step = step
        self.value = value
        super().__init__(message)


class DivergenceError(NumericError):
    pass


class TrainingError(DivlabError):
    """A training run finished without reaching its target."""

    def __init__(self, message, achieved=None):
        self.achieved = achieved
        super().__init__(message)


class FormatError(DivlabError):
    """A binary file has a bad magic number, version or layout."""


class SizeMismatchError(FormatError):
    def __init__(self, expected, actual, what="payload"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} size mismatch: expected {expected} bytes, got {actual}")


class SpecError(ContractError):
    """Invalid synthetic dataset specification."""


class EpisodeError(ContractError):
    """An episode cannot be drawn from the dataset as requested."""


class DegenerateEmbeddingError(DivlabError, ArithmeticError):
    def __init__(self, message, batch_id=None):
        self.batch_id = batch_id
        super().__init__(message)


class ProbeMismatchError(ContractError):
    """Embeddings from different probe networks were mixed."""


class DegenerateVarianceError(DivlabError, ArithmeticError):
    """Response variable has zero variance, so R^2 is undefined."""


class InsufficientDataError(ContractError):
    pass


class WrongAlgorithmError(ContractError):
    pass


class LabelError(ContractError):
    pass


class ConfigError(DivlabError):
    """Invalid or inconsistent experiment configuration."""


class MissingDependencyError(DivlabError):
    """An input produced by an earlier pipeline stage is absent."""

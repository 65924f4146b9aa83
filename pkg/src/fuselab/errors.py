"""Exception hierarchy shared by all fuselab modules."""


class FuseLabError(Exception):
    """Base class for all fuselab errors."""


class NonFiniteError(FuseLabError, ValueError):
    """An input or intermediate value is NaN or infinite."""


class EmptyInputError(FuseLabError, ValueError):
    """An operation that requires at least one element got none."""


class UnknownTaskError(FuseLabError, ValueError):
    """Corpus task tag is not one of the supported domains."""


class TokenizationError(FuseLabError, ValueError):
    """A string contains symbols outside the tokenizer vocabulary."""


class BadContextLengthError(FuseLabError, ValueError):
    """Context window length does not match the model's context arity."""


class TokenOutOfRangeError(FuseLabError, IndexError):
    """A token id is outside the model's vocabulary."""


class EmptyTestSetError(FuseLabError, ValueError):
    """Evaluation was asked to run on zero samples."""


class LengthMismatchError(FuseLabError, ValueError):
    """Two sequences that must have equal length do not."""


class NotADistributionError(FuseLabError, ValueError):
    """A vector fails the probability-distribution contract."""


class EmptySequenceError(FuseLabError, ValueError):
    """A per-timestep loss received an empty frame sequence."""


class NegativeWeightError(FuseLabError, ValueError):
    """A loss weight that must be nonnegative is negative."""


class DimMismatchError(FuseLabError, ValueError):
    """Embedding tables with different dimensions cannot be compared."""


class WeightsNotNormalizedError(FuseLabError, ValueError):
    """Averaging weights do not sum to one."""


class BaseMismatchError(FuseLabError, ValueError):
    """Task vectors do not share the expected base model."""


class MergeSpecMissingError(FuseLabError, ValueError):
    """Pairwise fusion requires a merge specification."""


class NonFiniteGradientError(FuseLabError, ValueError):
    """Optimizer received a gradient containing NaN or inf."""


class StepOutOfRangeError(FuseLabError, ValueError):
    """Scheduler step index is outside [0, total_steps]."""


class CorruptFileError(FuseLabError):
    """A binary artifact failed its magic/version/CRC checks."""


class SampleNotFoundError(FuseLabError, KeyError):
    """A teacher cache does not contain the requested sample id."""


class ConfigError(FuseLabError, ValueError):
    """Experiment configuration failed schema validation."""

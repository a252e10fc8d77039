"""Exception hierarchy shared across the package."""


class FedShareError(Exception):
    """Base class for all errors raised by fedshare."""


class DimensionError(FedShareError, ValueError):
    """Vectors or matrices with incompatible shapes."""


class EmptyPopulationError(FedShareError, ValueError):
    """No client carries any samples."""


class ConstraintViolation(FedShareError, ValueError):
    """A clustering or sharing plan breaks one of the feasibility constraints."""


class PartitionInfeasible(FedShareError, ValueError):
    """The requested partition cannot be drawn from the dataset."""


class IdxParseError(FedShareError, ValueError):
    """Base class for IDX decoding failures."""


class IdxMagicError(IdxParseError):
    pass


class IdxTruncatedError(IdxParseError):
    pass


class IdxCountMismatch(IdxParseError):
    pass


class InfeasibleShare(FedShareError, ValueError):
    """A positive share is routed over a zero-rate link."""


class ProblemTooLarge(FedShareError, ValueError):
    """Exhaustive search refused because the instance exceeds the enumeration bound."""


class TrainingDiverged(FedShareError, RuntimeError):
    """Loss became non-finite during federated training."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ConfigError(FedShareError, ValueError):
    """Invalid or unreadable experiment configuration."""

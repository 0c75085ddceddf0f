"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class CorpusFormatError(ValueError):
    """A corpus, triples, or run file is malformed. Message carries the line number."""


class EmptyCorpusError(ValueError):
    """Ingestion produced zero usable records."""


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt, or has an unsupported version."""


class NonFiniteLossError(ArithmeticError):
    """Training produced NaN or Inf. Carries the component values for diagnosis."""

    def __init__(self, message: str, components: dict[str, float] | None = None):
        super().__init__(message)
        self.components = dict(components or {})

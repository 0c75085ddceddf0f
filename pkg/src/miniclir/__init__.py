"""miniclir: desk-scale cross-language retrieval training and evaluation.

Continued pretraining of a shared bilingual encoder with a span-level
contrastive objective (CLS or token-level MaxSim similarity) plus masked
language modeling through an auxiliary Condenser head, followed by
triplet fine-tuning and reranking evaluation with significance testing.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ContractError,
    CorpusFormatError,
    EmptyCorpusError,
    NonFiniteLossError,
    ShapeError,
)

__all__ = [
    "CheckpointError",
    "ContractError",
    "CorpusFormatError",
    "EmptyCorpusError",
    "NonFiniteLossError",
    "ShapeError",
    "__version__",
]

"""Self-learning loop orchestration for language models.

Identify knowledge gaps via sampling-based hallucination scoring, fetch
answers from external sources, build preference-training datasets, bridge
to an external trainer, and evaluate before/after.
"""

__version__ = "0.1.0"

from .core import (
    HallucinationScore,
    KnowledgeRegion,
    LoopConfig,
    QuestionMethod,
    QuestionPartition,
    QuestionRecord,
    Topic,
    TopicOrigin,
    classify_point,
    partition,
)

__all__ = [
    "__version__",
    "HallucinationScore",
    "KnowledgeRegion",
    "LoopConfig",
    "QuestionMethod",
    "QuestionPartition",
    "QuestionRecord",
    "Topic",
    "TopicOrigin",
    "classify_point",
    "partition",
]

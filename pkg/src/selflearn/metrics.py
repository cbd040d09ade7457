"""Self-learning capability metrics.

Curiosity (unique-question ratio via leaf clustering), knowledge-limit
awareness (hallucinated fraction), the brevity coefficient (piecewise
penalty on deviation from the 100-character ideal question length), and
their aggregate score. Reports carry full precision; display rounding
happens only at serialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .clustering import ClusteringResult, count_unique, hdbscan_leaf
from .core import QuestionPartition, QuestionRecord
from .gateway import EmbeddingBackend, EmbeddingVector, embed

IDEAL_LEN = 100.0

Clusterer = Callable[[Sequence[EmbeddingVector]], ClusteringResult]


@dataclass(frozen=True)
class SlcReport:
    cur: float
    kaw: float
    brev: float
    slc: float
    n_questions: int
    n_unique: int
    n_hallucinated: int
    delta_len: float
    mean_len: float
    metadata: dict = field(default_factory=dict)


def curiosity(
    questions: Sequence[QuestionRecord],
    embedder: EmbeddingBackend,
    *,
    min_cluster_size: int = 5,
    clusterer: Clusterer | None = None,
) -> tuple[float, int]:
    """Unique-question ratio; uniqueness counts leaf clusters plus outliers."""
    if not questions:
        raise ValueError("questions must be non-empty")
    vectors = embed([q.text for q in questions], embedder)
    if clusterer is None:
        result = hdbscan_leaf(vectors, min_cluster_size)
    else:
        result = clusterer(vectors)
    n_unique = count_unique(result)
    return n_unique / len(questions), n_unique


def knowledge_limit_awareness(part: QuestionPartition) -> float:
    total = len(part.q_h) + len(part.q_nh)
    if total == 0:
        raise ValueError("partition is empty")
    return len(part.q_h) / total


def brevity(texts: Sequence[str]) -> tuple[float, float]:
    """Brevity coefficient and the mean absolute deviation from 100 chars.

    Lengths count Unicode code points. The coefficient is 1 up to a mean
    deviation of 50, decays linearly after that, and drops to 0 at 100.
    """
    if not texts:
        raise ValueError("texts must be non-empty")
    delta = sum(abs(len(t) - IDEAL_LEN) for t in texts) / len(texts)
    if delta >= IDEAL_LEN:
        brev = 0.0
    elif delta <= 50.0:
        brev = 1.0
    else:
        brev = 1.0 - delta / IDEAL_LEN + 0.5
    return brev, delta


def slc_score(cur: float, kaw: float, brev: float) -> float:
    for name, value in (("cur", cur), ("kaw", kaw), ("brev", brev)):
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return brev * (cur + kaw) / 2.0


def compute_report(
    questions: Sequence[QuestionRecord],
    part: QuestionPartition,
    embedder: EmbeddingBackend,
    *,
    min_cluster_size: int = 5,
    metadata: dict | None = None,
) -> SlcReport:
    cur, n_unique = curiosity(questions, embedder, min_cluster_size=min_cluster_size)
    kaw = knowledge_limit_awareness(part)
    texts = [q.text for q in questions]
    brev, delta_len = brevity(texts)
    meta = dict(metadata or {})
    meta.setdefault("min_cluster_size", min_cluster_size)
    return SlcReport(
        cur=cur,
        kaw=kaw,
        brev=brev,
        slc=slc_score(cur, kaw, brev),
        n_questions=len(questions),
        n_unique=n_unique,
        n_hallucinated=len(part.q_h),
        delta_len=delta_len,
        mean_len=sum(len(t) for t in texts) / len(texts),
        metadata=meta,
    )


def format_metric(value: float) -> str:
    """Two decimals, except tiny positive values keep one significant digit
    so they do not display as 0.00."""
    rounded = round(value, 2)
    if rounded == 0.0 and value > 0.0:
        return f"{value:.1g}"
    return f"{rounded:.2f}"


def report_to_json(report: SlcReport) -> str:
    payload = {
        "cur": report.cur,
        "kaw": report.kaw,
        "brev": report.brev,
        "slc": report.slc,
        "n_questions": report.n_questions,
        "n_unique": report.n_unique,
        "n_hallucinated": report.n_hallucinated,
        "delta_len": report.delta_len,
        "mean_len": report.mean_len,
        "metadata": report.metadata,
    }
    return json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def format_table(reports: Sequence[SlcReport]) -> str:
    """Fixed-width scorecard: Model, Method, Cur, Kaw, brev, SLC."""
    rows = [("Model", "Method", "Cur", "Kaw", "brev", "SLC")]
    for report in reports:
        rows.append(
            (
                str(report.metadata.get("model", "-")),
                str(report.metadata.get("method", "-")),
                format_metric(report.cur),
                format_metric(report.kaw),
                format_metric(report.brev),
                format_metric(report.slc),
            )
        )
    widths = [max(len(row[col]) for row in rows) for col in range(6)]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[col]) for col, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def write_report(report: SlcReport, directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "slc.json"
    table_path = directory / "slc.txt"
    json_path.write_text(report_to_json(report), encoding="utf-8")
    table_path.write_text(format_table([report]), encoding="utf-8")
    return json_path, table_path

"""Domain types for the self-learning loop.

Everything here is immutable after construction and safe to share across
pipeline stages. Question records round-trip losslessly through JSONL.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import JsonlError, StructureError

DEFAULT_LIMIT = 0.5

_WS_RE = re.compile(r"\s+")
_TERMINAL_PUNCT_RE = re.compile(r"[\s.?!:;,]+$")


def normalize_text(text: str) -> str:
    """Canonical form used for fact keys and question deduplication.

    Lowercase, trimmed, internal whitespace collapsed to single spaces,
    terminal punctuation stripped.
    """
    collapsed = _WS_RE.sub(" ", text.strip().lower())
    return _TERMINAL_PUNCT_RE.sub("", collapsed)


class KnowledgeRegion(Enum):
    KNOWN = "Known"
    UNKNOWN = "Unknown"


class TopicOrigin(Enum):
    TRENDS_API = "TrendsApi"
    MODEL_PROPOSED = "ModelProposed"
    ORACLE_SAMPLED = "OracleSampled"


class QuestionMethod(Enum):
    EXTERNAL_PROMPT = "ExternalPrompt"
    OPEN_GENERATION = "OpenGeneration"
    INDUCED_GENERATION = "InducedGeneration"
    ORACLE_SELECTED = "OracleSelected"


class QuestionWord(Enum):
    WHAT = "what"
    WHO = "who"
    WHY = "why"
    WHERE = "where"
    WHEN = "when"
    HOW = "how"


QUESTION_WORDS = tuple(QuestionWord)


@dataclass(frozen=True)
class HallucinationScore:
    """Consistency-based score in [0, 1]; 1 means certain hallucination."""

    value: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"hallucination score {self.value!r} outside [0, 1]")


@dataclass(frozen=True)
class Topic:
    id: str
    phrases: tuple[str, ...]
    origin: TopicOrigin

    def __post_init__(self) -> None:
        if not self.phrases:
            raise ValueError("topic needs at least one phrase")
        if any(not p.strip() for p in self.phrases):
            raise ValueError("topic phrases must be non-empty after trimming")

    def joined_phrases(self, sep: str = "; ") -> str:
        return sep.join(self.phrases)


def topic_id(phrases: Iterable[str], origin: TopicOrigin) -> str:
    payload = origin.value + "|" + "\x1f".join(phrases)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def make_topic(phrases: Iterable[str], origin: TopicOrigin) -> Topic:
    cleaned = tuple(p.strip() for p in phrases if p.strip())
    if not cleaned:
        raise ValueError("no non-empty phrases for topic")
    return Topic(id=topic_id(cleaned, origin), phrases=cleaned, origin=origin)


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    topic: Topic
    method: QuestionMethod
    question_word: QuestionWord | None
    text: str
    main_passage: str
    samples: tuple[str, ...]
    score: HallucinationScore
    region: KnowledgeRegion

    def __post_init__(self) -> None:
        has_word = self.question_word is not None
        induced = self.method is QuestionMethod.INDUCED_GENERATION
        if has_word != induced:
            raise ValueError("question_word is present iff method is InducedGeneration")
        if not self.samples:
            raise ValueError("a scored record must carry at least one sample")


def question_id(method: QuestionMethod, topic: Topic, text: str, index: int = 0) -> str:
    """Content hash so reruns with the same seed produce identical ids.

    The sequence index keeps ids unique when a model (the baseline dummy
    in particular) emits the same question in different iterations.
    """
    payload = f"{method.value}|{topic.id}|{index}|{text}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:24]


def make_question_record(
    *,
    topic: Topic,
    method: QuestionMethod,
    text: str,
    main_passage: str,
    samples: Iterable[str],
    score: HallucinationScore,
    limit: float = DEFAULT_LIMIT,
    question_word: QuestionWord | None = None,
    index: int = 0,
) -> QuestionRecord:
    """Build a record, deriving id and region rather than accepting them."""
    return QuestionRecord(
        id=question_id(method, topic, text, index),
        topic=topic,
        method=method,
        question_word=question_word,
        text=text,
        main_passage=main_passage,
        samples=tuple(samples),
        score=score,
        region=classify_point(score, limit),
    )


@dataclass(frozen=True)
class QuestionPartition:
    q_h: tuple[QuestionRecord, ...]
    q_nh: tuple[QuestionRecord, ...]


@dataclass(frozen=True)
class LoopConfig:
    """Knobs for one self-questioning run; the seed drives every random choice."""

    n_iterations: int
    n_samples: int = 10
    sample_temperature: float = 1.0
    limit: float = DEFAULT_LIMIT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not (0.0 < self.limit < 1.0):
            raise ValueError("limit must lie strictly between 0 and 1")
        if self.sample_temperature <= 0.0:
            raise ValueError("sample_temperature must be > 0")


def classify_point(score: HallucinationScore, limit: float) -> KnowledgeRegion:
    """Unknown at or above the threshold, Known strictly below.

    The boundary case score == limit counts as Unknown; this convention is
    logged once per run so replications are unambiguous.
    """
    if not (0.0 < limit < 1.0):
        raise ValueError("limit must lie strictly between 0 and 1")
    if score.value >= limit:
        return KnowledgeRegion.UNKNOWN
    return KnowledgeRegion.KNOWN


def partition(records: Iterable[QuestionRecord]) -> QuestionPartition:
    """Split scored records into hallucinated / non-hallucinated, keeping order."""
    seen: set[str] = set()
    q_h: list[QuestionRecord] = []
    q_nh: list[QuestionRecord] = []
    for record in records:
        if record.id in seen:
            raise StructureError(f"duplicate question id {record.id!r}")
        seen.add(record.id)
        if record.region is KnowledgeRegion.UNKNOWN:
            q_h.append(record)
        else:
            q_nh.append(record)
    return QuestionPartition(q_h=tuple(q_h), q_nh=tuple(q_nh))


# --- JSONL serialization ----------------------------------------------------

def topic_to_dict(topic: Topic) -> dict:
    return {"id": topic.id, "phrases": list(topic.phrases), "origin": topic.origin.value}


def topic_from_dict(data: dict) -> Topic:
    return Topic(
        id=data["id"],
        phrases=tuple(data["phrases"]),
        origin=TopicOrigin(data["origin"]),
    )


def record_to_dict(record: QuestionRecord) -> dict:
    return {
        "id": record.id,
        "topic": topic_to_dict(record.topic),
        "method": record.method.value,
        "question_word": record.question_word.value if record.question_word else None,
        "text": record.text,
        "main_passage": record.main_passage,
        "samples": list(record.samples),
        "score": record.score.value,
        "region": record.region.value,
    }


def record_from_dict(data: dict) -> QuestionRecord:
    word = data.get("question_word")
    return QuestionRecord(
        id=data["id"],
        topic=topic_from_dict(data["topic"]),
        method=QuestionMethod(data["method"]),
        question_word=QuestionWord(word) if word is not None else None,
        text=data["text"],
        main_passage=data["main_passage"],
        samples=tuple(data["samples"]),
        score=HallucinationScore(data["score"]),
        region=KnowledgeRegion(data["region"]),
    )


def write_records(records: Iterable[QuestionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_dict(record), ensure_ascii=False))
            handle.write("\n")


def read_records(path: str | Path) -> list[QuestionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise JsonlError(str(path), line_no, str(exc)) from exc
    return records


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    """Yield parsed objects from a JSONL file, naming the line on failure."""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(str(path), line_no, str(exc)) from exc


def write_partition(part: QuestionPartition, directory: str | Path) -> tuple[Path, Path]:
    """Write the split as q_h.jsonl / q_nh.jsonl, one record per line."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    q_h_path = directory / "q_h.jsonl"
    q_nh_path = directory / "q_nh.jsonl"
    write_records(part.q_h, q_h_path)
    write_records(part.q_nh, q_nh_path)
    return q_h_path, q_nh_path


def read_partition(directory: str | Path) -> QuestionPartition:
    directory = Path(directory)
    return QuestionPartition(
        q_h=tuple(read_records(directory / "q_h.jsonl")),
        q_nh=tuple(read_records(directory / "q_nh.jsonl")),
    )

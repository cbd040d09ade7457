"""Knowledge searching: answer the hallucinated questions from outside.

Hallucinated questions are deduplicated by normalized text, then each one
is sent to a configured source (a stronger model, a wiki extract endpoint,
a peer model, a human-reviewed file, or an offline fact map). Failures and
refusals yield an explicit unanswered marker, never an empty answer. An
optional curator hook filters fetched answers before dataset building.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from .core import QuestionRecord, iter_jsonl, normalize_text
from .errors import MalformedResponseError, SampleBatchError, TransportError
from .gateway import GenerationBackend, GenerationRequest, sample_n
from .hallucination import ConsistencyBackend, score_passage

logger = logging.getLogger(__name__)

DEFAULT_ANSWER_CHAR_LIMIT = 2000
DEFAULT_FETCH_WORKERS = 4

REFUSAL_PREFIXES = (
    "i cannot",
    "i can't",
    "i'm sorry",
    "i am sorry",
    "i don't know",
    "i do not know",
    "as an ai",
)


class AnswerOrigin(Enum):
    STRONGER_LLM = "StrongerLlm"
    WIKI_SEARCH = "WikiSearch"
    PEER_MODEL = "PeerModel"
    HUMAN_FILE = "HumanFile"


@dataclass(frozen=True)
class AnsweredQuestion:
    question: QuestionRecord
    ground_truth: str
    source: AnswerOrigin
    fetched_at: str  # ISO 8601

    def __post_init__(self) -> None:
        if not self.ground_truth:
            raise ValueError("ground_truth must be non-empty")


Clock = Callable[[], datetime]
CuratorFilter = Callable[[AnsweredQuestion], bool]


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def fixed_clock(timestamp: str) -> Clock:
    """Clock pinned to one instant; used for byte-reproducible runs."""
    moment = datetime.fromisoformat(timestamp)

    def clock() -> datetime:
        return moment

    return clock


def dedupe(q_h: Sequence[QuestionRecord]) -> list[QuestionRecord]:
    """Drop records whose normalized text repeats an earlier record."""
    seen: set[str] = set()
    kept: list[QuestionRecord] = []
    for record in q_h:
        key = normalize_text(record.text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return kept


class KnowledgeSource(Protocol):
    origin: AnswerOrigin

    def answer(self, question_text: str) -> str | None:
        """Ground truth for the question, or None when unanswerable."""
        ...


def _looks_like_refusal(text: str) -> bool:
    lowered = text.strip().lower()
    return any(lowered.startswith(prefix) for prefix in REFUSAL_PREFIXES)


@dataclass
class StrongerLlmSource:
    """A separately configured, presumably stronger generation backend."""

    backend: GenerationBackend
    prompt_template: str = "Answer the following question factually.\nQuestion: {question}\nAnswer:"
    max_tokens: int = 512
    origin: AnswerOrigin = AnswerOrigin.STRONGER_LLM

    def answer(self, question_text: str) -> str | None:
        request = GenerationRequest(
            prompt=self.prompt_template.format(question=question_text),
            temperature=0.0,
            max_tokens=self.max_tokens,
        )
        text = self.backend.complete(request).text.strip()
        if not text or _looks_like_refusal(text):
            return None
        return text


@dataclass
class WikiSearchSource:
    """MediaWiki-extract-shaped GET endpoint returning plain-text extracts."""

    base_url: str
    timeout_s: float = 60.0
    origin: AnswerOrigin = AnswerOrigin.WIKI_SEARCH

    def answer(self, question_text: str) -> str | None:
        params = {
            "action": "query",
            "format": "json",
            "prop": "extracts",
            "explaintext": "1",
            "titles": question_text,
        }
        try:
            response = requests.get(self.base_url, params=params, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise TransportError(f"GET {self.base_url} failed: {exc}") from exc
        if response.status_code != 200:
            raise MalformedResponseError(f"{self.base_url} returned {response.status_code}")
        try:
            pages = response.json()["query"]["pages"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected wiki payload: {exc}") from exc
        for page in pages.values():
            extract = (page or {}).get("extract", "")
            if extract.strip():
                return extract.strip()
        return None


@dataclass
class FactMapSource:
    """Offline source keyed by normalized question text."""

    facts: dict[str, str]
    origin: AnswerOrigin = AnswerOrigin.STRONGER_LLM

    @classmethod
    def from_file(cls, path: str | Path, origin: AnswerOrigin = AnswerOrigin.STRONGER_LLM) -> "FactMapSource":
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
        return cls(facts={normalize_text(k): v for k, v in raw.items()}, origin=origin)

    def answer(self, question_text: str) -> str | None:
        return self.facts.get(normalize_text(question_text))


def fetch_answer(
    question: QuestionRecord,
    source: KnowledgeSource,
    *,
    char_limit: int = DEFAULT_ANSWER_CHAR_LIMIT,
    clock: Clock = utc_now,
) -> AnsweredQuestion | None:
    """One ground truth per question; None marks it unanswered."""
    text = source.answer(question.text)
    if text is None or not text.strip():
        logger.info("question %s unanswered by %s", question.id, source.origin.value)
        return None
    if len(text) > char_limit:
        logger.info("answer for %s truncated from %d to %d chars", question.id, len(text), char_limit)
        text = text[:char_limit]
    return AnsweredQuestion(
        question=question,
        ground_truth=text,
        source=source.origin,
        fetched_at=clock().isoformat(),
    )


def search_answers(
    questions: Sequence[QuestionRecord],
    source: KnowledgeSource,
    *,
    curator: CuratorFilter | None = None,
    char_limit: int = DEFAULT_ANSWER_CHAR_LIMIT,
    max_workers: int = DEFAULT_FETCH_WORKERS,
    rate_limit_s: float = 0.0,
    clock: Clock = utc_now,
) -> tuple[list[AnsweredQuestion], list[str]]:
    """Fetch concurrently; results ordered by question id for determinism.

    Returns (answered, unanswered question ids). The curator hook defaults
    to pass-through. rate_limit_s > 0 enforces a minimum interval between
    calls to the source across all workers.
    """
    throttle = threading.Lock()
    last_call = [0.0]

    def fetch(question: QuestionRecord) -> tuple[QuestionRecord, AnsweredQuestion | None]:
        if rate_limit_s > 0.0:
            with throttle:
                wait = last_call[0] + rate_limit_s - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                last_call[0] = time.monotonic()
        try:
            return question, fetch_answer(question, source, char_limit=char_limit, clock=clock)
        except (TransportError, MalformedResponseError) as exc:
            logger.warning("question %s fetch failed: %s", question.id, exc)
            return question, None

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(fetch, questions))

    answered: list[AnsweredQuestion] = []
    unanswered: list[str] = []
    for question, outcome in sorted(results, key=lambda pair: pair[0].id):
        if outcome is None:
            unanswered.append(question.id)
        elif curator is not None and not curator(outcome):
            logger.info("question %s filtered by curator", question.id)
            unanswered.append(question.id)
        else:
            answered.append(outcome)
    return answered, unanswered


PEER_ANSWER_TEMPLATE = "Answer the following question concisely.\nQuestion: {question}\nAnswer:"


def _peer_gate(
    question_text: str,
    peer_backend: GenerationBackend,
    peer_scorer: ConsistencyBackend,
    limit: float,
    *,
    n_samples: int = 10,
    sample_temperature: float = 1.0,
    base_seed: int = 0,
    answer_template: str = PEER_ANSWER_TEMPLATE,
) -> str | None:
    """Greedy peer answer when the peer itself scores below the limit."""
    prompt = answer_template.format(question=question_text)
    greedy = peer_backend.complete(
        GenerationRequest(prompt=prompt, temperature=0.0, max_tokens=256)
    ).text
    try:
        samples = sample_n(
            prompt, n_samples, sample_temperature, peer_backend, base_seed=base_seed
        )
    except SampleBatchError as exc:
        raise TransportError(f"peer sampling failed: {exc}") from exc
    peer_score = score_passage(greedy, samples, peer_scorer)
    if peer_score.value >= limit:
        logger.info(
            "peer hallucinates on %r (h=%.3f >= %.2f); answer suppressed",
            question_text[:60],
            peer_score.value,
            limit,
        )
        return None
    return greedy.strip() or None


def peer_exchange(
    question: QuestionRecord,
    peer_backend: GenerationBackend,
    peer_scorer: ConsistencyBackend,
    limit: float,
    *,
    n_samples: int = 10,
    sample_temperature: float = 1.0,
    base_seed: int = 0,
    answer_template: str = PEER_ANSWER_TEMPLATE,
    clock: Clock = utc_now,
) -> AnsweredQuestion | None:
    """Trust the peer's greedy answer only when the peer itself does not
    hallucinate on the question; unknown knowledge is never exchanged."""
    answer = _peer_gate(
        question.text,
        peer_backend,
        peer_scorer,
        limit,
        n_samples=n_samples,
        sample_temperature=sample_temperature,
        base_seed=base_seed,
        answer_template=answer_template,
    )
    if answer is None:
        return None
    return AnsweredQuestion(
        question=question,
        ground_truth=answer,
        source=AnswerOrigin.PEER_MODEL,
        fetched_at=clock().isoformat(),
    )


@dataclass
class PeerAnswerSource:
    """Knowledge source backed by a peer model behind the exchange gate."""

    peer_backend: GenerationBackend
    peer_scorer: ConsistencyBackend
    limit: float
    n_samples: int = 10
    origin: AnswerOrigin = AnswerOrigin.PEER_MODEL

    def answer(self, question_text: str) -> str | None:
        return _peer_gate(
            question_text,
            self.peer_backend,
            self.peer_scorer,
            self.limit,
            n_samples=self.n_samples,
        )


# --- Human review file -----------------------------------------------------------

def export_review_file(answered: Sequence[AnsweredQuestion], path: str | Path) -> None:
    """Write answers for human review: {question_id, ground_truth, verdict}."""
    with open(path, "w", encoding="utf-8") as handle:
        for item in answered:
            handle.write(
                json.dumps(
                    {
                        "question_id": item.question.id,
                        "question": item.question.text,
                        "ground_truth": item.ground_truth,
                        "verdict": "accept",
                    },
                    ensure_ascii=False,
                )
            )
            handle.write("\n")


def apply_review_file(
    answered: Sequence[AnsweredQuestion], path: str | Path, *, clock: Clock = utc_now
) -> list[AnsweredQuestion]:
    """Re-import an edited review file, overriding fetched answers.

    Rows with verdict "reject" drop the question; other rows replace the
    ground truth and mark the answer as human-reviewed.
    """
    overrides: dict[str, dict] = {}
    for row in iter_jsonl(path):
        overrides[row["question_id"]] = row
    kept: list[AnsweredQuestion] = []
    for item in answered:
        row = overrides.get(item.question.id)
        if row is None:
            kept.append(item)
            continue
        if row.get("verdict") == "reject":
            logger.info("question %s rejected by review", item.question.id)
            continue
        truth = row.get("ground_truth", "").strip()
        if not truth:
            logger.warning("review row for %s has empty ground truth; dropped", item.question.id)
            continue
        kept.append(
            AnsweredQuestion(
                question=item.question,
                ground_truth=truth,
                source=AnswerOrigin.HUMAN_FILE,
                fetched_at=clock().isoformat(),
            )
        )
    return kept


def answered_to_dict(item: AnsweredQuestion) -> dict:
    return {
        "question_id": item.question.id,
        "question": item.question.text,
        "main_passage": item.question.main_passage,
        "ground_truth": item.ground_truth,
        "source": item.source.value,
        "fetched_at": item.fetched_at,
    }


def write_answers(answered: Sequence[AnsweredQuestion], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for item in answered:
            handle.write(json.dumps(answered_to_dict(item), ensure_ascii=False))
            handle.write("\n")

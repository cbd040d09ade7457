"""The four self-questioning strategies and their iteration drivers.

Each strategy produces scored question records: a question is generated
(from trending topics, model-proposed topics, a fixed question word, or
topics sampled near a random point of a topic embedding space), answered
greedily to get the main passage, sampled n times, and scored for
hallucination. Per-iteration randomness derives from seed XOR iteration
index, so runs replay exactly and iterations are order-independent.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .core import (
    LoopConfig,
    QUESTION_WORDS,
    QuestionMethod,
    QuestionRecord,
    Topic,
    TopicOrigin,
    make_question_record,
    make_topic,
    topic_from_dict,
    topic_to_dict,
)
from .errors import MalformedResponseError, SampleBatchError, TransportError
from .gateway import (
    EmbeddingBackend,
    EmbeddingVector,
    GenerationBackend,
    GenerationRequest,
    embed,
    sample_n,
)
from .hallucination import ConsistencyBackend, score_passage

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1

DEFAULT_QUESTION_MAX_TOKENS = 128
DEFAULT_ANSWER_MAX_TOKENS = 256
DEFAULT_N_PROPOSED_TOPICS = 3


@dataclass(frozen=True)
class PromptTemplateSet:
    """Prompt wording is data; the defaults below are what the offline mock
    understands, and deployments may swap them without code changes."""

    topic_proposal: str
    question_from_topics: str
    induced_question: str
    answer: str

    def __post_init__(self) -> None:
        required = {
            "topic_proposal": ("{n_topics}",),
            "question_from_topics": ("{topics}",),
            "induced_question": ("{topics}", "{question_word}"),
            "answer": ("{question}",),
        }
        for field_name, slots in required.items():
            template = getattr(self, field_name)
            for slot in slots:
                if template.count(slot) != 1:
                    raise ValueError(f"{field_name} template must contain {slot} exactly once")


DEFAULT_TEMPLATES = PromptTemplateSet(
    topic_proposal=(
        "Propose {n_topics} short topics you would like to learn more about. "
        "Reply with one topic per line."
    ),
    question_from_topics=(
        "Consider the following topics.\nTopics: {topics}\n"
        "Formulate one concise question to which you do not know the answer. "
        "Reply with only the question.\nQuestion:"
    ),
    induced_question=(
        "Consider the following topics.\nTopics: {topics}\n"
        "Formulate one concise question using the question word '{question_word}'. "
        "Reply with only the question.\nQuestion:"
    ),
    answer="Answer the following question concisely.\nQuestion: {question}\nAnswer:",
)


@dataclass(frozen=True)
class TopicSpace:
    """Candidate topics in vector form with per-dimension bounds."""

    topics: tuple[Topic, ...]
    vectors: tuple[EmbeddingVector, ...]
    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.topics or len(self.topics) != len(self.vectors):
            raise ValueError("topics and vectors must align and be non-empty")


def derive_seed(seed: int, index: int) -> int:
    return (seed ^ index) & _SEED_MASK


def _one_line(text: str) -> str:
    return " ".join(text.split())


def _generate_text(
    backend: GenerationBackend,
    prompt: str,
    temperature: float,
    seed: int,
    max_tokens: int,
) -> str:
    request = GenerationRequest(
        prompt=prompt, temperature=temperature, max_tokens=max_tokens, seed=seed
    )
    return backend.complete(request).text


def _score_question(
    *,
    topic: Topic,
    method: QuestionMethod,
    text: str,
    config: LoopConfig,
    backend: GenerationBackend,
    scorer: ConsistencyBackend,
    seed: int,
    index: int,
    question_word=None,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
    answer_max_tokens: int = DEFAULT_ANSWER_MAX_TOKENS,
) -> QuestionRecord:
    answer_prompt = templates.answer.format(question=text or "(empty)")
    main_passage = _generate_text(backend, answer_prompt, 0.0, seed, answer_max_tokens)
    samples = sample_n(
        answer_prompt,
        config.n_samples,
        config.sample_temperature,
        backend,
        base_seed=seed,
        max_tokens=answer_max_tokens,
    )
    score = score_passage(main_passage, samples, scorer)
    return make_question_record(
        topic=topic,
        method=method,
        text=text,
        main_passage=main_passage,
        samples=samples,
        score=score,
        limit=config.limit,
        question_word=question_word,
        index=index,
    )


_BULLET_RE = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s+")


def _parse_topic_lines(raw: str) -> list[str]:
    phrases = []
    for line in raw.splitlines():
        cleaned = _BULLET_RE.sub("", line).strip()
        if cleaned:
            phrases.append(cleaned)
    return phrases


def _propose_topic(
    backend: GenerationBackend,
    templates: PromptTemplateSet,
    temperature: float,
    seed: int,
    n_topics: int,
    max_tokens: int = DEFAULT_QUESTION_MAX_TOKENS,
) -> Topic:
    prompt = templates.topic_proposal.format(n_topics=n_topics)
    raw = _generate_text(backend, prompt, temperature, seed, max_tokens)
    phrases = _parse_topic_lines(raw)
    if not phrases:
        phrases = [_one_line(raw) or "unspecified"]
    return make_topic(phrases, TopicOrigin.MODEL_PROPOSED)


def run_external_prompt(
    topic_lists: Sequence[Topic],
    config: LoopConfig,
    backend: GenerationBackend,
    scorer: ConsistencyBackend,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
    question_max_tokens: int = DEFAULT_QUESTION_MAX_TOKENS,
    answer_max_tokens: int = DEFAULT_ANSWER_MAX_TOKENS,
) -> list[QuestionRecord]:
    """One question per externally supplied topic."""
    if not topic_lists:
        raise ValueError("topic_lists must be non-empty")
    records: list[QuestionRecord] = []
    for index, topic in enumerate(topic_lists):
        seed = derive_seed(config.seed, index)
        try:
            prompt = templates.question_from_topics.format(
                topics=_one_line(topic.joined_phrases())
            )
            text = _generate_text(
                backend, prompt, config.sample_temperature, seed, question_max_tokens
            ).strip()
            records.append(
                _score_question(
                    topic=topic,
                    method=QuestionMethod.EXTERNAL_PROMPT,
                    text=text,
                    config=config,
                    backend=backend,
                    scorer=scorer,
                    seed=seed,
                    index=index,
                    templates=templates,
                    answer_max_tokens=answer_max_tokens,
                )
            )
        except (TransportError, SampleBatchError, MalformedResponseError) as exc:
            logger.warning("topic %s skipped: %s", topic.id, exc)
    return records


def run_open_generation(
    config: LoopConfig,
    backend: GenerationBackend,
    scorer: ConsistencyBackend,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
    n_proposed_topics: int = DEFAULT_N_PROPOSED_TOPICS,
    question_max_tokens: int = DEFAULT_QUESTION_MAX_TOKENS,
    answer_max_tokens: int = DEFAULT_ANSWER_MAX_TOKENS,
) -> list[QuestionRecord]:
    """Model proposes topics, then one question per iteration."""
    records: list[QuestionRecord] = []
    for i in range(config.n_iterations):
        seed = derive_seed(config.seed, i)
        try:
            topic = _propose_topic(
                backend, templates, config.sample_temperature, seed, n_proposed_topics,
                max_tokens=question_max_tokens,
            )
            prompt = templates.question_from_topics.format(topics=_one_line(topic.joined_phrases()))
            raw = _generate_text(
                backend, prompt, config.sample_temperature, seed, question_max_tokens
            )
            # An unparseable emission stays as the question text; length
            # penalties downstream handle junk.
            text = raw.strip() or raw
            records.append(
                _score_question(
                    topic=topic,
                    method=QuestionMethod.OPEN_GENERATION,
                    text=text,
                    config=config,
                    backend=backend,
                    scorer=scorer,
                    seed=seed,
                    index=i,
                    templates=templates,
                    answer_max_tokens=answer_max_tokens,
                )
            )
        except (TransportError, SampleBatchError, MalformedResponseError) as exc:
            logger.warning("iteration %d skipped: %s", i, exc)
    return records


def run_induced_generation(
    config: LoopConfig,
    backend: GenerationBackend,
    scorer: ConsistencyBackend,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
    n_proposed_topics: int = DEFAULT_N_PROPOSED_TOPICS,
    question_max_tokens: int = DEFAULT_QUESTION_MAX_TOKENS,
    answer_max_tokens: int = DEFAULT_ANSWER_MAX_TOKENS,
) -> list[QuestionRecord]:
    """Six questions per iteration, one per question word, sharing one
    proposed topic set."""
    records: list[QuestionRecord] = []
    for i in range(config.n_iterations):
        seed = derive_seed(config.seed, i)
        try:
            topic = _propose_topic(
                backend, templates, config.sample_temperature, seed, n_proposed_topics,
                max_tokens=question_max_tokens,
            )
        except (TransportError, MalformedResponseError) as exc:
            logger.warning("iteration %d skipped (topic proposal): %s", i, exc)
            continue
        for word_index, word in enumerate(QUESTION_WORDS):
            try:
                prompt = templates.induced_question.format(
                    topics=_one_line(topic.joined_phrases()), question_word=word.value
                )
                raw = _generate_text(
                    backend, prompt, config.sample_temperature, seed, question_max_tokens
                )
                text = raw.strip() or raw
                records.append(
                    _score_question(
                        topic=topic,
                        method=QuestionMethod.INDUCED_GENERATION,
                        text=text,
                        config=config,
                        backend=backend,
                        scorer=scorer,
                        seed=seed,
                        index=i * len(QUESTION_WORDS) + word_index,
                        question_word=word,
                        templates=templates,
                        answer_max_tokens=answer_max_tokens,
                    )
                )
            except (TransportError, SampleBatchError, MalformedResponseError) as exc:
                logger.warning("iteration %d word %s skipped: %s", i, word.value, exc)
    return records


def build_topic_space(
    candidate_topics: Sequence[Topic], embedder: EmbeddingBackend
) -> TopicSpace:
    """Embed every candidate topic's joined phrases and record bounds."""
    if not candidate_topics:
        raise ValueError("candidate_topics must be non-empty")
    vectors = embed([t.joined_phrases() for t in candidate_topics], embedder)
    matrix = np.asarray([v.values for v in vectors])
    return TopicSpace(
        topics=tuple(candidate_topics),
        vectors=tuple(vectors),
        mins=tuple(float(v) for v in matrix.min(axis=0)),
        maxs=tuple(float(v) for v in matrix.max(axis=0)),
    )


def select_nearest_topics(space: TopicSpace, point: np.ndarray, k: int) -> list[Topic]:
    """k nearest topics to a point by Euclidean distance, ties by index."""
    matrix = np.asarray([v.values for v in space.vectors])
    distances = np.linalg.norm(matrix - point[None, :], axis=1)
    order = np.argsort(distances, kind="stable")[:k]
    return [space.topics[i] for i in order]


def run_oracle_selected(
    space: TopicSpace,
    k: int,
    config: LoopConfig,
    backend: GenerationBackend,
    scorer: ConsistencyBackend,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
    question_max_tokens: int = DEFAULT_QUESTION_MAX_TOKENS,
    answer_max_tokens: int = DEFAULT_ANSWER_MAX_TOKENS,
) -> list[QuestionRecord]:
    """Sample a random point in the topic space, question its neighbors."""
    if k < 1 or k > len(space.topics):
        raise ValueError(f"k must lie in [1, {len(space.topics)}], got {k}")
    mins = np.asarray(space.mins)
    maxs = np.asarray(space.maxs)
    records: list[QuestionRecord] = []
    for i in range(config.n_iterations):
        seed = derive_seed(config.seed, i)
        rng = np.random.default_rng(seed)
        point = rng.uniform(mins, maxs)
        selected = select_nearest_topics(space, point, k)
        topic = make_topic(
            [_one_line(t.joined_phrases()) for t in selected], TopicOrigin.ORACLE_SAMPLED
        )
        try:
            prompt = templates.question_from_topics.format(topics=_one_line(topic.joined_phrases()))
            raw = _generate_text(
                backend, prompt, config.sample_temperature, seed, question_max_tokens
            )
            text = raw.strip() or raw
            records.append(
                _score_question(
                    topic=topic,
                    method=QuestionMethod.ORACLE_SELECTED,
                    text=text,
                    config=config,
                    backend=backend,
                    scorer=scorer,
                    seed=seed,
                    index=i,
                    templates=templates,
                    answer_max_tokens=answer_max_tokens,
                )
            )
        except (TransportError, SampleBatchError, MalformedResponseError) as exc:
            logger.warning("iteration %d skipped: %s", i, exc)
    return records


# --- Topic acquisition ---------------------------------------------------------

def fetch_trending_topics(url: str, params: dict | None = None, timeout_s: float = 60.0) -> list[Topic]:
    """Pull trending items from a Google-Trends-shaped API; each item's
    query plus its related phrases become one topic."""
    try:
        response = requests.get(url, params=params or {}, timeout=timeout_s)
    except requests.RequestException as exc:
        raise TransportError(f"GET {url} failed: {exc}") from exc
    if response.status_code != 200:
        raise MalformedResponseError(f"{url} returned {response.status_code}")
    try:
        data = response.json()
    except ValueError as exc:
        raise MalformedResponseError(f"non-JSON trends payload: {exc}") from exc
    items = data.get("trending_searches") or data.get("daily_searches") or []
    topics: list[Topic] = []
    for item in items:
        phrases: list[str] = []
        if isinstance(item, dict):
            query = item.get("query")
            if query:
                phrases.append(str(query))
            for key in ("trend_breakdown", "related_queries", "related_topics"):
                for related in item.get(key) or []:
                    if isinstance(related, str):
                        phrases.append(related)
                    elif isinstance(related, dict) and related.get("query"):
                        phrases.append(str(related["query"]))
        elif isinstance(item, list):
            phrases = [str(p) for p in item]
        if phrases:
            topics.append(make_topic(phrases, TopicOrigin.TRENDS_API))
    if not topics:
        raise MalformedResponseError("trends payload contained no usable topics")
    return topics


def save_topic_cache(topics: Sequence[Topic], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump([topic_to_dict(t) for t in topics], handle, ensure_ascii=False, indent=2)
        handle.write("\n")


def load_topic_cache(path: str | Path) -> list[Topic]:
    with open(path, "r", encoding="utf-8") as handle:
        return [topic_from_dict(d) for d in json.load(handle)]


def load_topic_corpus(path: str | Path) -> list[Topic]:
    """UTF-8 text, one candidate topic per line."""
    topics = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                topics.append(make_topic([line], TopicOrigin.ORACLE_SAMPLED))
    if not topics:
        raise ValueError(f"topic corpus {path} is empty")
    return topics


def default_topic_corpus() -> list[Topic]:
    """The bundled encyclopedia-style category list."""
    from importlib.resources import files

    text = files("selflearn.data").joinpath("topic_corpus.txt").read_text(encoding="utf-8")
    topics = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            topics.append(make_topic([line], TopicOrigin.ORACLE_SAMPLED))
    return topics

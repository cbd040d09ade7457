from __future__ import annotations

import re

import pytest

from selflearn.core import (
    HallucinationScore,
    QuestionMethod,
    QuestionWord,
    TopicOrigin,
    make_question_record,
    make_topic,
)
from selflearn.gateway import MockEmbedder

_ACCEPTANCE_RESULTS: dict[str, str] = {}
_ACCEPTANCE_RE = re.compile(r"test_acceptance\.py::(test_c\d+_\w+)")


@pytest.fixture
def embedder() -> MockEmbedder:
    return MockEmbedder(dimension=64, seed=0)


def make_record(
    text: str,
    score: float,
    *,
    method: QuestionMethod = QuestionMethod.OPEN_GENERATION,
    main_passage: str = "a plausible answer.",
    samples: tuple[str, ...] = ("a plausible answer.",),
    topic_phrase: str | None = None,
    index: int = 0,
    question_word: QuestionWord | None = None,
    limit: float = 0.5,
):
    """Scored question record with minimal ceremony for tests."""
    topic = make_topic([topic_phrase or text or "blank"], TopicOrigin.MODEL_PROPOSED)
    return make_question_record(
        topic=topic,
        method=method,
        text=text,
        main_passage=main_passage,
        samples=samples,
        score=HallucinationScore(score),
        limit=limit,
        question_word=question_word,
        index=index,
    )


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    match = _ACCEPTANCE_RE.search(report.nodeid)
    if match:
        name = match.group(1)
        # A parametrized criterion fails as a whole if any case fails.
        if _ACCEPTANCE_RESULTS.get(name) != "failed":
            _ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  {name}: {verdict}")

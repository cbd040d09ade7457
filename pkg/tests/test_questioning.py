from __future__ import annotations

import json

import numpy as np
import pytest

from selflearn.core import LoopConfig, QuestionMethod, TopicOrigin, make_topic
from selflearn.errors import TransportError
from selflearn.gateway import (
    BaselineDummyBackend,
    MockKnowledgeBase,
    MockModelBackend,
)
from selflearn.hallucination import EmbeddingConsistencyBackend
from selflearn.questioning import (
    DEFAULT_TEMPLATES,
    PromptTemplateSet,
    build_topic_space,
    default_topic_corpus,
    fetch_trending_topics,
    load_topic_cache,
    load_topic_corpus,
    run_external_prompt,
    run_induced_generation,
    run_open_generation,
    run_oracle_selected,
    save_topic_cache,
    select_nearest_topics,
)


@pytest.fixture
def mock_backend():
    return MockModelBackend(kb=MockKnowledgeBase.from_pairs({"What is water?": "A liquid."}))


@pytest.fixture
def scorer(embedder):
    return EmbeddingConsistencyBackend(embedder)


def topics_of(texts, origin=TopicOrigin.TRENDS_API):
    return [make_topic([t], origin) for t in texts]


class TestTemplates:
    def test_defaults_validate(self):
        assert DEFAULT_TEMPLATES.answer.count("{question}") == 1

    def test_missing_slot_rejected(self):
        with pytest.raises(ValueError):
            PromptTemplateSet(
                topic_proposal="no slot here",
                question_from_topics=DEFAULT_TEMPLATES.question_from_topics,
                induced_question=DEFAULT_TEMPLATES.induced_question,
                answer=DEFAULT_TEMPLATES.answer,
            )

    def test_duplicated_slot_rejected(self):
        with pytest.raises(ValueError):
            PromptTemplateSet(
                topic_proposal=DEFAULT_TEMPLATES.topic_proposal,
                question_from_topics=DEFAULT_TEMPLATES.question_from_topics,
                induced_question=DEFAULT_TEMPLATES.induced_question,
                answer="{question} twice {question}",
            )


class TestExternalPrompt:
    def test_one_record_per_topic(self, mock_backend, scorer):
        config = LoopConfig(n_iterations=1, n_samples=10, seed=3)
        topics = topics_of(["What is water?", "What is fire?", "What is air?"])
        records = run_external_prompt(topics, config, mock_backend, scorer)
        assert len(records) == 3
        assert all(len(r.samples) == 10 for r in records)
        assert all(r.method is QuestionMethod.EXTERNAL_PROMPT for r in records)
        # The mock echoes a question found in the topic payload.
        assert records[0].text == "What is water?"

    def test_576_topics_produce_576_records(self, scorer):
        config = LoopConfig(n_iterations=1, n_samples=2, seed=0)
        topics = topics_of([f"Trending thing number {i}" for i in range(576)])
        records = run_external_prompt(topics, config, BaselineDummyBackend(), scorer)
        assert len(records) == 576

    def test_empty_topics_rejected(self, mock_backend, scorer):
        with pytest.raises(ValueError):
            run_external_prompt([], LoopConfig(n_iterations=1), mock_backend, scorer)

    def test_failures_skipped_not_fabricated(self, scorer):
        class Flaky:
            def __init__(self):
                self.inner = BaselineDummyBackend()

            def complete(self, request):
                if "boom" in request.prompt:
                    raise TransportError("down", attempts=3)
                return self.inner.complete(request)

        topics = topics_of(["fine topic", "boom topic", "another fine"])
        config = LoopConfig(n_iterations=1, n_samples=2, seed=1)
        records = run_external_prompt(topics, config, Flaky(), scorer)
        assert len(records) == 2  # failures + successes = expected count

    def test_same_cached_topics_same_topic_ids(self, mock_backend, scorer):
        topics = topics_of(["alpha beta", "gamma delta"])
        config = LoopConfig(n_iterations=1, n_samples=2, seed=9)
        first = run_external_prompt(topics, config, mock_backend, scorer)
        second = run_external_prompt(topics, config, BaselineDummyBackend(), scorer)
        assert [r.topic.id for r in first] == [r.topic.id for r in second]


class TestOpenGeneration:
    def test_dummy_single_iteration_deterministic(self, scorer):
        config = LoopConfig(n_iterations=1, n_samples=2, seed=0)
        a = run_open_generation(config, BaselineDummyBackend(), scorer)
        b = run_open_generation(config, BaselineDummyBackend(), scorer)
        assert len(a) == len(b) == 1
        assert a[0].text == b[0].text

    def test_mock_reproducible_across_runs(self, mock_backend, scorer):
        config = LoopConfig(n_iterations=5, n_samples=3, seed=77)
        first = [r.text for r in run_open_generation(config, mock_backend, scorer)]
        second = [r.text for r in run_open_generation(config, mock_backend, scorer)]
        assert first == second
        assert len(first) == 5

    def test_iteration_count(self, mock_backend, scorer):
        config = LoopConfig(n_iterations=7, n_samples=2, seed=5)
        records = run_open_generation(config, mock_backend, scorer)
        assert len(records) == 7
        assert all(r.topic.origin is TopicOrigin.MODEL_PROPOSED for r in records)


class TestInducedGeneration:
    def test_six_words_per_iteration(self, mock_backend, scorer):
        config = LoopConfig(n_iterations=1, n_samples=2, seed=4)
        records = run_induced_generation(config, mock_backend, scorer)
        assert len(records) == 6
        words = [r.question_word for r in records]
        assert len(set(words)) == 6
        assert all(r.question_word is not None for r in records)

    def test_6n_records(self, mock_backend, scorer):
        config = LoopConfig(n_iterations=4, n_samples=2, seed=4)
        assert len(run_induced_generation(config, mock_backend, scorer)) == 24

    def test_dummy_produces_six_unique_texts(self, scorer):
        config = LoopConfig(n_iterations=10, n_samples=2, seed=4)
        records = run_induced_generation(config, BaselineDummyBackend(), scorer)
        assert len(records) == 60
        assert len({r.text for r in records}) == 6


class TestTopicSpace:
    def test_singleton_bounds_degenerate(self, embedder):
        space = build_topic_space(topics_of(["only topic"]), embedder)
        assert space.mins == space.maxs

    def test_alignment_at_scale(self, embedder):
        topics = topics_of([f"category {i}" for i in range(100)])
        space = build_topic_space(topics, embedder)
        assert len(space.vectors) == 100
        assert len(space.topics) == 100

    def test_duplicate_strings_identical_vectors(self, embedder):
        space = build_topic_space(
            [make_topic(["same words"], TopicOrigin.ORACLE_SAMPLED) for _ in range(2)], embedder
        )
        assert space.vectors[0] == space.vectors[1]

    def test_nearest_neighbor_geometry(self):
        class Planted:
            dimension = 2

            def embed_texts(self, texts):
                from selflearn.gateway import EmbeddingVector

                mapping = {"near a": (0.0, 0.0), "near b": (0.1, 0.0), "far out": (50.0, 50.0)}
                return [EmbeddingVector(values=mapping[t], dimension=2) for t in texts]

        topics = topics_of(["near a", "near b", "far out"])
        space = build_topic_space(topics, Planted())
        selected = select_nearest_topics(space, np.asarray([49.0, 49.0]), 1)
        assert selected[0].phrases == ("far out",)

    def test_tie_broken_by_index(self, embedder):
        space = build_topic_space(topics_of(["dup", "dup", "other"]), embedder)
        point = space.vectors[0].as_array()
        selected = select_nearest_topics(space, point, 2)
        assert selected[0] is space.topics[0]
        assert selected[1] is space.topics[1]


class TestOracleSelected:
    def test_n_records(self, mock_backend, scorer, embedder):
        topics = topics_of([f"subject {i}" for i in range(20)])
        space = build_topic_space(topics, embedder)
        config = LoopConfig(n_iterations=4, n_samples=2, seed=123)
        records = run_oracle_selected(space, 5, config, mock_backend, scorer)
        assert len(records) == 4
        assert all(r.method is QuestionMethod.ORACLE_SELECTED for r in records)
        assert all(len(r.topic.phrases) == 5 for r in records)

    def test_same_seed_same_selections(self, mock_backend, scorer, embedder):
        topics = topics_of([f"subject {i}" for i in range(20)])
        space = build_topic_space(topics, embedder)
        config = LoopConfig(n_iterations=5, n_samples=2, seed=99)
        a = run_oracle_selected(space, 3, config, mock_backend, scorer)
        b = run_oracle_selected(space, 3, config, mock_backend, scorer)
        assert [r.topic.id for r in a] == [r.topic.id for r in b]

    def test_k_out_of_range(self, mock_backend, scorer, embedder):
        space = build_topic_space(topics_of(["a", "b"]), embedder)
        with pytest.raises(ValueError):
            run_oracle_selected(space, 3, LoopConfig(n_iterations=1), mock_backend, scorer)


class TestTopicParsing:
    def test_bullets_stripped_but_leading_numbers_kept(self):
        from selflearn.questioning import _parse_topic_lines

        raw = "- alpha\n2. beta topic\n2024 election\n* gamma\n1) delta\n\n"
        assert _parse_topic_lines(raw) == [
            "alpha", "beta topic", "2024 election", "gamma", "delta",
        ]


class TestTopicSources:
    def test_trends_parse_and_cache_round_trip(self, monkeypatch, tmp_path):
        payload = {
            "trending_searches": [
                {"query": "solar eclipse", "trend_breakdown": ["eclipse glasses", "totality"]},
                {"query": "tide schedule"},
            ]
        }

        class FakeResponse:
            status_code = 200

            def json(self):
                return payload

        monkeypatch.setattr(
            "selflearn.questioning.requests.get", lambda *a, **k: FakeResponse()
        )
        topics = fetch_trending_topics("http://trends.example/api")
        assert [t.phrases for t in topics] == [
            ("solar eclipse", "eclipse glasses", "totality"),
            ("tide schedule",),
        ]
        assert all(t.origin is TopicOrigin.TRENDS_API for t in topics)

        cache = tmp_path / "topics.json"
        save_topic_cache(topics, cache)
        assert load_topic_cache(cache) == topics

    def test_topic_corpus_file(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("First topic\n\nSecond topic\n", encoding="utf-8")
        topics = load_topic_corpus(path)
        assert [t.phrases[0] for t in topics] == ["First topic", "Second topic"]

    def test_bundled_corpus(self):
        topics = default_topic_corpus()
        assert len(topics) >= 300
        assert len({t.id for t in topics}) == len(topics)


class TestRecordHygiene:
    def test_every_record_scored_and_sampled(self, mock_backend, scorer):
        config = LoopConfig(n_iterations=3, n_samples=4, seed=2)
        records = run_open_generation(config, mock_backend, scorer)
        for record in records:
            assert len(record.samples) == 4
            assert 0.0 <= record.score.value <= 1.0
            assert record.region is not None

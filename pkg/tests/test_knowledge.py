from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from conftest import make_record
from selflearn.gateway import MockEmbedder, MockKnowledgeBase, MockModelBackend
from selflearn.hallucination import EmbeddingConsistencyBackend
from selflearn.knowledge import (
    AnswerOrigin,
    AnsweredQuestion,
    FactMapSource,
    StrongerLlmSource,
    WikiSearchSource,
    apply_review_file,
    dedupe,
    export_review_file,
    fetch_answer,
    fixed_clock,
    peer_exchange,
    search_answers,
)

CLOCK = fixed_clock("2025-01-01T00:00:00+00:00")


class TestDedupe:
    def test_normalized_duplicates_collapse(self):
        records = [
            make_record("Q?", 0.9, index=0),
            make_record("q?", 0.9, index=1),
            make_record("Q ?", 0.9, index=2),
        ]
        assert len(dedupe(records)) == 1

    def test_empty(self):
        assert dedupe([]) == []

    def test_930_to_922(self):
        records = [make_record(f"Unique question {i}?", 0.9, index=i) for i in range(922)]
        # Eight normalized duplicates of earlier questions.
        for j in range(8):
            records.append(make_record(f"unique QUESTION {j} ??", 0.9, index=1000 + j))
        assert len(records) == 930
        assert len(dedupe(records)) == 922

    def test_stable_order_and_subset(self):
        records = [make_record(f"q {i % 4}?", 0.9, index=i) for i in range(10)]
        deduped = dedupe(records)
        assert [r.id for r in deduped] == [records[i].id for i in range(4)]
        assert set(deduped) <= set(records)

    @given(st.lists(st.integers(min_value=0, max_value=9), max_size=30))
    def test_idempotent(self, keys):
        records = [make_record(f"question {k}", 0.9, index=i) for i, k in enumerate(keys)]
        once = dedupe(records)
        assert dedupe(once) == once
        assert len(once) <= len(records)


class TestFetchAnswer:
    def test_fact_map_lookup(self):
        source = FactMapSource(facts={"what is water": "A liquid."})
        record = make_record("What is water?", 0.9)
        answered = fetch_answer(record, source, clock=CLOCK)
        assert answered is not None
        assert answered.ground_truth == "A liquid."
        assert answered.source is AnswerOrigin.STRONGER_LLM
        assert answered.fetched_at == "2025-01-01T00:00:00+00:00"

    def test_missing_fact_unanswered(self):
        source = FactMapSource(facts={})
        assert fetch_answer(make_record("What?", 0.9), source, clock=CLOCK) is None

    def test_refusal_detected(self):
        class RefusingBackend:
            def complete(self, request):
                from selflearn.gateway import GenerationResponse

                return GenerationResponse(text="I cannot answer that question.")

            def echo_logprobs(self, text):
                raise NotImplementedError

        source = StrongerLlmSource(backend=RefusingBackend())
        assert fetch_answer(make_record("What?", 0.9), source, clock=CLOCK) is None

    def test_truncation(self):
        source = FactMapSource(facts={"what": "x" * 5000})
        answered = fetch_answer(make_record("What?", 0.9), source, char_limit=100, clock=CLOCK)
        assert answered is not None
        assert len(answered.ground_truth) == 100

    def test_empty_answer_never_constructed(self):
        with pytest.raises(ValueError):
            AnsweredQuestion(
                question=make_record("q", 0.9),
                ground_truth="",
                source=AnswerOrigin.WIKI_SEARCH,
                fetched_at="2025-01-01T00:00:00+00:00",
            )


class TestSearchAnswers:
    def test_ordered_by_question_id_with_unanswered(self):
        facts = {f"known {i}": f"answer {i}" for i in range(5)}
        source = FactMapSource(facts=facts)
        records = [make_record(f"Known {i}?", 0.9, index=i) for i in range(5)]
        records += [make_record(f"Mystery {i}?", 0.9, index=i + 50) for i in range(3)]
        answered, unanswered = search_answers(records, source, clock=CLOCK)
        assert len(answered) == 5
        assert len(unanswered) == 3
        ids = [a.question.id for a in answered]
        assert ids == sorted(ids)

    def test_curator_filters(self):
        source = FactMapSource(facts={"known": "short"})
        records = [make_record("Known?", 0.9)]
        answered, unanswered = search_answers(
            records, source, curator=lambda a: len(a.ground_truth) > 10, clock=CLOCK
        )
        assert answered == []
        assert unanswered == [records[0].id]


class TestWikiSource:
    def test_extract_parse(self, monkeypatch):
        payload = {"query": {"pages": {"123": {"extract": "Water is a liquid at room temperature."}}}}

        class FakeResponse:
            status_code = 200

            def json(self):
                return payload

        monkeypatch.setattr("selflearn.knowledge.requests.get", lambda *a, **k: FakeResponse())
        source = WikiSearchSource(base_url="http://wiki.example/api")
        assert source.answer("Water") == "Water is a liquid at room temperature."

    def test_empty_extract_is_unanswered(self, monkeypatch):
        payload = {"query": {"pages": {"-1": {"extract": ""}}}}

        class FakeResponse:
            status_code = 200

            def json(self):
                return payload

        monkeypatch.setattr("selflearn.knowledge.requests.get", lambda *a, **k: FakeResponse())
        assert WikiSearchSource(base_url="http://wiki.example/api").answer("Nothing") is None


class TestPeerExchange:
    def make_peer(self, facts):
        return MockModelBackend(kb=MockKnowledgeBase.from_pairs(facts))

    def scorer(self):
        return EmbeddingConsistencyBackend(MockEmbedder(dimension=128, seed=1))

    def test_peer_known_answer_returned(self):
        peer = self.make_peer({"What is water?": "A liquid."})
        record = make_record("What is water?", 0.9)
        answered = peer_exchange(record, peer, self.scorer(), 0.5, clock=CLOCK)
        assert answered is not None
        assert answered.ground_truth == "A liquid."
        assert answered.source is AnswerOrigin.PEER_MODEL

    def test_peer_unknown_suppressed(self):
        peer = self.make_peer({})
        record = make_record("What is dark matter made of?", 0.9)
        assert peer_exchange(record, peer, self.scorer(), 0.5, clock=CLOCK) is None

    def test_bilateral_exchange_transfers_exactly_missing_facts(self):
        facts_a = {f"What is alpha fact {i}?": f"Alpha answer {i}." for i in range(20)}
        facts_b = {f"What is beta fact {i}?": f"Beta answer {i}." for i in range(20)}
        peer_a = self.make_peer(facts_a)
        peer_b = self.make_peer(facts_b)
        scorer = self.scorer()

        def exchange(asker_missing, responder):
            received = {}
            for i, question in enumerate(asker_missing):
                record = make_record(question, 0.9, index=i)
                answered = peer_exchange(record, responder, scorer, 0.5, base_seed=i * 10, clock=CLOCK)
                if answered is not None:
                    received[question] = answered.ground_truth
            return received

        a_received = exchange(list(facts_b), peer_b)  # A asks what it lacks
        b_received = exchange(list(facts_a), peer_a)
        assert a_received == facts_b  # exactly the 20 facts A lacked
        assert b_received == facts_a


class TestReviewFile:
    def build_answers(self):
        source = FactMapSource(facts={"known 0": "answer zero", "known 1": "answer one"})
        records = [make_record(f"Known {i}?", 0.9, index=i) for i in range(2)]
        answered, _ = search_answers(records, source, clock=CLOCK)
        return answered

    def test_round_trip_override_and_reject(self, tmp_path):
        answered = self.build_answers()
        path = tmp_path / "review.jsonl"
        export_review_file(answered, path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert all(row["verdict"] == "accept" for row in rows)

        rows[0]["ground_truth"] = "corrected by a human"
        rows[1]["verdict"] = "reject"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")

        revised = apply_review_file(answered, path, clock=CLOCK)
        assert len(revised) == 1
        assert revised[0].ground_truth == "corrected by a human"
        assert revised[0].source is AnswerOrigin.HUMAN_FILE

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from selflearn.errors import (
    CapabilityError,
    MalformedResponseError,
    StructureError,
    TransportError,
)
from selflearn.gateway import (
    BaselineDummyBackend,
    EmbeddingVector,
    GenerationRequest,
    MockEmbedder,
    MockKnowledgeBase,
    MockModelBackend,
    OpenAiChatBackend,
    baseline_dummy,
    embed,
    sample_n,
)

ANSWER_PROMPT = "Answer the following question concisely.\nQuestion: {q}\nAnswer:"


@pytest.fixture
def mock_backend() -> MockModelBackend:
    kb = MockKnowledgeBase.from_pairs({"What is the capital of France?": "Paris"})
    return MockModelBackend(kb=kb)


class TestGenerationRequest:
    def test_rejects_empty_prompt(self):
        with pytest.raises(ValueError):
            GenerationRequest(prompt="")

    def test_rejects_bad_max_tokens(self):
        with pytest.raises(ValueError):
            GenerationRequest(prompt="p", max_tokens=0)


class TestMockModel:
    def test_known_key_greedy_contains_answer(self, mock_backend):
        response = mock_backend.complete(
            GenerationRequest(prompt="What is the capital of France?", temperature=0.0)
        )
        assert "Paris" in response.text

    def test_known_key_all_temperatures_contain_answer(self, mock_backend):
        prompt = ANSWER_PROMPT.format(q="What is the capital of France?")
        for seed in range(5):
            response = mock_backend.complete(
                GenerationRequest(prompt=prompt, temperature=1.0, seed=seed)
            )
            assert "Paris" in response.text

    def test_unknown_key_seeds_differ(self, mock_backend):
        prompt = "Who invented the zero-gravity teapot?"
        one = mock_backend.complete(GenerationRequest(prompt=prompt, temperature=1.0, seed=1))
        two = mock_backend.complete(GenerationRequest(prompt=prompt, temperature=1.0, seed=2))
        assert one.text != two.text

    def test_unknown_key_greedy_deterministic(self, mock_backend):
        prompt = "Who invented the zero-gravity teapot?"
        one = mock_backend.complete(GenerationRequest(prompt=prompt, temperature=0.0))
        two = mock_backend.complete(GenerationRequest(prompt=prompt, temperature=0.0))
        assert one.text == two.text

    def test_kb_duplicate_normalized_keys_rejected(self):
        with pytest.raises(StructureError):
            MockKnowledgeBase.from_pairs({"What is X?": "a", "what is x": "b"})

    def test_kb_file_round_trip(self, tmp_path):
        kb = MockKnowledgeBase.from_pairs({"Q one?": "A1", "Q two?": "A2"})
        path = tmp_path / "kb.json"
        kb.save(path)
        loaded = MockKnowledgeBase.from_file(path)
        assert loaded.facts == kb.facts

    def test_injection_makes_key_known(self, mock_backend):
        question = "What is the tallest tower in Arcadia?"
        assert mock_backend.kb.lookup(question) is None
        mock_backend.kb.inject(question, "The Sky Spire")
        response = mock_backend.complete(GenerationRequest(prompt=question, temperature=0.0))
        assert "Sky Spire" in response.text


class TestSampleN:
    def test_known_key_consistent(self, mock_backend):
        prompt = ANSWER_PROMPT.format(q="What is the capital of France?")
        samples = sample_n(prompt, 10, 1.0, mock_backend, base_seed=3)
        assert len(samples) == 10
        assert all("Paris" in s for s in samples)

    def test_unknown_key_distinct_over_trials(self, mock_backend):
        # By the noise construction, 10 seeded samples should be nearly all
        # distinct; verify across 100 trials.
        for trial in range(100):
            prompt = ANSWER_PROMPT.format(q=f"What is fact number {trial} of Neverwhere?")
            samples = sample_n(prompt, 10, 1.0, mock_backend, base_seed=trial * 10)
            assert len(set(samples)) >= 8

    def test_single_greedy_equals_generate(self, mock_backend):
        prompt = ANSWER_PROMPT.format(q="What is the capital of France?")
        samples = sample_n(prompt, 1, 0.0, mock_backend, base_seed=0)
        greedy = mock_backend.complete(GenerationRequest(prompt=prompt, temperature=0.0))
        assert samples == [greedy.text]

    def test_rejects_n_below_one(self, mock_backend):
        with pytest.raises(ValueError):
            sample_n("p", 0, 1.0, mock_backend)


class TestBaselineDummy:
    def test_deterministic(self):
        assert baseline_dummy("p") == baseline_dummy("p")

    def test_distinct_prompts_distinct_outputs(self):
        outputs = {baseline_dummy(f"prompt {i}") for i in range(500)}
        assert len(outputs) == 500

    def test_output_is_long_enough_to_floor_brevity(self):
        # mean |len - 100| must reach 100 so the dummy scores zero brevity.
        assert len(baseline_dummy("p")) >= 200

    def test_backend_ignores_temperature_and_seed(self):
        backend = BaselineDummyBackend()
        a = backend.complete(GenerationRequest(prompt="p", temperature=1.0, seed=1))
        b = backend.complete(GenerationRequest(prompt="p", temperature=0.0, seed=9))
        assert a.text == b.text

    def test_no_logprob_echo(self):
        with pytest.raises(CapabilityError):
            BaselineDummyBackend().echo_logprobs("text")


class TestMockEmbedder:
    def test_identical_texts_identical_vectors(self):
        embedder = MockEmbedder(dimension=64, seed=0)
        vecs = embed(["a", "a"], embedder)
        assert vecs[0] == vecs[1]

    def test_unit_norm(self):
        embedder = MockEmbedder(dimension=64, seed=0)
        for text in ("hello world", "x", "", "a b c d e f"):
            vec = embedder.embed_one(text)
            assert abs(np.linalg.norm(vec.as_array()) - 1.0) < 1e-9

    def test_negation_prefix_is_antipodal(self):
        embedder = MockEmbedder(dimension=64, seed=0)
        plus = embedder.embed_one("alpha").as_array()
        minus = embedder.embed_one("not-alpha").as_array()
        assert np.dot(plus, minus) == pytest.approx(-1.0, abs=1e-9)

    def test_count_and_shape_at_scale(self):
        embedder = MockEmbedder(dimension=32, seed=0)
        texts = [f"question number {i}?" for i in range(3000)]
        vectors = embed(texts, embedder)
        assert len(vectors) == 3000
        assert all(v.dimension == 32 for v in vectors)

    def test_deterministic_across_instances(self):
        a = MockEmbedder(dimension=16, seed=5).embed_one("same text")
        b = MockEmbedder(dimension=16, seed=5).embed_one("same text")
        assert a == b

    def test_batch_dimension_mismatch_rejected(self):
        class Broken:
            dimension = 2

            def embed_texts(self, texts):
                return [
                    EmbeddingVector(values=(1.0, 0.0), dimension=2),
                    EmbeddingVector(values=(1.0, 0.0, 0.0), dimension=3),
                ]

        with pytest.raises(MalformedResponseError):
            embed(["a", "b"], Broken())

    def test_embedding_vector_rejects_nan(self):
        with pytest.raises(ValueError):
            EmbeddingVector(values=(float("nan"), 0.0), dimension=2)


class _FakeResponse:
    def __init__(self, status_code: int, payload=None, text: str = ""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


def _chat_payload(text: str, logprobs=None):
    choice = {"message": {"content": text}}
    if logprobs is not None:
        choice["logprobs"] = {"content": logprobs}
    return {"choices": [choice]}


class TestHttpBackend:
    def test_retries_then_succeeds(self, monkeypatch):
        calls = []

        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            if len(calls) < 3:
                return _FakeResponse(503, text="busy")
            return _FakeResponse(200, _chat_payload("hello"))

        monkeypatch.setattr("selflearn.gateway.requests.post", fake_post)
        monkeypatch.setattr("selflearn.gateway.time.sleep", lambda s: None)
        backend = OpenAiChatBackend(base_url="http://example/v1", model="m")
        response = backend.complete(GenerationRequest(prompt="p"))
        assert response.text == "hello"
        assert len(calls) == 3

    def test_transport_error_carries_attempts(self, monkeypatch):
        monkeypatch.setattr(
            "selflearn.gateway.requests.post",
            lambda *a, **k: _FakeResponse(500, text="down"),
        )
        monkeypatch.setattr("selflearn.gateway.time.sleep", lambda s: None)
        backend = OpenAiChatBackend(base_url="http://example/v1", model="m")
        with pytest.raises(TransportError) as excinfo:
            backend.complete(GenerationRequest(prompt="p"))
        assert excinfo.value.attempts == 3

    def test_client_error_is_permanent(self, monkeypatch):
        calls = []

        def fake_post(url, **kwargs):
            calls.append(url)
            return _FakeResponse(401, text="unauthorized")

        monkeypatch.setattr("selflearn.gateway.requests.post", fake_post)
        backend = OpenAiChatBackend(base_url="http://example/v1", model="m")
        with pytest.raises(MalformedResponseError):
            backend.complete(GenerationRequest(prompt="p"))
        assert len(calls) == 1  # no retry on permanent errors

    def test_logprobs_length_matches_token_count(self, monkeypatch):
        tokens = [{"token": t, "logprob": -0.5} for t in ("a", "b", "c")]
        monkeypatch.setattr(
            "selflearn.gateway.requests.post",
            lambda *a, **k: _FakeResponse(200, _chat_payload("a b c", tokens)),
        )
        backend = OpenAiChatBackend(base_url="http://example/v1", model="m")
        response = backend.complete(GenerationRequest(prompt="p", want_logprobs=True))
        assert response.token_logprobs is not None
        assert len(response.token_logprobs) == len(tokens)

    def test_echo_logprobs_parses_completions_payload(self, monkeypatch):
        payload = {
            "choices": [
                {
                    "logprobs": {
                        "tokens": ["Lon", "don"],
                        "token_logprobs": [None, -math.log(2)],
                    }
                }
            ]
        }
        monkeypatch.setattr(
            "selflearn.gateway.requests.post", lambda *a, **k: _FakeResponse(200, payload)
        )
        backend = OpenAiChatBackend(base_url="http://example/v1", model="m")
        pairs = backend.echo_logprobs("London")
        assert pairs == [("Lon", None), ("don", -math.log(2))]


class TestMockEchoLogprobs:
    def test_uniform_vocabulary(self, mock_backend):
        pairs = mock_backend.echo_logprobs("three token text".replace("token", "word"))
        assert len(pairs) == 3
        assert all(lp == -math.log(128) for _t, lp in pairs)


class TestMockConcurrency:
    def test_interleaved_calls_stay_deterministic(self, mock_backend):
        # Outputs depend only on (prompt, seed), so concurrent callers
        # must see exactly what a sequential caller would.
        from concurrent.futures import ThreadPoolExecutor

        requests = [
            GenerationRequest(prompt=f"Mystery item {i % 7}?", temperature=1.0, seed=i % 5)
            for i in range(60)
        ]
        expected = [mock_backend.complete(r).text for r in requests]
        with ThreadPoolExecutor(max_workers=8) as pool:
            got = list(pool.map(lambda r: mock_backend.complete(r).text, requests))
        assert got == expected

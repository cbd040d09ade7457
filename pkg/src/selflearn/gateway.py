"""Uniform access to text-generation and embedding backends.

Three generation backends are provided: an OpenAI-compatible HTTP client,
a deterministic mock model driven by an injectable knowledge base, and the
deterministic baseline dummy used for scoring floors. Embeddings come from
an OpenAI-compatible endpoint or an offline hashing embedder.

The mock model understands the markers used by the default prompt
templates ("Topics:", "Question:", "Answer:", a leading "Propose") so the
whole loop can run offline. For prompts without markers the entire prompt
is treated as a question. Questions whose normalized form is present in
the knowledge base are answered with the canonical answer, identically at
every temperature. Unknown questions produce confabulated pseudo-word
claims; sampled generations negate the greedy claim (each pseudo-word
prefixed with "not-") and append a seed-derived nonce, so samples are
pairwise distinct and embed roughly opposite to the main passage. That
gives the simulation a controllable Known/Unknown ground truth.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .core import normalize_text
from .errors import (
    CapabilityError,
    MalformedResponseError,
    SampleBatchError,
    StructureError,
    TransportError,
)

logger = logging.getLogger(__name__)

RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 0.5
RETRYABLE_STATUS = {429, 500, 502, 503, 504}

TokenLogprob = tuple[str, float | None]


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 256
    want_logprobs: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    token_logprobs: tuple[TokenLogprob, ...] | None = None


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dimension: int

    def __post_init__(self) -> None:
        if len(self.values) != self.dimension:
            raise ValueError("embedding length does not match declared dimension")
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains NaN/Inf components")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class GenerationBackend(Protocol):
    def complete(self, request: GenerationRequest) -> GenerationResponse: ...

    def echo_logprobs(self, text: str) -> list[TokenLogprob]:
        """Teacher-forced per-token logprobs for a fixed text."""
        ...


class EmbeddingBackend(Protocol):
    dimension: int

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def generate(request: GenerationRequest, backend: GenerationBackend) -> GenerationResponse:
    return backend.complete(request)


def sample_n(
    prompt: str,
    n: int,
    temperature: float,
    backend: GenerationBackend,
    *,
    base_seed: int = 0,
    max_tokens: int = 256,
) -> list[str]:
    """Generate exactly n samples; sample i uses seed base_seed + i."""
    if n < 1:
        raise ValueError("n must be >= 1")
    texts: list[str] = []
    failed: list[int] = []
    for i in range(n):
        request = GenerationRequest(
            prompt=prompt,
            temperature=temperature,
            max_tokens=max_tokens,
            seed=base_seed + i,
        )
        try:
            texts.append(backend.complete(request).text)
        except TransportError:
            logger.warning("sample %d/%d failed after retries", i, n)
            failed.append(i)
    if failed:
        raise SampleBatchError(failed)
    return texts


def embed(texts: Sequence[str], backend: EmbeddingBackend) -> list[EmbeddingVector]:
    """Embed a batch, enforcing the shared-dimension contract."""
    if not texts:
        raise ValueError("texts must be non-empty")
    vectors = backend.embed_texts(texts)
    if len(vectors) != len(texts):
        raise MalformedResponseError(
            f"embedding backend returned {len(vectors)} vectors for {len(texts)} texts"
        )
    dims = {v.dimension for v in vectors}
    if len(dims) > 1:
        raise MalformedResponseError(f"embedding dimensions differ across batch: {sorted(dims)}")
    return vectors


# --- HTTP backends ----------------------------------------------------------

def _post_json(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    """POST with bounded retries on transport failures and retryable statuses."""
    last_error: str = ""
    for attempt in range(1, RETRY_ATTEMPTS + 1):
        try:
            response = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_error = str(exc)
        else:
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as exc:
                    raise MalformedResponseError(f"non-JSON response from {url}: {exc}") from exc
            if response.status_code not in RETRYABLE_STATUS:
                raise MalformedResponseError(
                    f"{url} returned {response.status_code}: {response.text[:200]}"
                )
            last_error = f"status {response.status_code}"
        if attempt < RETRY_ATTEMPTS:
            time.sleep(RETRY_BACKOFF_S * (2 ** (attempt - 1)))
    raise TransportError(f"POST {url} failed: {last_error}", attempts=RETRY_ATTEMPTS)


@dataclass
class OpenAiChatBackend:
    """OpenAI-compatible chat-completions client (auth token via env var)."""

    base_url: str
    model: str
    api_key_env: str = "SELFLEARN_API_KEY"
    timeout_s: float = 120.0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: GenerationRequest) -> GenerationResponse:
        payload: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        if request.temperature > 0.0:
            logger.debug(
                "sampled request; reproducibility depends on the backend honoring seed=%s",
                request.seed,
            )
        if request.want_logprobs:
            payload["logprobs"] = True
        data = _post_json(
            f"{self.base_url.rstrip('/')}/chat/completions", payload, self._headers(), self.timeout_s
        )
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected chat-completions payload: {exc}") from exc
        token_logprobs = None
        if request.want_logprobs:
            content = (choice.get("logprobs") or {}).get("content")
            if content:
                token_logprobs = tuple((t["token"], t["logprob"]) for t in content)
        return GenerationResponse(text=text, token_logprobs=token_logprobs)

    def echo_logprobs(self, text: str) -> list[TokenLogprob]:
        """Token logprobs of `text` under teacher forcing via /completions echo."""
        payload = {
            "model": self.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        try:
            data = _post_json(
                f"{self.base_url.rstrip('/')}/completions", payload, self._headers(), self.timeout_s
            )
        except MalformedResponseError as exc:
            raise CapabilityError(f"backend does not support logprob echo: {exc}") from exc
        try:
            logprobs = data["choices"][0]["logprobs"]
            tokens = logprobs["tokens"]
            values = logprobs["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CapabilityError(f"backend returned no logprob echo: {exc}") from exc
        return list(zip(tokens, values))


@dataclass
class OpenAiEmbeddingBackend:
    """OpenAI-compatible embeddings client."""

    base_url: str
    model: str
    api_key_env: str = "SELFLEARN_API_KEY"
    timeout_s: float = 120.0
    dimension: int = 0  # discovered from the first response

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        payload = {"model": self.model, "input": list(texts)}
        data = _post_json(
            f"{self.base_url.rstrip('/')}/embeddings", payload, self._headers(), self.timeout_s
        )
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            raw = [row["embedding"] for row in rows]
        except (KeyError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected embeddings payload: {exc}") from exc
        if self.dimension == 0 and raw:
            self.dimension = len(raw[0])
        return [EmbeddingVector(values=tuple(v), dimension=self.dimension) for v in raw]


# --- Mock knowledge base and mock model ---------------------------------------

@dataclass
class MockKnowledgeBase:
    """Question-key to canonical-answer map with normalized unique keys."""

    facts: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], seed: int = 0) -> "MockKnowledgeBase":
        facts: dict[str, str] = {}
        for question, answer in pairs.items():
            key = normalize_text(question)
            if key in facts:
                raise StructureError(f"duplicate knowledge-base key after normalization: {key!r}")
            facts[key] = answer
        return cls(facts=facts, seed=seed)

    @classmethod
    def from_file(cls, path: str | Path, seed: int = 0) -> "MockKnowledgeBase":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_pairs(json.load(handle), seed=seed)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.facts, handle, ensure_ascii=False, indent=2, sort_keys=True)
            handle.write("\n")

    def lookup(self, question: str) -> str | None:
        return self.facts.get(normalize_text(question))

    def inject(self, question: str, answer: str) -> None:
        self.facts[normalize_text(question)] = answer


_TOPICS_RE = re.compile(r"Topics:\s*(.+)")
_QUESTION_RE = re.compile(r"Question:\s*(.*?)\s*(?:\nAnswer:|$)", re.DOTALL)
_QUESTION_WORD_RE = re.compile(r"question word '(\w+)'")
_FIRST_QUESTION_RE = re.compile(r"([^;\n]*\?)")
_PROPOSE_N_RE = re.compile(r"Propose\s+(\d+)")


def _hash_words(payload: str, count: int) -> list[str]:
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    return ["w" + digest[i * 6 : (i + 1) * 6] for i in range(count)]


@dataclass
class MockModelBackend:
    """Deterministic stand-in model; output depends only on (prompt, seed).

    Greedy requests (temperature 0) ignore the seed entirely, so they are
    stable across runs for a fixed knowledge-base state.
    """

    kb: MockKnowledgeBase
    vocab_size: int = 128

    def complete(self, request: GenerationRequest) -> GenerationResponse:
        effective_seed = 0 if request.temperature == 0.0 else (request.seed or 0)
        prompt = request.prompt
        if prompt.lstrip().startswith("Propose"):
            text = self._propose_topics(prompt, effective_seed)
        elif "\nAnswer:" in prompt or prompt.rstrip().endswith("Answer:"):
            text = self._answer(self._extract_question(prompt), request.temperature, effective_seed)
        elif "Question:" in prompt and "Topics:" in prompt:
            text = self._make_question(prompt)
        else:
            text = self._answer(prompt, request.temperature, effective_seed)
        return GenerationResponse(text=text)

    def echo_logprobs(self, text: str) -> list[TokenLogprob]:
        # Uniform distribution over the mock vocabulary; whitespace tokens.
        logprob = -math.log(self.vocab_size)
        return [(token, logprob) for token in text.split()]

    def _propose_topics(self, prompt: str, seed: int) -> str:
        match = _PROPOSE_N_RE.search(prompt)
        count = int(match.group(1)) if match else 3
        words = _hash_words(f"{prompt}|{seed}", count)
        return "\n".join(f"subject-{w}" for w in words)

    def _extract_question(self, prompt: str) -> str:
        match = _QUESTION_RE.search(prompt)
        if match and match.group(1).strip():
            return match.group(1).strip()
        return prompt

    def _make_question(self, prompt: str) -> str:
        match = _TOPICS_RE.search(prompt)
        payload = match.group(1).strip() if match else ""
        head = payload.split(";")[0].strip() or "this"
        word_match = _QUESTION_WORD_RE.search(prompt)
        if word_match:
            word = word_match.group(1)
            return f"{word.capitalize()} defines {head}?"
        question_match = _FIRST_QUESTION_RE.search(payload)
        if question_match:
            return question_match.group(1).strip()
        return f"What is {head}?"

    def _answer(self, question: str, temperature: float, seed: int) -> str:
        canonical = self.kb.lookup(question)
        if canonical is not None:
            return canonical
        key = normalize_text(question)
        stems = _hash_words(key, 3)
        if temperature == 0.0:
            return " ".join(stems) + "."
        nonce = "w" + hashlib.sha256(f"{key}|{seed}".encode("utf-8")).hexdigest()[:6]
        return " ".join(f"not-{stem}" for stem in stems) + f" {nonce}."


# --- Baseline dummy -----------------------------------------------------------

def baseline_dummy(prompt: str) -> str:
    """Deterministic dummy: same prompt, same text; different prompts differ.

    The fixed template around the prompt hash keeps outputs far from any
    plausible question length, so brevity scoring floors at zero.
    """
    digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
    return f"unvarying reply {digest}{digest}{digest}{digest}"


class BaselineDummyBackend:
    """Generation backend around baseline_dummy; ignores temperature and seed."""

    def complete(self, request: GenerationRequest) -> GenerationResponse:
        return GenerationResponse(text=baseline_dummy(request.prompt))

    def echo_logprobs(self, text: str) -> list[TokenLogprob]:
        raise CapabilityError("baseline dummy has no token distribution")


# --- Offline hashing embedder ---------------------------------------------------

_PUNCT_STRIP = ".,?!:;\"'()[]{}"
NEGATION_PREFIX = "not-"


class MockEmbedder:
    """Deterministic token-hash embedder producing unit vectors.

    Each token maps to a seeded pseudo-random direction; a text embeds as
    the normalized sum of its token directions. Tokens carrying the
    "not-" prefix embed as the exact negation of the base token, which is
    the mock convention for contradiction: a claim and its negation are
    antipodal, unrelated tokens are near-orthogonal, identical texts are
    identical vectors.
    """

    def __init__(self, dimension: int = 256, seed: int = 0):
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}
        self._text_cache: dict[str, EmbeddingVector] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, key=str(self.seed).encode("utf-8")
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "big"))
        vec = rng.standard_normal(self.dimension)
        vec /= np.linalg.norm(vec)
        self._token_cache[token] = vec
        return vec

    def _tokens(self, text: str) -> list[str]:
        tokens = []
        for raw in text.lower().split():
            token = raw.strip(_PUNCT_STRIP)
            if token:
                tokens.append(token)
        return tokens

    def embed_one(self, text: str) -> EmbeddingVector:
        cached = self._text_cache.get(text)
        if cached is not None:
            return cached
        total = np.zeros(self.dimension)
        for token in self._tokens(text):
            if token.startswith(NEGATION_PREFIX) and len(token) > len(NEGATION_PREFIX):
                total -= self._token_vector(token[len(NEGATION_PREFIX):])
            else:
                total += self._token_vector(token)
        norm = np.linalg.norm(total)
        if norm < 1e-12:
            # Empty or fully self-cancelling text: fall back to a whole-text hash.
            total = self._token_vector("\x00" + text)
            norm = np.linalg.norm(total)
        total = total / norm
        vector = EmbeddingVector(values=tuple(float(v) for v in total), dimension=self.dimension)
        self._text_cache[text] = vector
        return vector

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self.embed_one(t) for t in texts]

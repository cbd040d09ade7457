"""Sampling-based hallucination scoring.

A main passage (greedy answer) is split into sentences; every sentence is
checked against every sampled answer by a pluggable consistency backend
returning values in [0, 1] (1 = contradiction). The passage score is the
mean over all (sentence, sample) pairs, accumulated in input-index order
so results are bitwise reproducible.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .core import HallucinationScore
from .errors import MalformedResponseError
from .gateway import EmbeddingBackend, EmbeddingVector, _post_json

logger = logging.getLogger(__name__)

# Tokens that end with a period without ending a sentence. "no" is handled
# separately: it only blocks a split when followed by a number ("No. 5").
ABBREVIATIONS = {
    "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "etc", "e.g", "i.e",
    "vs", "fig", "al", "dept", "est", "approx", "inc", "ltd", "co", "mt",
    "capt", "gen", "sen", "rep", "rev", "hon", "u.s", "u.k", "ca", "cf",
}

_BOUNDARY_RE = re.compile(r"[.?!]+[\"')\]]*(?=\s|$)")
_LAST_TOKEN_RE = re.compile(r"([\w.\-']+)$")


class ConsistencyBackend(Protocol):
    """Scores one (hypothesis sentence, premise sample) pair in [0, 1]."""

    name: str

    def score_pair(self, hypothesis: str, premise: str) -> float: ...


def split_sentences(passage: str) -> list[str]:
    """Rule-based sentence split preserving all non-whitespace content.

    Boundaries are terminal punctuation runs followed by whitespace where
    the next sentence starts with an uppercase letter, digit, or quote.
    An abbreviation allowlist suppresses false splits; decimals never
    split because the punctuation must be followed by whitespace.
    """
    if not passage.strip():
        return []
    pieces: list[str] = []
    start = 0
    for match in _BOUNDARY_RE.finditer(passage):
        end = match.end()
        ambiguous = "." in match.group(0)  # only periods can be abbreviations
        if end < len(passage):
            rest = passage[end:].lstrip()
            if not rest:
                break
            if ambiguous and not (rest[0].isupper() or rest[0].isdigit() or rest[0] in "\"'("):
                continue
        if ambiguous:
            before = passage[start : match.start()]
            token_match = _LAST_TOKEN_RE.search(before)
            if token_match:
                token = token_match.group(1).lower().rstrip(".")
                if token in ABBREVIATIONS:
                    continue
                if token == "no" and end < len(passage):
                    follower = passage[end:].lstrip()
                    if follower and follower[0].isdigit():
                        continue
        piece = passage[start:end].strip()
        if piece:
            pieces.append(piece)
        start = end
    tail = passage[start:].strip()
    if tail:
        pieces.append(tail)
    return pieces


def _has_content(sentence: str) -> bool:
    return any(ch.isalnum() for ch in sentence)


def score_passage(
    main_passage: str,
    samples: Sequence[str],
    backend: ConsistencyBackend,
) -> HallucinationScore:
    """Mean pair inconsistency between passage sentences and samples.

    A passage with no scoreable sentences (whitespace/punctuation only)
    counts as a failure to answer and scores 1.0.
    """
    if not main_passage:
        raise ValueError("main_passage must be non-empty")
    if not samples:
        raise ValueError("samples must be non-empty")
    sentences = [s for s in split_sentences(main_passage) if _has_content(s)]
    if not sentences:
        logger.warning("degenerate main passage (no scoreable sentences); scoring 1.0")
        return HallucinationScore(1.0)
    total = 0.0
    for sentence in sentences:
        for sample in samples:
            value = backend.score_pair(sentence, sample)
            if not (-1e-9 <= value <= 1.0 + 1e-9) or not math.isfinite(value):
                raise MalformedResponseError(
                    f"consistency backend {backend.name!r} returned {value!r} outside [0, 1]"
                )
            total += min(1.0, max(0.0, value))
    return HallucinationScore(total / (len(sentences) * len(samples)))


class EmbeddingConsistencyBackend:
    """Offline fallback scorer: cosine disagreement between embeddings.

    score_pair(s, p) = (1 - cos(embed(s), embed(p))) / 2, clamped to [0, 1].
    """

    name = "embedding-cosine"

    def __init__(self, embedder: EmbeddingBackend):
        self._embedder = embedder
        self._cache: dict[str, EmbeddingVector] = {}

    def _vector(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is None:
            cached = self._embedder.embed_texts([text])[0]
            self._cache[text] = cached
        return cached.as_array()

    def score_pair(self, hypothesis: str, premise: str) -> float:
        u = self._vector(hypothesis)
        v = self._vector(premise)
        denom = float(np.linalg.norm(u) * np.linalg.norm(v))
        cosine = float(np.dot(u, v)) / denom if denom > 0 else 0.0
        return min(1.0, max(0.0, (1.0 - cosine) / 2.0))


class NliConsistencyBackend:
    """HTTP classifier returning entailment/neutral/contradiction probabilities.

    The pair score is the contradiction probability of the three-class
    head, which is the convention recorded in run metadata.
    """

    name = "nli-http"

    def __init__(self, url: str, timeout_s: float = 60.0):
        self.url = url
        self.timeout_s = timeout_s

    def score_pair(self, hypothesis: str, premise: str) -> float:
        data = _post_json(
            self.url,
            {"premise": premise, "hypothesis": hypothesis},
            {"Content-Type": "application/json"},
            self.timeout_s,
        )
        try:
            entail = float(data["entail"])
            neutral = float(data["neutral"])
            contradict = float(data["contradict"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(f"unexpected NLI payload: {exc}") from exc
        total = entail + neutral + contradict
        if abs(total - 1.0) > 1e-6:
            raise MalformedResponseError(f"NLI probabilities sum to {total}, expected 1")
        if not (0.0 <= contradict <= 1.0):
            raise MalformedResponseError(f"contradiction probability {contradict} outside [0, 1]")
        return contradict


@dataclass(frozen=True)
class ScriptedConsistencyBackend:
    """Fixed-score backend for tests and calibration."""

    value: float
    name: str = "scripted"

    def score_pair(self, hypothesis: str, premise: str) -> float:
        return self.value

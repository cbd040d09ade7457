"""Before/after evaluation harness.

Re-scores hallucination on the learned questions and computes summary-level
ROUGE-L, normalized judge verdicts, and pooled corpus perplexity, assembled
into a per-dataset report. Sampling of evaluation rows is seeded and the
actual sampled counts are recorded alongside every mean.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import QuestionRecord, iter_jsonl
from .errors import CapabilityError, TransportError
from .gateway import GenerationBackend, GenerationRequest, sample_n
from .hallucination import ConsistencyBackend, score_passage, split_sentences

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_SIZE = 1000

ANSWER_TEMPLATE = "Answer the following question concisely.\nQuestion: {question}\nAnswer:"

JUDGE_TEMPLATE = (
    "Judge the model answer against the ground truth. Reply 'yes' if the model "
    "answer captures the meaning of the ground truth, 'partly' if it is partially "
    "correct, or 'no' if it is completely different.\n"
    "Question: {question}\nModel answer: {model_answer}\nGround truth: {ground_truth}\nVerdict:"
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _lcs_prefix_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    rows = len(a)
    cols = len(b)
    table = [[0] * (cols + 1) for _ in range(rows + 1)]
    for i in range(1, rows + 1):
        for j in range(1, cols + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table


def _lcs_union_positions(reference: Sequence[str], candidate: Sequence[str]) -> set[int]:
    """Reference token positions participating in any optimal LCS alignment."""
    if not reference or not candidate:
        return set()
    prefix = _lcs_prefix_table(reference, candidate)
    suffix = _lcs_prefix_table(reference[::-1], candidate[::-1])
    total = prefix[len(reference)][len(candidate)]
    positions: set[int] = set()
    for i, token in enumerate(reference):
        for j, other in enumerate(candidate):
            if token != other:
                continue
            before = prefix[i][j]
            after = suffix[len(reference) - 1 - i][len(candidate) - 1 - j]
            if before + 1 + after == total:
                positions.add(i)
                break
    return positions


def rouge_lsum(candidate: str, reference: str) -> float:
    """Summary-level ROUGE-L F1.

    Both texts split into sentences; each reference sentence contributes
    the union of its token positions that appear in an optimal LCS with
    any candidate sentence; hits are clipped by per-token counts on both
    sides before computing F1. Tokens are lowercase alphanumeric words.
    """
    ref_sentences = [_tokenize(s) for s in split_sentences(reference)]
    cand_sentences = [_tokenize(s) for s in split_sentences(candidate)]
    ref_sentences = [s for s in ref_sentences if s]
    cand_sentences = [s for s in cand_sentences if s]
    m = sum(len(s) for s in ref_sentences)
    n = sum(len(s) for s in cand_sentences)
    if m == 0 or n == 0:
        return 0.0
    ref_budget = Counter(token for s in ref_sentences for token in s)
    cand_budget = Counter(token for s in cand_sentences for token in s)
    hits = 0
    for ref in ref_sentences:
        union: set[int] = set()
        for cand in cand_sentences:
            union |= _lcs_union_positions(ref, cand)
        for position in sorted(union):
            token = ref[position]
            if ref_budget[token] > 0 and cand_budget[token] > 0:
                hits += 1
                ref_budget[token] -= 1
                cand_budget[token] -= 1
    precision = hits / n
    recall = hits / m
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def normalize_judge(response: str) -> float:
    """Map a judge reply onto {0.0, 0.5, 1.0} by its first word; anything
    off-script counts as 0.0."""
    first = response.strip().split()[0] if response.strip() else ""
    word = first.strip(".,!?:;\"'()-—").lower()
    if word == "yes":
        return 1.0
    if word == "partly":
        return 0.5
    return 0.0


def judge_correctness(
    question: str,
    model_answer: str,
    ground_truth: str,
    judge: GenerationBackend,
    *,
    template: str = JUDGE_TEMPLATE,
) -> float:
    prompt = template.format(
        question=question, model_answer=model_answer, ground_truth=ground_truth
    )
    reply = judge.complete(GenerationRequest(prompt=prompt, temperature=0.0, max_tokens=8)).text
    return normalize_judge(reply)


def perplexity(texts: Sequence[str], backend: GenerationBackend) -> float:
    """Pooled corpus perplexity: exp of the token-weighted mean negative
    logprob over all texts (not the mean of per-text perplexities).

    Leading tokens without a logprob (echo-mode convention) are skipped.
    """
    if not texts:
        raise ValueError("texts must be non-empty")
    total = 0.0
    count = 0
    for text in texts:
        for _token, logprob in backend.echo_logprobs(text):
            if logprob is None:
                continue
            total += logprob
            count += 1
    if count == 0:
        raise CapabilityError("backend produced no scoreable token logprobs")
    return math.exp(-total / count)


# --- Suite ------------------------------------------------------------------------


class EvalCondition(Enum):
    BASELINE = "Baseline"
    AFTER_TRAINING = "AfterTraining"


@dataclass(frozen=True)
class EvalSettings:
    n_samples: int = 10
    sample_temperature: float = 1.0
    sample_size: int = DEFAULT_SAMPLE_SIZE
    seed: int = 0
    answer_template: str = ANSWER_TEMPLATE
    wiki_char_budget: int = 8000  # rows beyond this are truncated (logged)


@dataclass
class EvalReport:
    condition: str
    metrics: dict = field(default_factory=dict)
    sample_sizes: dict = field(default_factory=dict)
    absent: list = field(default_factory=list)
    config_snapshot: dict = field(default_factory=dict)


def _sample_indices(total: int, wanted: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    size = min(total, wanted)
    return sorted(int(i) for i in rng.choice(total, size=size, replace=False))


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def evaluate_suite(
    condition: EvalCondition | str,
    *,
    backend: GenerationBackend,
    scorer: ConsistencyBackend,
    judge: GenerationBackend | None,
    q_h: Sequence[QuestionRecord] = (),
    ground_truths: Mapping[str, str] | None = None,
    wiki_rows: Sequence[str] = (),
    alpaca_rows: Sequence[Mapping[str, str]] = (),
    settings: EvalSettings = EvalSettings(),
    config_snapshot: dict | None = None,
) -> EvalReport:
    """Compute the per-dataset metric grid for one model condition.

    Missing datasets are skipped with an explicit absence note; metrics a
    backend cannot support (perplexity without logprob echo) are reported
    absent, never fabricated.
    """
    label = condition.value if isinstance(condition, EvalCondition) else str(condition)
    report = EvalReport(condition=label, config_snapshot=dict(config_snapshot or {}))
    truths = dict(ground_truths or {})

    if q_h:
        indices = _sample_indices(len(q_h), settings.sample_size, settings.seed)
        hallucination_values: list[float] = []
        rouge_values: list[float] = []
        judge_values: list[float] = []
        for index in indices:
            record = q_h[index]
            prompt = settings.answer_template.format(question=record.text)
            answer = backend.complete(
                GenerationRequest(prompt=prompt, temperature=0.0, max_tokens=256)
            ).text
            samples = sample_n(
                prompt,
                settings.n_samples,
                settings.sample_temperature,
                backend,
                base_seed=settings.seed + index,
            )
            hallucination_values.append(score_passage(answer, samples, scorer).value)
            truth = truths.get(record.id)
            if truth:
                rouge_values.append(rouge_lsum(answer, truth))
                if judge is not None:
                    try:
                        judge_values.append(
                            judge_correctness(record.text, answer, truth, judge)
                        )
                    except TransportError as exc:
                        logger.warning("judge excluded item %s: %s", record.id, exc)
        metrics = {"hallucination": _mean(hallucination_values)}
        sizes = {"hallucination": len(hallucination_values)}
        if rouge_values:
            metrics["rouge_lsum"] = _mean(rouge_values)
            sizes["rouge_lsum"] = len(rouge_values)
        if judge_values:
            metrics["judge"] = _mean(judge_values)
            sizes["judge"] = len(judge_values)
        report.metrics["q_h"] = metrics
        report.sample_sizes["q_h"] = sizes
    else:
        report.absent.append("q_h: dataset missing")

    if wiki_rows:
        indices = _sample_indices(len(wiki_rows), settings.sample_size, settings.seed)
        sampled = [wiki_rows[i] for i in indices]
        truncated = sum(1 for row in sampled if len(row) > settings.wiki_char_budget)
        if truncated:
            logger.info(
                "%d wiki row(s) truncated to the %d-char budget", truncated,
                settings.wiki_char_budget,
            )
            sampled = [row[: settings.wiki_char_budget] for row in sampled]
        try:
            value = perplexity(sampled, backend)
            report.metrics["wiki"] = {"perplexity": value}
            report.sample_sizes["wiki"] = {"perplexity": len(indices)}
        except CapabilityError as exc:
            report.absent.append(f"wiki.perplexity: {exc}")
    else:
        report.absent.append("wiki: dataset missing")

    if alpaca_rows:
        indices = _sample_indices(len(alpaca_rows), settings.sample_size, settings.seed)
        rouge_values = []
        judge_values = []
        for index in indices:
            row = alpaca_rows[index]
            instruction = row.get("instruction", "")
            extra = row.get("input", "")
            question = instruction + ("\n" + extra if extra else "")
            reference = row.get("output", "")
            prompt = settings.answer_template.format(question=question)
            answer = backend.complete(
                GenerationRequest(prompt=prompt, temperature=0.0, max_tokens=256)
            ).text
            rouge_values.append(rouge_lsum(answer, reference))
            if judge is not None:
                try:
                    judge_values.append(judge_correctness(question, answer, reference, judge))
                except TransportError as exc:
                    logger.warning("judge excluded alpaca item %d: %s", index, exc)
        metrics = {"rouge_lsum": _mean(rouge_values)}
        sizes = {"rouge_lsum": len(rouge_values)}
        if judge_values:
            metrics["judge"] = _mean(judge_values)
            sizes["judge"] = len(judge_values)
        report.metrics["alpaca"] = metrics
        report.sample_sizes["alpaca"] = sizes
    else:
        report.absent.append("alpaca: dataset missing")

    return report


# --- Serialization ----------------------------------------------------------------

def report_to_json(report: EvalReport) -> str:
    payload = {
        "condition": report.condition,
        "metrics": report.metrics,
        "sample_sizes": report.sample_sizes,
        "absent": report.absent,
        "config_snapshot": report.config_snapshot,
    }
    return json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    data = json.loads(text)
    return EvalReport(
        condition=data["condition"],
        metrics=data["metrics"],
        sample_sizes=data["sample_sizes"],
        absent=data["absent"],
        config_snapshot=data["config_snapshot"],
    )


_TABLE_ROWS = (
    ("Q_H", "Hallucination Score", "q_h", "hallucination"),
    ("Q_H", "ROUGE-Lsum", "q_h", "rouge_lsum"),
    ("Q_H", "LLM-Judge", "q_h", "judge"),
    ("Wiki", "Perplexity", "wiki", "perplexity"),
    ("Alpaca", "ROUGE-Lsum", "alpaca", "rouge_lsum"),
    ("Alpaca", "LLM-Judge", "alpaca", "judge"),
)


def format_eval_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width grid: one column per labeled condition."""
    header = ["Dataset", "Metric"] + [r.condition for r in reports]
    body: list[list[str]] = []
    for dataset_label, metric_label, dataset_key, metric_key in _TABLE_ROWS:
        row = [dataset_label, metric_label]
        seen = False
        for report in reports:
            value = report.metrics.get(dataset_key, {}).get(metric_key)
            if value is None:
                row.append("-")
            else:
                row.append(f"{value:.2f}")
                seen = True
        if seen:
            body.append(row)
    rows = [header] + body
    widths = [max(len(row[col]) for row in rows) for col in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def load_wiki_rows(path: str | Path) -> list[str]:
    return [row["text"] for row in iter_jsonl(path)]


def load_alpaca_rows(path: str | Path) -> list[dict]:
    return list(iter_jsonl(path))

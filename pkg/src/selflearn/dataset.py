"""Preference-dataset construction and the bridge to an external trainer.

Answered questions are triaged by a judge into unsure (the original answer
was actually close to the truth) and did-not-know cases; the two cases map
onto chosen/rejected pairs differently. Training itself happens outside
this package: the bridge validates the dataset, hands a job spec to the
configured trainer, and records the submission in a run ledger.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import subprocess
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

from .core import iter_jsonl, normalize_text
from .errors import MalformedResponseError, StructureError, TrainerError, TransportError
from .gateway import GenerationBackend, GenerationRequest, MockModelBackend, _post_json
from .knowledge import AnsweredQuestion, Clock, utc_now

logger = logging.getLogger(__name__)

REJECTED_PLACEHOLDER = "-"

TRIAGE_TEMPLATE = (
    "Compare the prediction with the ground truth. Reply with exactly one word: "
    "'similar' if the prediction conveys the same answer as the ground truth, "
    "or 'different' otherwise.\n"
    "Question: {question}\nPrediction: {prediction}\nGround truth: {ground_truth}\nVerdict:"
)


class TriageLabel(Enum):
    UNSURE = "Unsure"
    DID_NOT_KNOW = "DidNotKnow"


@dataclass(frozen=True)
class PreferenceRecord:
    question: str
    chosen: str
    rejected: str
    label: TriageLabel
    question_id: str

    def __post_init__(self) -> None:
        if self.label is TriageLabel.UNSURE and self.rejected != REJECTED_PLACEHOLDER:
            raise ValueError('unsure records must use "-" as the rejected answer')
        if self.label is TriageLabel.DID_NOT_KNOW and self.rejected == REJECTED_PLACEHOLDER:
            raise ValueError("did-not-know records must reject the original prediction")


@dataclass(frozen=True)
class TrainerJobSpec:
    """Hyperparameters handed to the external trainer."""

    dataset_path: str
    output_adapter_id: str
    epochs: int = 3
    learning_rate: float = 3e-5
    micro_batch: int = 4
    grad_accumulation: int = 8
    lora_rank: int = 64
    lora_alpha: int = 128
    lora_dropout: float = 0.05
    lora_bias: str = "none"
    target_projections: tuple[str, ...] = ("q", "v")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accumulation

    def to_dict(self) -> dict:
        return {
            "dataset_path": self.dataset_path,
            "output_adapter_id": self.output_adapter_id,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "micro_batch": self.micro_batch,
            "grad_accumulation": self.grad_accumulation,
            "effective_batch": self.effective_batch,
            "lora": {
                "rank": self.lora_rank,
                "alpha": self.lora_alpha,
                "dropout": self.lora_dropout,
                "bias": self.lora_bias,
                "target_projections": list(self.target_projections),
            },
        }


# --- Triage ---------------------------------------------------------------------

_WORD_RE = re.compile(r"[a-z]+")


def _first_word(text: str) -> str:
    match = _WORD_RE.search(text.strip().lower())
    return match.group(0) if match else ""


def triage(
    answered: AnsweredQuestion,
    judge: GenerationBackend,
    *,
    template: str = TRIAGE_TEMPLATE,
) -> TriageLabel:
    """Ask the judge whether the original prediction matches the truth.

    A non-conforming reply is retried once, then defaults to did-not-know:
    when in doubt, teach the ground truth.
    """
    prompt = template.format(
        question=answered.question.text,
        prediction=answered.question.main_passage,
        ground_truth=answered.ground_truth,
    )
    for attempt in range(2):
        reply = judge.complete(
            GenerationRequest(prompt=prompt, temperature=0.0, max_tokens=8)
        ).text
        word = _first_word(reply)
        if word == "similar":
            return TriageLabel.UNSURE
        if word == "different":
            return TriageLabel.DID_NOT_KNOW
        logger.warning(
            "non-conforming judge reply %r for %s (attempt %d)",
            reply[:50],
            answered.question.id,
            attempt + 1,
        )
    logger.warning("judge never conformed for %s; defaulting to did-not-know", answered.question.id)
    return TriageLabel.DID_NOT_KNOW


def triage_batch(
    answered: Sequence[AnsweredQuestion],
    judge: GenerationBackend,
    *,
    template: str = TRIAGE_TEMPLATE,
) -> list[TriageLabel]:
    return [triage(item, judge, template=template) for item in answered]


@dataclass
class ScriptedJudgeBackend:
    """Judge replaying cached verdicts keyed by normalized question text."""

    verdicts: dict[str, str]
    default: str = "different"

    _QUESTION_RE = re.compile(r"Question:\s*(.*?)\nPrediction:", re.DOTALL)

    @classmethod
    def from_file(cls, path: str | Path, default: str = "different") -> "ScriptedJudgeBackend":
        verdicts = {}
        for row in iter_jsonl(path):
            verdicts[normalize_text(row["question"])] = row["verdict"]
        return cls(verdicts=verdicts, default=default)

    def complete(self, request: GenerationRequest):
        from .gateway import GenerationResponse

        match = self._QUESTION_RE.search(request.prompt)
        key = normalize_text(match.group(1)) if match else ""
        return GenerationResponse(text=self.verdicts.get(key, self.default))

    def echo_logprobs(self, text: str):
        raise NotImplementedError("scripted judge has no token distribution")


@dataclass
class HeuristicJudgeBackend:
    """Offline judge: token overlap between prediction and ground truth.

    Understands the marker layout of the default judge templates; used by
    the fully offline simulation where no external judge exists.
    """

    threshold: float = 0.6

    _PREDICTION_RE = re.compile(r"Prediction:\s*(.*?)\nGround truth:", re.DOTALL)
    _TRUTH_RE = re.compile(r"Ground truth:\s*(.*?)(?:\nVerdict:|$)", re.DOTALL)
    _ANSWER_RE = re.compile(r"Model answer:\s*(.*?)\nGround truth:", re.DOTALL)

    def _overlap(self, left: str, right: str) -> float:
        a = set(re.findall(r"[a-z0-9]+", left.lower()))
        b = set(re.findall(r"[a-z0-9]+", right.lower()))
        if not a or not b:
            return 0.0
        return len(a & b) / len(a | b)

    def complete(self, request: GenerationRequest):
        from .gateway import GenerationResponse

        prompt = request.prompt
        prediction_match = self._PREDICTION_RE.search(prompt) or self._ANSWER_RE.search(prompt)
        truth_match = self._TRUTH_RE.search(prompt)
        if not prediction_match or not truth_match:
            return GenerationResponse(text="different")
        overlap = self._overlap(prediction_match.group(1), truth_match.group(1))
        if "Verdict:" in prompt and "'similar'" in prompt:
            return GenerationResponse(text="similar" if overlap >= self.threshold else "different")
        # Three-way correctness wording used by the evaluation harness.
        if overlap >= self.threshold:
            return GenerationResponse(text="yes")
        if overlap > 0.0:
            return GenerationResponse(text="partly")
        return GenerationResponse(text="no")

    def echo_logprobs(self, text: str):
        raise NotImplementedError("heuristic judge has no token distribution")


# --- Dataset building -------------------------------------------------------------

def build_preference_dataset(
    answered: Sequence[AnsweredQuestion], labels: Sequence[TriageLabel]
) -> list[PreferenceRecord]:
    """One record per answered question, ordered by question id."""
    if len(answered) != len(labels):
        raise StructureError(
            f"answered/labels misaligned: {len(answered)} vs {len(labels)}"
        )
    records: list[PreferenceRecord] = []
    for item, label in zip(answered, labels):
        if not item.question.main_passage.strip():
            logger.warning(
                "question %s skipped: no original prediction to pair", item.question.id
            )
            continue
        if label is TriageLabel.UNSURE:
            chosen, rejected = item.question.main_passage, REJECTED_PLACEHOLDER
        else:
            chosen, rejected = item.ground_truth, item.question.main_passage
        records.append(
            PreferenceRecord(
                question=item.question.text,
                chosen=chosen,
                rejected=rejected,
                label=label,
                question_id=item.question.id,
            )
        )
    records.sort(key=lambda r: r.question_id)
    return records


def preference_to_dict(record: PreferenceRecord) -> dict:
    return {
        "question": record.question,
        "chosen": record.chosen,
        "rejected": record.rejected,
        "label": record.label.value,
        "question_id": record.question_id,
    }


def preference_from_dict(data: dict) -> PreferenceRecord:
    return PreferenceRecord(
        question=data["question"],
        chosen=data["chosen"],
        rejected=data["rejected"],
        label=TriageLabel(data["label"]),
        question_id=data["question_id"],
    )


def write_preference_dataset(records: Sequence[PreferenceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(preference_to_dict(record), ensure_ascii=False))
            handle.write("\n")


def read_preference_dataset(path: str | Path) -> list[PreferenceRecord]:
    return [preference_from_dict(row) for row in iter_jsonl(path)]


# --- Trainer bridge ----------------------------------------------------------------

class TrainerBridge(Protocol):
    def run(self, spec: TrainerJobSpec) -> str:
        """Execute the job, returning the registered adapter id."""
        ...


def dataset_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class MockTrainer:
    """Desk-scale trainer: injects chosen answers into the mock model's
    knowledge base, so trained questions stop hallucinating on re-scoring.

    With no backend attached it degrades to a no-op bridge that only
    returns an adapter id.
    """

    backend: MockModelBackend | None = None
    kb_path: str | Path | None = None

    def run(self, spec: TrainerJobSpec) -> str:
        records = read_preference_dataset(spec.dataset_path)
        if self.backend is not None:
            for record in records:
                self.backend.kb.inject(record.question, record.chosen)
            if self.kb_path is not None:
                self.backend.kb.save(self.kb_path)
            logger.info("mock trainer injected %d answers", len(records))
        return spec.output_adapter_id or "adapter-" + dataset_hash(spec.dataset_path)[:12]


@dataclass
class CommandTrainer:
    """Invoke the trainer as a subprocess; {spec} and {dataset} in the
    command expand to the job-spec JSON path and the dataset path."""

    command: tuple[str, ...]
    timeout_s: float = 3600.0

    def run(self, spec: TrainerJobSpec) -> str:
        with tempfile.NamedTemporaryFile(
            "w", suffix=".json", delete=False, encoding="utf-8"
        ) as handle:
            json.dump(spec.to_dict(), handle)
            spec_path = handle.name
        argv = [
            part.replace("{spec}", spec_path).replace("{dataset}", spec.dataset_path)
            for part in self.command
        ]
        result = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s)
        if result.returncode != 0:
            raise TrainerError(
                f"trainer exited {result.returncode}",
                trainer_output=result.stdout + result.stderr,
            )
        lines = [line for line in result.stdout.splitlines() if line.strip()]
        return lines[-1].strip() if lines else spec.output_adapter_id


@dataclass
class HttpTrainer:
    """POST the job spec to a training job API."""

    url: str
    timeout_s: float = 3600.0

    def run(self, spec: TrainerJobSpec) -> str:
        try:
            data = _post_json(self.url, spec.to_dict(), {"Content-Type": "application/json"}, self.timeout_s)
        except (TransportError, MalformedResponseError) as exc:
            raise TrainerError(f"trainer job submission failed: {exc}") from exc
        adapter_id = data.get("adapter_id")
        if not adapter_id:
            raise TrainerError(f"trainer response lacked adapter_id: {data}")
        return str(adapter_id)


def submit_training(
    spec: TrainerJobSpec,
    trainer: TrainerBridge,
    *,
    ledger_path: str | Path | None = None,
    run_id: str = "",
    clock: Clock = utc_now,
) -> str:
    """Validate the dataset, run the trainer, and append a ledger row."""
    path = Path(spec.dataset_path)
    if not path.is_file():
        raise TrainerError(f"dataset file not found: {path}")
    records = read_preference_dataset(path)  # validates every line
    digest = dataset_hash(path)
    submitted_at = clock().isoformat()
    adapter_id = trainer.run(spec)
    if ledger_path is not None:
        spec_payload = spec.to_dict()
        try:
            # Keep ledgers relocatable: name the dataset relative to the
            # run directory the ledger lives in.
            spec_payload["dataset_path"] = str(
                path.resolve().relative_to(Path(ledger_path).resolve().parent)
            )
        except ValueError:
            pass
        row = {
            "run_id": run_id,
            "dataset_hash": digest,
            "dataset_rows": len(records),
            "spec": spec_payload,
            "adapter_id": adapter_id,
            "submitted_at": submitted_at,
            "completed_at": clock().isoformat(),
        }
        with open(ledger_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            handle.write("\n")
    return adapter_id

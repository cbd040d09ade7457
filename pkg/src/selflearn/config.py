"""Run configuration: strict schema validation and backend construction.

Config files are YAML or JSON. Unknown keys are rejected before any
network call; secrets never live in the file (API keys come from
environment variables named in it). Relative paths resolve against the
config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .core import LoopConfig, QuestionMethod
from .dataset import (
    CommandTrainer,
    HeuristicJudgeBackend,
    HttpTrainer,
    MockTrainer,
    ScriptedJudgeBackend,
    TrainerBridge,
)
from .errors import ConfigError
from .gateway import (
    BaselineDummyBackend,
    GenerationBackend,
    MockEmbedder,
    MockKnowledgeBase,
    MockModelBackend,
    OpenAiChatBackend,
    OpenAiEmbeddingBackend,
)
from .hallucination import (
    ConsistencyBackend,
    EmbeddingConsistencyBackend,
    NliConsistencyBackend,
)
from .knowledge import (
    FactMapSource,
    KnowledgeSource,
    PeerAnswerSource,
    StrongerLlmSource,
    WikiSearchSource,
)

_METHODS = {
    "external_prompt": QuestionMethod.EXTERNAL_PROMPT,
    "open_generation": QuestionMethod.OPEN_GENERATION,
    "induced_generation": QuestionMethod.INDUCED_GENERATION,
    "oracle_selected": QuestionMethod.ORACLE_SELECTED,
}

_TOP_KEYS = {
    "seed", "output_dir", "run_name", "fixed_clock", "method",
    "loop", "questioning", "metrics", "endpoints", "data", "eval",
}
_LOOP_KEYS = {"n_iterations", "n_samples", "sample_temperature", "limit"}
_QUESTIONING_KEYS = {"n_proposed_topics", "question_max_tokens", "answer_max_tokens"}
_METRIC_KEYS = {"min_cluster_size", "k_neighbors", "margin"}
_ENDPOINT_KEYS = {"generation", "embedding", "nli", "judge", "trainer", "trends", "knowledge"}
_DATA_KEYS = {"topic_corpus", "wiki", "alpaca"}
_EVAL_KEYS = {"sample_size"}

_KNOWLEDGE_COMMON = {"max_workers", "char_limit", "rate_limit_s"}
_KIND_KEYS = {
    ("generation", "openai"): {"kind", "base_url", "model", "api_key_env", "timeout_s"},
    ("generation", "mock"): {"kind", "kb", "seed", "vocab_size"},
    ("generation", "dummy"): {"kind"},
    ("embedding", "openai"): {"kind", "base_url", "model", "api_key_env", "timeout_s"},
    ("embedding", "mock"): {"kind", "dimension", "seed"},
    ("judge", "openai"): {"kind", "base_url", "model", "api_key_env", "timeout_s"},
    ("judge", "heuristic"): {"kind", "threshold"},
    ("judge", "scripted"): {"kind", "verdicts", "default"},
    ("trainer", "mock"): {"kind"},
    ("trainer", "command"): {"kind", "command"},
    ("trainer", "http"): {"kind", "url"},
    ("trainer", "none"): {"kind"},
    ("knowledge", "fact_map"): {"kind", "facts"} | _KNOWLEDGE_COMMON,
    ("knowledge", "stronger_llm"): {"kind", "base_url", "model", "api_key_env", "timeout_s"}
    | _KNOWLEDGE_COMMON,
    ("knowledge", "wiki"): {"kind", "base_url", "timeout_s"} | _KNOWLEDGE_COMMON,
    ("knowledge", "peer"): {"kind", "kb", "seed", "limit"} | _KNOWLEDGE_COMMON,
}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"`{key}` must be a mapping, got {type(value).__name__}")
    return value


def _check_kind(section: dict, group: str) -> str:
    kind = section.get("kind")
    known = sorted(k for g, k in _KIND_KEYS if g == group)
    if kind not in known:
        raise ConfigError(f"endpoints.{group}.kind must be one of {known}, got {kind!r}")
    _check_keys(section, _KIND_KEYS[(group, kind)], f"endpoints.{group}")
    return kind


@dataclass
class MetricParams:
    min_cluster_size: int = 5
    k_neighbors: int = 5
    margin: float = 0.0


@dataclass
class QuestioningParams:
    n_proposed_topics: int = 3
    question_max_tokens: int = 128
    answer_max_tokens: int = 256


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    seed: int
    output_dir: Path
    run_name: str | None
    fixed_clock: str | None
    method: QuestionMethod | None
    loop: LoopConfig
    questioning: QuestioningParams
    metrics: MetricParams
    eval_sample_size: int

    # -- loading -----------------------------------------------------------

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            if path.suffix == ".json":
                raw = json.loads(text)
            else:
                raw = yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, *, base_dir: str | Path = ".") -> "RunConfig":
        _check_keys(raw, _TOP_KEYS, "config root")
        loop_raw = _section(raw, "loop")
        _check_keys(loop_raw, _LOOP_KEYS, "loop")
        _check_keys(_section(raw, "questioning"), _QUESTIONING_KEYS, "questioning")
        metrics_raw = _section(raw, "metrics")
        _check_keys(metrics_raw, _METRIC_KEYS, "metrics")
        endpoints = _section(raw, "endpoints")
        _check_keys(endpoints, _ENDPOINT_KEYS, "endpoints")
        _check_keys(_section(raw, "data"), _DATA_KEYS, "data")
        _check_keys(_section(raw, "eval"), _EVAL_KEYS, "eval")
        for group in ("generation", "embedding", "judge", "trainer", "knowledge"):
            section = _section(endpoints, group)
            if section:
                _check_kind(section, group)
        if endpoints.get("nli") is not None:
            _check_keys(_section(endpoints, "nli"), {"url", "timeout_s"}, "endpoints.nli")
        if endpoints.get("trends") is not None:
            _check_keys(
                _section(endpoints, "trends"), {"url", "params", "cache"}, "endpoints.trends"
            )

        method_name = raw.get("method")
        if method_name is not None and method_name not in _METHODS:
            raise ConfigError(
                f"method must be one of {sorted(_METHODS)}, got {method_name!r}"
            )
        seed = int(raw.get("seed", 0))
        try:
            loop = LoopConfig(
                n_iterations=int(loop_raw.get("n_iterations", 1)),
                n_samples=int(loop_raw.get("n_samples", 10)),
                sample_temperature=float(loop_raw.get("sample_temperature", 1.0)),
                limit=float(loop_raw.get("limit", 0.5)),
                seed=seed,
            )
        except ValueError as exc:
            raise ConfigError(f"invalid loop settings: {exc}") from exc
        metrics = MetricParams(
            min_cluster_size=int(metrics_raw.get("min_cluster_size", 5)),
            k_neighbors=int(metrics_raw.get("k_neighbors", 5)),
            margin=float(metrics_raw.get("margin", 0.0)),
        )
        if metrics.min_cluster_size < 2:
            raise ConfigError("metrics.min_cluster_size must be >= 2")
        questioning_raw = raw.get("questioning", {})
        questioning = QuestioningParams(
            n_proposed_topics=int(questioning_raw.get("n_proposed_topics", 3)),
            question_max_tokens=int(questioning_raw.get("question_max_tokens", 128)),
            answer_max_tokens=int(questioning_raw.get("answer_max_tokens", 256)),
        )
        base_dir = Path(base_dir)
        return cls(
            raw=raw,
            base_dir=base_dir,
            seed=seed,
            output_dir=_resolve(base_dir, raw.get("output_dir", "runs")),
            run_name=raw.get("run_name"),
            fixed_clock=raw.get("fixed_clock"),
            method=_METHODS.get(method_name) if method_name else None,
            loop=loop,
            questioning=questioning,
            metrics=metrics,
            eval_sample_size=int(raw.get("eval", {}).get("sample_size", 1000)),
        )

    # -- accessors -----------------------------------------------------------

    def endpoint(self, group: str) -> dict | None:
        return self.raw.get("endpoints", {}).get(group)

    def knowledge_fetch_params(self) -> tuple[int, int, float]:
        """(max_workers, char_limit, rate_limit_s) for knowledge searching."""
        section = self.endpoint("knowledge") or {}
        return (
            int(section.get("max_workers", 4)),
            int(section.get("char_limit", 2000)),
            float(section.get("rate_limit_s", 0.0)),
        )

    def data_path(self, key: str) -> Path | None:
        value = self.raw.get("data", {}).get(key)
        if value is None:
            return None
        return _resolve(self.base_dir, value)

    def snapshot_json(self) -> str:
        return json.dumps(self.raw, ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    # -- builders -----------------------------------------------------------

    def build_generation(self) -> tuple[GenerationBackend, MockModelBackend | None]:
        """Returns the backend plus the mock instance when one backs it,
        so the mock trainer can reach the live knowledge base."""
        section = self.endpoint("generation")
        if not section:
            raise ConfigError("endpoints.generation is required")
        kind = section["kind"]
        if kind == "dummy":
            return BaselineDummyBackend(), None
        if kind == "mock":
            kb_path = section.get("kb")
            if kb_path:
                kb = MockKnowledgeBase.from_file(
                    _resolve(self.base_dir, kb_path), seed=int(section.get("seed", 0))
                )
            else:
                kb = MockKnowledgeBase(seed=int(section.get("seed", 0)))
            mock = MockModelBackend(kb=kb, vocab_size=int(section.get("vocab_size", 128)))
            return mock, mock
        backend = OpenAiChatBackend(
            base_url=section["base_url"],
            model=section["model"],
            api_key_env=section.get("api_key_env", "SELFLEARN_API_KEY"),
            timeout_s=float(section.get("timeout_s", 120.0)),
        )
        return backend, None

    def mock_kb_path(self) -> Path | None:
        section = self.endpoint("generation") or {}
        if section.get("kind") == "mock" and section.get("kb"):
            return _resolve(self.base_dir, section["kb"])
        return None

    def build_embedder(self):
        section = self.endpoint("embedding") or {"kind": "mock"}
        if section["kind"] == "mock":
            return MockEmbedder(
                dimension=int(section.get("dimension", 256)),
                seed=int(section.get("seed", 0)),
            )
        return OpenAiEmbeddingBackend(
            base_url=section["base_url"],
            model=section["model"],
            api_key_env=section.get("api_key_env", "SELFLEARN_API_KEY"),
            timeout_s=float(section.get("timeout_s", 120.0)),
        )

    def build_scorer(self, embedder) -> ConsistencyBackend:
        section = self.endpoint("nli")
        if section and section.get("url"):
            return NliConsistencyBackend(
                url=section["url"], timeout_s=float(section.get("timeout_s", 60.0))
            )
        return EmbeddingConsistencyBackend(embedder)

    def build_judge(self) -> GenerationBackend | None:
        section = self.endpoint("judge")
        if not section:
            return None
        kind = section["kind"]
        if kind == "heuristic":
            return HeuristicJudgeBackend(threshold=float(section.get("threshold", 0.6)))
        if kind == "scripted":
            return ScriptedJudgeBackend.from_file(
                _resolve(self.base_dir, section["verdicts"]),
                default=section.get("default", "different"),
            )
        return OpenAiChatBackend(
            base_url=section["base_url"],
            model=section["model"],
            api_key_env=section.get("api_key_env", "SELFLEARN_API_KEY"),
            timeout_s=float(section.get("timeout_s", 120.0)),
        )

    def build_trainer(self, mock_backend: MockModelBackend | None) -> TrainerBridge | None:
        section = self.endpoint("trainer")
        if not section or section["kind"] == "none":
            return None
        kind = section["kind"]
        if kind == "mock":
            return MockTrainer(backend=mock_backend, kb_path=self.mock_kb_path())
        if kind == "command":
            command = section.get("command")
            if not isinstance(command, list) or not command:
                raise ConfigError("endpoints.trainer.command must be a non-empty list")
            return CommandTrainer(command=tuple(str(c) for c in command))
        return HttpTrainer(url=section["url"])

    def build_knowledge_source(self, embedder=None) -> KnowledgeSource:
        section = self.endpoint("knowledge")
        if not section:
            raise ConfigError("endpoints.knowledge is required for knowledge searching")
        kind = section["kind"]
        if kind == "fact_map":
            return FactMapSource.from_file(_resolve(self.base_dir, section["facts"]))
        if kind == "wiki":
            return WikiSearchSource(
                base_url=section["base_url"], timeout_s=float(section.get("timeout_s", 60.0))
            )
        if kind == "peer":
            kb = MockKnowledgeBase.from_file(
                _resolve(self.base_dir, section["kb"]), seed=int(section.get("seed", 0))
            )
            peer = MockModelBackend(kb=kb)
            scorer = EmbeddingConsistencyBackend(embedder or self.build_embedder())
            return PeerAnswerSource(
                peer_backend=peer,
                peer_scorer=scorer,
                limit=float(section.get("limit", self.loop.limit)),
                n_samples=self.loop.n_samples,
            )
        backend = OpenAiChatBackend(
            base_url=section["base_url"],
            model=section["model"],
            api_key_env=section.get("api_key_env", "SELFLEARN_API_KEY"),
            timeout_s=float(section.get("timeout_s", 120.0)),
        )
        return StrongerLlmSource(backend=backend)


def _resolve(base_dir: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (base_dir / path)

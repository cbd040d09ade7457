"""Command-line entry point for the self-learning loop.

Commands mirror the pipeline stages (self-question, metrics, search,
build-dataset, train, route, evaluate) plus `loop`, which runs one full
cycle into a self-describing run directory. Exit codes: 0 success, 1
runtime failure (completed artifacts preserved), 2 configuration error.
"""

from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click

from . import __version__
from .config import RunConfig
from .core import (
    QuestionMethod,
    QuestionRecord,
    iter_jsonl,
    partition,
    read_records,
    write_partition,
    write_records,
)
from .dataset import (
    TrainerJobSpec,
    build_preference_dataset,
    dataset_hash,
    triage_batch,
    write_preference_dataset,
)
from .errors import ConfigError, SelfLearnError
from .evaluation import (
    EvalSettings,
    evaluate_suite,
    format_eval_table,
    report_to_json,
)
from .knowledge import (
    AnsweredQuestion,
    AnswerOrigin,
    apply_review_file,
    dedupe,
    export_review_file,
    fixed_clock,
    search_answers,
    utc_now,
    write_answers,
)
from .metrics import compute_report, format_table, write_report
from .questioning import (
    build_topic_space,
    fetch_trending_topics,
    load_topic_cache,
    load_topic_corpus,
    default_topic_corpus,
    run_external_prompt,
    run_induced_generation,
    run_open_generation,
    run_oracle_selected,
    save_topic_cache,
)
from .router import load_registry, route, save_registry, train_router

logger = logging.getLogger(__name__)


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(func):
    """Map ConfigError to exit 2 and other pipeline errors to exit 1."""

    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as exc:
            _fail(str(exc), 2)
        except SelfLearnError as exc:
            _fail(str(exc), 1)

    wrapper.__name__ = func.__name__
    wrapper.__doc__ = func.__doc__
    return wrapper


def _prepare_run_dir(cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        run_dir = Path(explicit)
    else:
        name = cfg.run_name or datetime.now(timezone.utc).strftime("run-%Y%m%dT%H%M%SZ")
        run_dir = cfg.output_dir / name
        bump = 1
        while run_dir.exists():  # never touch an earlier run's directory
            bump += 1
            run_dir = cfg.output_dir / f"{name}-{bump}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config_snapshot.json").write_text(cfg.snapshot_json(), encoding="utf-8")
    return run_dir


def _clock(cfg: RunConfig):
    return fixed_clock(cfg.fixed_clock) if cfg.fixed_clock else utc_now


def _load_external_topics(cfg: RunConfig, run_dir: Path):
    trends = cfg.endpoint("trends") or {}
    cache = trends.get("cache")
    if cache:
        cache_path = cfg.base_dir / cache if not Path(cache).is_absolute() else Path(cache)
        if cache_path.is_file():
            return load_topic_cache(cache_path)
    url = trends.get("url")
    if not url:
        raise ConfigError("external_prompt needs endpoints.trends with a cache file or url")
    topics = fetch_trending_topics(url, trends.get("params"))
    save_topic_cache(topics, run_dir / "topics_cache.json")
    return topics


def _run_method(cfg: RunConfig, run_dir: Path, backend, scorer, embedder) -> list[QuestionRecord]:
    if cfg.method is None:
        raise ConfigError("config must set `method` for self-questioning")
    logger.info("threshold rule: Unknown at score >= %.3f", cfg.loop.limit)
    budgets = {
        "question_max_tokens": cfg.questioning.question_max_tokens,
        "answer_max_tokens": cfg.questioning.answer_max_tokens,
    }
    if cfg.method is QuestionMethod.EXTERNAL_PROMPT:
        topics = _load_external_topics(cfg, run_dir)
        return run_external_prompt(topics, cfg.loop, backend, scorer, **budgets)
    if cfg.method is QuestionMethod.OPEN_GENERATION:
        return run_open_generation(
            cfg.loop, backend, scorer,
            n_proposed_topics=cfg.questioning.n_proposed_topics, **budgets,
        )
    if cfg.method is QuestionMethod.INDUCED_GENERATION:
        return run_induced_generation(
            cfg.loop, backend, scorer,
            n_proposed_topics=cfg.questioning.n_proposed_topics, **budgets,
        )
    corpus_path = cfg.data_path("topic_corpus")
    candidates = load_topic_corpus(corpus_path) if corpus_path else default_topic_corpus()
    if len(candidates) < cfg.metrics.k_neighbors + 1:
        raise ConfigError(
            f"oracle_selected needs at least k+1={cfg.metrics.k_neighbors + 1} candidate topics"
        )
    space = build_topic_space(candidates, embedder)
    return run_oracle_selected(
        space, cfg.metrics.k_neighbors, cfg.loop, backend, scorer, **budgets
    )


def _self_question_stage(cfg: RunConfig, run_dir: Path, backend, scorer, embedder):
    records = _run_method(cfg, run_dir, backend, scorer, embedder)
    write_records(records, run_dir / "questions.jsonl")
    part = partition(records)
    write_partition(part, run_dir)
    return records, part


def _method_label(records) -> str:
    methods = {r.method.value for r in records}
    return methods.pop() if len(methods) == 1 else "mixed"


def _join_answers(questions_path: Path, answers_path: Path) -> list[AnsweredQuestion]:
    by_id = {r.id: r for r in read_records(questions_path)}
    answered = []
    for row in iter_jsonl(answers_path):
        record = by_id.get(row["question_id"])
        if record is None:
            raise ConfigError(
                f"answer references unknown question id {row['question_id']!r}; "
                "pass the matching questions file"
            )
        answered.append(
            AnsweredQuestion(
                question=record,
                ground_truth=row["ground_truth"],
                source=AnswerOrigin(row["source"]),
                fetched_at=row["fetched_at"],
            )
        )
    return answered


def _eval_rows(cfg: RunConfig):
    def parsed(key: str, bundled_name: str) -> list[dict]:
        value = (cfg.raw.get("data") or {}).get(key)
        if value is None:
            return []
        if value == "bundled":
            from importlib.resources import files

            text = files("selflearn.data").joinpath(bundled_name).read_text(encoding="utf-8")
            return [json.loads(line) for line in text.splitlines() if line.strip()]
        return list(iter_jsonl(cfg.data_path(key)))

    wiki = [row["text"] for row in parsed("wiki", "wiki_fixture.jsonl")]
    alpaca = parsed("alpaca", "alpaca_fixture.jsonl")
    return wiki, alpaca


def _eval_settings(cfg: RunConfig) -> EvalSettings:
    return EvalSettings(
        n_samples=cfg.loop.n_samples,
        sample_temperature=cfg.loop.sample_temperature,
        sample_size=cfg.eval_sample_size,
        seed=cfg.seed,
    )


@click.group()
@click.version_option(version=__version__, prog_name="selflearn")
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Self-learning loop: find knowledge gaps, answer them, train, evaluate."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("self-question")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--run-dir", default=None, type=click.Path())
@_guarded
def cmd_self_question(config_path: str, run_dir: str | None) -> None:
    """Generate and score questions, writing the log and its partition."""
    cfg = RunConfig.load(config_path)
    directory = _prepare_run_dir(cfg, run_dir)
    backend, _mock = cfg.build_generation()
    embedder = cfg.build_embedder()
    scorer = cfg.build_scorer(embedder)
    records, part = _self_question_stage(cfg, directory, backend, scorer, embedder)
    meta = {
        "stage": "self-question",
        "method": cfg.method.value if cfg.method else None,
        "seed": cfg.seed,
        "scorer": scorer.name,
        "threshold_rule": f"Unknown at score >= {cfg.loop.limit}",
        "counts": {"questions": len(records), "q_h": len(part.q_h), "q_nh": len(part.q_nh)},
    }
    (directory / "run_meta.json").write_text(
        json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    click.echo(f"{len(records)} questions ({len(part.q_h)} hallucinated) -> {directory}")


@main.command("metrics")
@click.argument("questions", type=click.Path())
@click.option("-c", "--config", "config_path", default=None, type=click.Path())
@click.option("-o", "--out-dir", default=None, type=click.Path())
@click.option("--model", "model_label", default="-", help="Model label for the report table.")
@click.option("--min-cluster-size", default=None, type=int)
@_guarded
def cmd_metrics(
    questions: str,
    config_path: str | None,
    out_dir: str | None,
    model_label: str,
    min_cluster_size: int | None,
) -> None:
    """Compute the capability scorecard from a question log."""
    records = read_records(questions)
    if not records:
        raise ConfigError(f"question log {questions} is empty")
    if config_path:
        cfg = RunConfig.load(config_path)
        embedder = cfg.build_embedder()
        mcs = min_cluster_size or cfg.metrics.min_cluster_size
        seed = cfg.seed
        scorer_variant = cfg.build_scorer(embedder).name
    else:
        from .gateway import MockEmbedder

        embedder = MockEmbedder()
        mcs = min_cluster_size or 5
        seed = 0
        scorer_variant = "embedding-cosine"
    part = partition(records)
    report = compute_report(
        records,
        part,
        embedder,
        min_cluster_size=mcs,
        metadata={
            "model": model_label,
            "method": _method_label(records),
            "seed": seed,
            "scorer": scorer_variant,
        },
    )
    directory = Path(out_dir) if out_dir else Path(questions).parent
    write_report(report, directory)
    click.echo(format_table([report]), nl=False)


@main.command("search")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--questions", "questions_path", required=True, type=click.Path())
@click.option("--review", "review_path", default=None, type=click.Path())
@click.option("--run-dir", default=None, type=click.Path())
@_guarded
def cmd_search(
    config_path: str, questions_path: str, review_path: str | None, run_dir: str | None
) -> None:
    """Deduplicate hallucinated questions and fetch ground-truth answers."""
    cfg = RunConfig.load(config_path)
    directory = _prepare_run_dir(cfg, run_dir)
    clock = _clock(cfg)
    embedder = cfg.build_embedder()
    source = cfg.build_knowledge_source(embedder)
    records = read_records(questions_path)
    deduped = dedupe(records)
    max_workers, char_limit, rate_limit_s = cfg.knowledge_fetch_params()
    answered, unanswered = search_answers(
        deduped, source, max_workers=max_workers, char_limit=char_limit,
        rate_limit_s=rate_limit_s, clock=clock,
    )
    if review_path:
        answered = apply_review_file(answered, review_path, clock=clock)
    write_answers(answered, directory / "answers.jsonl")
    export_review_file(answered, directory / "review.jsonl")
    (directory / "unanswered.json").write_text(
        json.dumps(unanswered, indent=2) + "\n", encoding="utf-8"
    )
    click.echo(
        f"{len(deduped)} unique questions ({len(records) - len(deduped)} duplicates dropped); "
        f"{len(answered)} answered, {len(unanswered)} unanswered -> {directory}"
    )


@main.command("build-dataset")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--questions", "questions_path", required=True, type=click.Path())
@click.option("--answers", "answers_path", required=True, type=click.Path())
@click.option("--run-dir", default=None, type=click.Path())
@_guarded
def cmd_build_dataset(
    config_path: str, questions_path: str, answers_path: str, run_dir: str | None
) -> None:
    """Triage answered questions and emit the preference dataset."""
    cfg = RunConfig.load(config_path)
    directory = _prepare_run_dir(cfg, run_dir)
    judge = cfg.build_judge()
    if judge is None:
        raise ConfigError("endpoints.judge is required for triage")
    answered = _join_answers(Path(questions_path), Path(answers_path))
    labels = triage_batch(answered, judge)
    records = build_preference_dataset(answered, labels)
    write_preference_dataset(records, directory / "d_train.jsonl")
    with open(directory / "triage.jsonl", "w", encoding="utf-8") as handle:
        for item, label in zip(answered, labels):
            handle.write(
                json.dumps(
                    {
                        "question_id": item.question.id,
                        "question": item.question.text,
                        "label": label.value,
                    },
                    ensure_ascii=False,
                )
            )
            handle.write("\n")
    unsure = sum(1 for r in records if r.rejected == "-")
    click.echo(
        f"{len(records)} preference rows ({unsure} unsure, {len(records) - unsure} did-not-know) "
        f"-> {directory / 'd_train.jsonl'}"
    )


@main.command("train")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--adapter-id", default=None)
@click.option("--run-dir", default=None, type=click.Path())
@_guarded
def cmd_train(
    config_path: str, dataset_path: str, adapter_id: str | None, run_dir: str | None
) -> None:
    """Submit the preference dataset to the configured trainer."""
    cfg = RunConfig.load(config_path)
    directory = _prepare_run_dir(cfg, run_dir)
    backend, mock = cfg.build_generation()
    trainer = cfg.build_trainer(mock)
    if trainer is None:
        raise ConfigError("endpoints.trainer is disabled; nothing to train")
    if not Path(dataset_path).is_file():
        raise ConfigError(f"dataset file not found: {dataset_path}")
    spec = TrainerJobSpec(
        dataset_path=str(dataset_path),
        output_adapter_id=adapter_id or "adapter-" + dataset_hash(dataset_path)[:12],
    )
    from .dataset import submit_training

    result = submit_training(
        spec,
        trainer,
        ledger_path=directory / "ledger.jsonl",
        run_id=cfg.run_name or directory.name,
        clock=_clock(cfg),
    )
    click.echo(result)


@main.command("route")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--prompt", required=True)
@click.option("--registry", "registry_path", default=None, type=click.Path())
@_guarded
def cmd_route(config_path: str, prompt: str, registry_path: str | None) -> None:
    """Print the adapter id the router picks for a prompt (or `base`)."""
    cfg = RunConfig.load(config_path)
    embedder = cfg.build_embedder()
    if registry_path:
        if not Path(registry_path).is_file():
            raise ConfigError(f"router registry not found: {registry_path}")
        routers = load_registry(registry_path)
    else:
        routers = []
    click.echo(route(prompt, routers, embedder))


@main.command("evaluate")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--label", default="Baseline")
@click.option("--questions", "questions_path", default=None, type=click.Path())
@click.option("--answers", "answers_path", default=None, type=click.Path())
@click.option("--run-dir", default=None, type=click.Path())
@_guarded
def cmd_evaluate(
    config_path: str,
    label: str,
    questions_path: str | None,
    answers_path: str | None,
    run_dir: str | None,
) -> None:
    """Run the metric grid for one model condition."""
    cfg = RunConfig.load(config_path)
    directory = _prepare_run_dir(cfg, run_dir)
    backend, _mock = cfg.build_generation()
    embedder = cfg.build_embedder()
    scorer = cfg.build_scorer(embedder)
    judge = cfg.build_judge()
    q_h = read_records(questions_path) if questions_path else []
    truths = {}
    if answers_path:
        truths = {row["question_id"]: row["ground_truth"] for row in iter_jsonl(answers_path)}
    wiki_rows, alpaca_rows = _eval_rows(cfg)
    report = evaluate_suite(
        label,
        backend=backend,
        scorer=scorer,
        judge=judge,
        q_h=q_h,
        ground_truths=truths,
        wiki_rows=wiki_rows,
        alpaca_rows=alpaca_rows,
        settings=_eval_settings(cfg),
        config_snapshot=cfg.raw,
    )
    out_path = directory / f"eval_{label.lower().replace(' ', '_')}.json"
    out_path.write_text(report_to_json(report), encoding="utf-8")
    click.echo(format_eval_table([report]), nl=False)


@main.command("loop")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--run-dir", default=None, type=click.Path())
@_guarded
def cmd_loop(config_path: str, run_dir: str | None) -> None:
    """One full cycle: question, search, build, train, evaluate before/after."""
    cfg = RunConfig.load(config_path)
    directory = _prepare_run_dir(cfg, run_dir)
    clock = _clock(cfg)
    backend, mock = cfg.build_generation()
    embedder = cfg.build_embedder()
    scorer = cfg.build_scorer(embedder)
    judge = cfg.build_judge()
    settings = _eval_settings(cfg)
    meta: dict = {
        "stage": "loop",
        "method": cfg.method.value if cfg.method else None,
        "seed": cfg.seed,
        "scorer": scorer.name,
        "threshold_rule": f"Unknown at score >= {cfg.loop.limit}",
        "counts": {},
    }

    def save_meta(status: str) -> None:
        meta["status"] = status
        (directory / "run_meta.json").write_text(
            json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    # Stage 1: self-questioning.
    records, part = _self_question_stage(cfg, directory, backend, scorer, embedder)
    if not records:
        save_meta("failed")
        raise SelfLearnError("self-questioning produced no records; see the preserved log")
    meta["counts"].update(
        {"questions": len(records), "q_h": len(part.q_h), "q_nh": len(part.q_nh)}
    )
    report = compute_report(
        records,
        part,
        embedder,
        min_cluster_size=cfg.metrics.min_cluster_size,
        metadata={
            "model": (cfg.endpoint("generation") or {}).get("model", "mock"),
            "method": cfg.method.value if cfg.method else "-",
            "scorer": scorer.name,
            "seed": cfg.seed,
        },
    )
    write_report(report, directory)

    # Stage 2: knowledge searching.
    source = cfg.build_knowledge_source(embedder)
    deduped = dedupe(list(part.q_h))
    max_workers, char_limit, rate_limit_s = cfg.knowledge_fetch_params()
    answered, unanswered = search_answers(
        deduped, source, max_workers=max_workers, char_limit=char_limit,
        rate_limit_s=rate_limit_s, clock=clock,
    )
    write_answers(answered, directory / "answers.jsonl")
    export_review_file(answered, directory / "review.jsonl")
    (directory / "unanswered.json").write_text(
        json.dumps(unanswered, indent=2) + "\n", encoding="utf-8"
    )
    meta["counts"].update({"unique_q_h": len(deduped), "answered": len(answered)})

    # Stage 3: triage and dataset build.
    if judge is None:
        raise ConfigError("endpoints.judge is required for the loop")
    labels = triage_batch(answered, judge)
    preference = build_preference_dataset(answered, labels)
    dataset_path = directory / "d_train.jsonl"
    write_preference_dataset(preference, dataset_path)
    with open(directory / "triage.jsonl", "w", encoding="utf-8") as handle:
        for item, label in zip(answered, labels):
            handle.write(
                json.dumps(
                    {
                        "question_id": item.question.id,
                        "question": item.question.text,
                        "label": label.value,
                    },
                    ensure_ascii=False,
                )
            )
            handle.write("\n")
    meta["counts"]["d_train"] = len(preference)

    trainer = cfg.build_trainer(mock)
    if trainer is None:
        save_meta("dataset-only")
        click.echo(f"dataset-only: {len(preference)} rows -> {dataset_path}")
        return

    truths = {item.question.id: item.ground_truth for item in answered}
    wiki_rows, alpaca_rows = _eval_rows(cfg)

    # Stage 4: before-training evaluation.
    before = evaluate_suite(
        "Baseline",
        backend=backend,
        scorer=scorer,
        judge=judge,
        q_h=list(part.q_h),
        ground_truths=truths,
        wiki_rows=wiki_rows,
        alpaca_rows=alpaca_rows,
        settings=settings,
        config_snapshot=cfg.raw,
    )
    (directory / "eval_baseline.json").write_text(report_to_json(before), encoding="utf-8")

    # Stage 5: trainer bridge.
    from .dataset import submit_training

    spec = TrainerJobSpec(
        dataset_path=str(dataset_path),
        output_adapter_id="adapter-" + dataset_hash(dataset_path)[:12],
    )
    adapter_id = submit_training(
        spec,
        trainer,
        ledger_path=directory / "ledger.jsonl",
        run_id=cfg.run_name or directory.name,
        clock=clock,
    )
    meta["adapter_id"] = adapter_id

    if part.q_h and part.q_nh:
        router = train_router(list(part.q_h), list(part.q_nh), adapter_id, embedder,
                              margin=cfg.metrics.margin)
        save_registry([router], directory / "routers.json",
                      trained_on_run_id=cfg.run_name or directory.name)
    else:
        logger.info("router skipped: need at least one question on each side")

    # Stage 6: after-training evaluation.
    after = evaluate_suite(
        "AfterTraining",
        backend=backend,
        scorer=scorer,
        judge=judge,
        q_h=list(part.q_h),
        ground_truths=truths,
        wiki_rows=wiki_rows,
        alpaca_rows=alpaca_rows,
        settings=settings,
        config_snapshot=cfg.raw,
    )
    (directory / "eval_after_training.json").write_text(report_to_json(after), encoding="utf-8")
    (directory / "eval_table.txt").write_text(
        format_eval_table([before, after]), encoding="utf-8"
    )
    save_meta("complete")
    before_h = before.metrics.get("q_h", {}).get("hallucination")
    after_h = after.metrics.get("q_h", {}).get("hallucination")
    click.echo(
        f"cycle complete: adapter {adapter_id}; hallucination on learned questions "
        f"{before_h:.3f} -> {after_h:.3f}"
        if before_h is not None and after_h is not None
        else f"cycle complete: adapter {adapter_id}"
    )


if __name__ == "__main__":
    main()

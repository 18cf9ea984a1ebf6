"""Command-line entry point: ``abductor {run,batch,eval,audit,validate}``.

Settings resolve as flags > ``--config`` JSON file > ``ABDUCTOR_*`` environment > defaults.
Exit codes are listed in ``abductor.errors.EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from .backend import HttpProvider, MockProvider, ModelClient, ResponseCache, cost_summary
from .dataset import CaseSpec, dump_json, load_case, load_corpus
from .embeddings import Embedder, HashEmbedder, HttpEmbedder, SentenceTransformerEmbedder
from .errors import (
    EXIT_CODES,
    AbductorError,
    DatasetValidationError,
    InputValidationError,
    StructuralValidationError,
)
from .evaluation import (
    CaseScore,
    MatchConfig,
    QAScore,
    mean_std,
    normalized_cost,
    reliability_audit,
    score_case,
    score_qa_case,
)
from .prompts import PromptLibrary
from .qsr import RunResult, TerminationReason, run
from .state import Conclusion, RunConfig, Variant
from .traces import RunEnvelope, TraceWriter, iter_envelopes

logger = logging.getLogger("abductor")

DEFAULTS: dict[str, Any] = {
    "backend": "mock",
    "variant": "Full",
    "t_max": 3,
    "gate_x": 0,
    "gate_y": 0,
    "temperature": 0.0,
    "threshold": 0.5,
    "parallel": 1,
    "runs": 3,
    "beam_width": 1,
    "retry_budget": 3,
    "base_url": "https://api.openai.com/v1",
    "model": "gpt-4o-mini",
    "embedder": "hash",
    "embed_url": None,
    "embed_model": "text-embedding-3-small",
    "cache_dir": None,
    "no_cache": False,
    "prompts_dir": None,
    "fixtures": None,
    "out": "runs",
}
_INT_KEYS = {"t_max", "gate_x", "gate_y", "parallel", "runs", "beam_width", "retry_budget"}
_FLOAT_KEYS = {"temperature", "threshold"}
_BOOL_KEYS = {"no_cache"}


def resolve_settings(args: argparse.Namespace, environ: dict[str, str] | None = None) -> dict[str, Any]:
    environ = dict(os.environ if environ is None else environ)
    file_values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetValidationError(f"{args.config}: cannot read config: {exc}") from exc
        unknown = set(file_values) - set(DEFAULTS)
        if unknown:
            raise DatasetValidationError(f"{args.config}: unknown settings {sorted(unknown)}")
    settings: dict[str, Any] = {}
    for key, default in DEFAULTS.items():
        value = getattr(args, key, None)
        if value is None or (key in _BOOL_KEYS and value is False):
            if key in file_values:
                value = file_values[key]
            elif f"ABDUCTOR_{key.upper()}" in environ:
                raw = environ[f"ABDUCTOR_{key.upper()}"]
                try:
                    if key in _INT_KEYS:
                        value = int(raw)
                    elif key in _FLOAT_KEYS:
                        value = float(raw)
                    elif key in _BOOL_KEYS:
                        value = raw.lower() in {"1", "true", "yes"}
                    else:
                        value = raw
                except ValueError as exc:
                    raise InputValidationError(f"ABDUCTOR_{key.upper()}={raw!r}: {exc}") from exc
            else:
                value = default
        settings[key] = value
    return settings


def build_config(settings: dict[str, Any], variant: str | None = None) -> RunConfig:
    try:
        parsed = Variant.parse(variant or settings["variant"])
    except ValueError as exc:
        raise InputValidationError(str(exc)) from exc
    try:
        return RunConfig(
            t_max=settings["t_max"],
            gate_conflict_threshold=settings["gate_x"],
            gate_doubt_threshold=settings["gate_y"],
            variant=parsed,
            temperature=settings["temperature"],
            beam_width=settings["beam_width"],
            retry_budget=settings["retry_budget"],
        )
    except StructuralValidationError as exc:
        raise InputValidationError(f"invalid settings: {exc}") from exc


def build_client(settings: dict[str, Any], default_fixtures: Path | None = None) -> ModelClient:
    if settings["backend"] == "mock":
        fixtures = settings["fixtures"] or default_fixtures
        if fixtures is None or not Path(fixtures).exists():
            raise DatasetValidationError(f"mock backend needs fixtures; none found at {fixtures}")
        provider: Any = MockProvider.from_path(fixtures)
        cache_dir = settings["cache_dir"]
    elif settings["backend"] == "http":
        provider = HttpProvider(settings["base_url"], settings["model"])
        cache_dir = settings["cache_dir"] or Path(os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache") / "abductor"
    else:
        raise DatasetValidationError(f"unknown backend {settings['backend']!r}")
    cache = None if settings["no_cache"] else ResponseCache(cache_dir)
    return ModelClient(provider, cache, retry_budget=settings["retry_budget"])


def build_embedder(settings: dict[str, Any]) -> Embedder:
    kind = settings["embedder"]
    if kind == "hash":
        return HashEmbedder()
    if kind == "http":
        return HttpEmbedder(settings["embed_url"] or settings["base_url"], settings["embed_model"])
    if kind == "sbert":
        return SentenceTransformerEmbedder()
    raise DatasetValidationError(f"unknown embedder {kind!r}")


# ---------------------------------------------------------------------------
# Shared execution
# ---------------------------------------------------------------------------


@dataclass
class JobOutcome:
    run_id: str
    case: CaseSpec
    variant: str
    run_index: int
    result: RunResult | None
    error: BaseException | None


def execute(
    case: CaseSpec,
    config: RunConfig,
    client: ModelClient,
    out: Path,
    run_id: str,
    meta: dict[str, Any],
    prompts: PromptLibrary | None,
    max_workers: int = 1,
) -> RunResult:
    writer = TraceWriter(out, run_id, case.case_id, config, meta)
    try:
        result = run(case, config, client, prompts=prompts, sink=writer, max_workers=max_workers)
    except AbductorError as exc:
        writer.abort(exc)
        raise
    writer.finish(result)
    return result


def _fmt_pct(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}"


def _round_pct(value: float | None) -> float | None:
    return None if value is None else round(value, 1)


def _split_name(case: CaseSpec, corpus: str | None) -> str:
    base = corpus or "cases"
    return base if case.difficulty == "NA" else f"{base}-{case.difficulty}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _nearest_fixtures(case_path: Path) -> Path | None:
    """``fixtures/`` beside the case file, or beside the corpus root one level up."""
    for directory in (case_path.parent, case_path.parent.parent):
        if (directory / "fixtures").exists():
            return directory / "fixtures"
    return None


def cmd_run(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    case_path = Path(args.case)
    case = load_case(case_path)
    config = build_config(settings)
    client = build_client(settings, _nearest_fixtures(case_path))
    prompts = PromptLibrary(settings["prompts_dir"])
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    run_id = args.run_id or f"{case.case_id}.{config.variant.value}.{stamp}"
    meta = {"variant": config.variant.value, "run_index": 0, "split": _split_name(case, None)}
    result = execute(case, config, client, Path(settings["out"]), run_id, meta, prompts, settings["parallel"])
    cost = cost_summary(result.trace)
    print(f"run {run_id}")
    print(f"termination: {result.termination_reason.value}  rounds: {result.rounds_executed}")
    print(
        f"cost: {cost.total_tokens} tokens ({cost.prompt_tokens} prompt + {cost.completion_tokens} completion), "
        f"{cost.calls} calls, {cost.cache_hits} cache hits"
    )
    for dim, answer in result.conclusion.per_dimension.items():
        print(f"{dim}: {answer}")
    return 0


def _score(result: RunResult, case: CaseSpec, match: MatchConfig, embedder: Embedder) -> CaseScore | QAScore:
    if case.mode == "DP":
        return score_case(result, case, match, embedder)
    return score_qa_case(result, case)


def _metric_values(score: CaseScore | QAScore) -> dict[str, float]:
    if isinstance(score, CaseScore):
        return {
            "SA": 100.0 * score.suspect_correct,
            "R-M": 100.0 * score.motive_recall,
            "R-O": 100.0 * score.modus_recall,
            "CCR": 100.0 * score.clue_coverage,
        }
    return {"EM": 100.0 * score.exact_match, "SF": 100.0 * score.support_f1}


def summarize(rows: list[dict[str, Any]]) -> dict[str, Any]:
    """Per-variant mean +- sample std over runs of the per-run corpus means, plus normalized cost."""
    per_run: dict[str, dict[int, dict[str, list[float]]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    tokens: dict[str, dict[int, float]] = defaultdict(lambda: defaultdict(float))
    for row in rows:
        for metric, value in row["metrics"].items():
            per_run[row["variant"]][row["run_index"]][metric].append(value)
        tokens[row["variant"]][row["run_index"]] += row["cost_tokens"]

    summary: dict[str, Any] = {"variants": {}}
    for variant, runs in per_run.items():
        metrics: dict[str, list[float]] = defaultdict(list)
        for run_index in sorted(runs):
            for metric, values in runs[run_index].items():
                metrics[metric].append(sum(values) / len(values))
        summary["variants"][variant] = {
            metric: {"mean": round(m, 1), "std": round(s, 1), "runs": len(vals)}
            for metric, vals in metrics.items()
            for m, s in [mean_std(vals)]
        }
    if Variant.DIRECT.value in tokens:
        costs = {v: [t[k] for k in sorted(t)] for v, t in tokens.items()}
        summary["normalized_cost"] = {k: round(v, 1) for k, v in normalized_cost(costs, Variant.DIRECT.value).items()}
    return summary


def print_summary(summary: dict[str, Any]) -> None:
    for variant, metrics in summary["variants"].items():
        cells = [f"{name} {m['mean']:.1f}±{m['std']:.1f}" for name, m in metrics.items()]
        cost = summary.get("normalized_cost", {}).get(variant)
        if cost is not None:
            cells.append(f"T {cost:.1f}")
        print(f"{variant:<20} " + "  ".join(cells))


def cmd_batch(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    manifest, cases = load_corpus(args.corpus)
    root = manifest.root or Path(args.corpus)
    client = build_client(settings, root / "fixtures")
    prompts = PromptLibrary(settings["prompts_dir"])
    embedder = build_embedder(settings)
    match = MatchConfig(settings["threshold"])
    out = Path(settings["out"])
    variants = [build_config(settings, v).variant.value for v in str(settings["variant"]).split(",") if v.strip()]

    jobs = [
        (case, variant, k)
        for k in range(settings["runs"])
        for variant in variants
        for case in cases
    ]

    def job(spec: tuple[CaseSpec, str, int]) -> JobOutcome:
        case, variant, k = spec
        config = build_config(settings, variant)
        run_id = f"{case.case_id}.{variant}.run{k}"
        meta = {"variant": variant, "run_index": k, "corpus": manifest.name, "split": _split_name(case, manifest.name)}
        try:
            result = execute(case, config, client, out, run_id, meta, prompts)
            return JobOutcome(run_id, case, variant, k, result, None)
        except AbductorError as exc:
            logger.error("%s failed: %s", run_id, exc)
            return JobOutcome(run_id, case, variant, k, None, exc)

    workers = max(1, settings["parallel"])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, jobs))
    else:
        outcomes = [job(j) for j in jobs]

    rows = []
    for outcome in outcomes:
        if outcome.result is None:
            continue
        score = _score(outcome.result, outcome.case, match, embedder)
        rows.append(_score_row(outcome.run_id, outcome.case, outcome.variant, outcome.run_index, score))
    summary = summarize(rows)
    summary["failed_runs"] = [o.run_id for o in outcomes if o.error is not None]
    _write_reports(out, rows, summary)
    print(f"{len(outcomes)} runs, {len(summary['failed_runs'])} failed")
    print_summary(summary)
    return EXIT_CODES["batch_partial_failure"] if summary["failed_runs"] else 0


def _score_row(run_id: str, case: CaseSpec, variant: str, run_index: int, score: CaseScore | QAScore) -> dict[str, Any]:
    return {
        "run_id": run_id,
        "case_id": case.case_id,
        "variant": variant,
        "run_index": run_index,
        "difficulty": case.difficulty,
        "metrics": _metric_values(score),
        "cost_tokens": score.cost_tokens,
    }


def _write_reports(out: Path, rows: list[dict[str, Any]], summary: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "scores.jsonl").open("w", encoding="utf-8") as handle:
        handle.write(json.dumps({"type": "header", "schema_version": 1}) + "\n")
        for row in rows:
            handle.write(json.dumps({"type": "score", **row}, ensure_ascii=False) + "\n")
    (out / "summary.json").write_text(dump_json(summary), encoding="utf-8")


def cmd_eval(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    _, cases = load_corpus(args.corpus)
    by_id = {c.case_id: c for c in cases}
    embedder = build_embedder(settings)
    match = MatchConfig(settings["threshold"])
    rows = []
    for envelope in iter_envelopes(args.trace_dir):
        result = envelope.run_result()
        if result is None:
            continue
        case = by_id.get(envelope.case_id)
        if case is None:
            raise DatasetValidationError(f"no gold case {envelope.case_id!r} in {args.corpus}")
        score = _score(result, case, match, embedder)
        variant = envelope.meta.get("variant", envelope.config.get("variant", "Full"))
        rows.append(_score_row(envelope.run_id, case, variant, int(envelope.meta.get("run_index", 0)), score))
    summary = summarize(rows)
    _write_reports(Path(args.report_dir or args.trace_dir), rows, summary)
    print_summary(summary)
    return 0


AUDIT_COLUMNS = ("Dataset", "Unsupported", "Flagged", "Correction (within flagged)")


def audit_table(envelopes: Sequence[RunEnvelope]) -> list[dict[str, Any]]:
    groups: dict[str, list[RunResult]] = defaultdict(list)
    for envelope in envelopes:
        result = envelope.run_result()
        if result is None:
            # aborted runs still hold audited hypotheses in their partial trace
            result = RunResult(Conclusion({}), tuple(envelope.records), TerminationReason.MAX_DEPTH, 0)
        groups[envelope.meta.get("split", "all")].append(result)
    rows = []
    for split in sorted(groups):
        report = reliability_audit(groups[split])
        rows.append(
            {
                "Dataset": split,
                "Unsupported": _round_pct(report.unsupported_rate),
                "Flagged": _round_pct(report.flagged_rate),
                "Correction (within flagged)": _round_pct(report.correction_within_flagged_rate),
                "hypotheses": report.hypotheses,
            }
        )
    return rows


def cmd_audit(args: argparse.Namespace) -> int:
    envelopes = list(iter_envelopes(args.trace_dir))
    rows = audit_table(envelopes)
    widths = [max(len(c), 12) for c in AUDIT_COLUMNS]
    widths[0] = max([widths[0]] + [len(r["Dataset"]) for r in rows])
    print("  ".join(c.ljust(w) for c, w in zip(AUDIT_COLUMNS, widths)))
    for row in rows:
        cells = [row["Dataset"]] + [_fmt_pct(row[c]) for c in AUDIT_COLUMNS[1:]]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    if args.report:
        Path(args.report).write_text(dump_json(rows), encoding="utf-8")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    manifest, cases = load_corpus(args.corpus)
    counts = ", ".join(f"{k}={v}" for k, v in manifest.counts.items())
    print(f"{manifest.name}: {manifest.mode}, {len(cases)} cases ({counts})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--backend", choices=["mock", "http"])
    p.add_argument("--fixtures", help="mock fixture file or directory")
    p.add_argument("--variant", help="Full, NoIF, SelfAssessmentOnly, NoAwareness, Direct, CoT")
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--gate-x", dest="gate_x", type=int, help="conflict threshold")
    p.add_argument("--gate-y", dest="gate_y", type=int, help="doubt threshold")
    p.add_argument("--temperature", type=float)
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--retry-budget", dest="retry_budget", type=int)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--no-cache", dest="no_cache", action="store_true", default=None)
    p.add_argument("--prompts-dir", dest="prompts_dir")
    p.add_argument("--parallel", type=int)
    p.add_argument("--out", help="directory for run envelopes")


def _scoring_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, help="match threshold")
    p.add_argument("--embedder", choices=["hash", "http", "sbert"])
    p.add_argument("--embed-url", dest="embed_url")
    p.add_argument("--embed-model", dest="embed_model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abductor", description="Obstacle-driven narrative reasoning engine")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one case")
    p.add_argument("case")
    p.add_argument("--run-id", dest="run_id")
    _engine_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run a corpus several times and score it")
    p.add_argument("corpus")
    p.add_argument("--runs", type=int)
    _engine_flags(p)
    _scoring_flags(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("eval", help="score stored runs against a corpus")
    p.add_argument("trace_dir")
    p.add_argument("corpus")
    p.add_argument("--report-dir", dest="report_dir")
    p.add_argument("--config")
    _scoring_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="hypothesis reliability from stored runs")
    p.add_argument("trace_dir")
    p.add_argument("--report", help="write the table as JSON")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("validate", help="check a corpus without running inference")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AbductorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

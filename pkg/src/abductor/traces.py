"""Append-only run traces on disk.

Layout::

    <root>/<run_id>/trace.jsonl    header line, then one line per TraceRecord, then an abort line if the run failed
    <root>/<run_id>/result.json    RunResult summary, or an abort marker

Every line is a JSON object with a ``type`` of ``header``, ``record`` or ``abort``.
The header carries ``schema_version``. Timestamps and latency are excluded from
golden comparisons.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

from .dataset import dump_json
from .errors import IncomparableError, SequencingError, StorageError
from .qsr import RunResult, TerminationReason
from .state import Conclusion, RunConfig, TraceRecord

SCHEMA_VERSION = 1
TRACE_FILE = "trace.jsonl"
RESULT_FILE = "result.json"
# cache_hit only records cache warmth; payloads and token counts are identical either way
VOLATILE_FIELDS = frozenset({"started_at", "finished_at", "latency_ms", "cache_hit", "run_id", "run_index"})


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def config_hash(config: RunConfig | dict[str, Any]) -> str:
    data = config.to_dict() if isinstance(config, RunConfig) else config
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunEnvelope:
    run_id: str
    case_id: str
    config: dict[str, Any]
    started_at: str = ""
    finished_at: str | None = None
    records: list[TraceRecord] = field(default_factory=list)
    result: dict[str, Any] | None = None
    abort: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def aborted(self) -> bool:
        return self.abort is not None

    def run_result(self) -> RunResult | None:
        if self.result is None:
            return None
        return RunResult(
            conclusion=Conclusion.from_dict(self.result["conclusion"]),
            trace=tuple(self.records),
            termination_reason=TerminationReason(self.result["termination_reason"]),
            rounds_executed=int(self.result["rounds_executed"]),
        )

    def comparable_dict(self) -> dict[str, Any]:
        return _strip_volatile(
            {
                "case_id": self.case_id,
                "config": self.config,
                "records": [r.to_dict() for r in self.records],
                "result": self.result,
                "abort": self.abort,
            }
        )


def _strip_volatile(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _strip_volatile(v) for k, v in value.items() if k not in VOLATILE_FIELDS}
    if isinstance(value, list):
        return [_strip_volatile(v) for v in value]
    return value


class TraceWriter:
    """Single writer for one run directory. Each line is flushed and fsynced on write."""

    def __init__(
        self,
        root: str | Path,
        run_id: str,
        case_id: str,
        config: RunConfig,
        meta: dict[str, Any] | None = None,
    ):
        self.directory = Path(root) / run_id
        self.run_id = run_id
        self.case_id = case_id
        self.last_round: int | None = None
        try:
            self.directory.mkdir(parents=True, exist_ok=False)
        except FileExistsError as exc:
            raise StorageError(f"run directory {self.directory} already exists") from exc
        except OSError as exc:
            raise StorageError(f"cannot create {self.directory}: {exc}") from exc
        self._write(
            {
                "type": "header",
                "schema_version": SCHEMA_VERSION,
                "run_id": run_id,
                "case_id": case_id,
                "config": config.to_dict(),
                "config_hash": config_hash(config),
                "meta": dict(meta or {}),
                "started_at": _now(),
            }
        )

    @property
    def trace_path(self) -> Path:
        return self.directory / TRACE_FILE

    def _write(self, payload: dict[str, Any]) -> None:
        try:
            with self.trace_path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(payload, ensure_ascii=False) + "\n")
                handle.flush()
                os.fsync(handle.fileno())
        except OSError as exc:
            raise StorageError(f"cannot write {self.trace_path}: {exc}") from exc

    def append(self, record: TraceRecord) -> None:
        expected = 0 if self.last_round is None else self.last_round + 1
        if record.round != expected:
            raise SequencingError(f"record for round {record.round} out of order; expected round {expected}")
        self._write({"type": "record", **record.to_dict()})
        self.last_round = record.round

    def finish(self, result: RunResult) -> None:
        payload = {"type": "result", **result.to_dict(), "finished_at": _now()}
        self._write_result(payload)

    def abort(self, error: BaseException) -> None:
        marker = {"type": "abort", "error_class": type(error).__name__, "message": str(error), "finished_at": _now()}
        self._write(marker)
        self._write_result(marker)

    def _write_result(self, payload: dict[str, Any]) -> None:
        path = self.directory / RESULT_FILE
        try:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(dump_json(payload), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc


def read_envelope(directory: str | Path) -> RunEnvelope:
    """Rebuild an envelope from a run directory.

    A trace with no result and no abort line (the writer died) gets an
    ``incomplete`` abort marker.
    """
    directory = Path(directory)
    trace_path = directory / TRACE_FILE
    try:
        lines = trace_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read {trace_path}: {exc}") from exc

    envelope: RunEnvelope | None = None
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            if number == len(lines):
                # torn final line from a crash mid-write
                break
            raise StorageError(f"{trace_path}:{number}: corrupt line")
        kind = entry.get("type")
        if kind == "header":
            if entry.get("schema_version") != SCHEMA_VERSION:
                raise StorageError(f"{trace_path}: unsupported schema_version {entry.get('schema_version')!r}")
            envelope = RunEnvelope(
                run_id=entry["run_id"],
                case_id=entry["case_id"],
                config=entry["config"],
                started_at=entry.get("started_at", ""),
                meta=entry.get("meta", {}),
            )
        elif envelope is None:
            raise StorageError(f"{trace_path}: record before header")
        elif kind == "record":
            record = TraceRecord.from_dict(entry)
            expected = len(envelope.records)
            if record.round != expected:
                raise SequencingError(f"{trace_path}:{number}: round {record.round}, expected {expected}")
            envelope.records.append(record)
        elif kind == "abort":
            envelope.abort = {k: v for k, v in entry.items() if k != "type"}
    if envelope is None:
        raise StorageError(f"{trace_path}: no header")

    result_path = directory / RESULT_FILE
    if result_path.exists():
        payload = json.loads(result_path.read_text(encoding="utf-8"))
        envelope.finished_at = payload.get("finished_at")
        if payload.get("type") == "result":
            envelope.result = {k: payload[k] for k in ("conclusion", "termination_reason", "rounds_executed")}
        elif envelope.abort is None:
            envelope.abort = {k: v for k, v in payload.items() if k != "type"}
    if envelope.result is None and envelope.abort is None:
        envelope.abort = {"error_class": "incomplete", "message": "run ended without a result"}
    return envelope


def iter_envelopes(root: str | Path) -> Iterable[RunEnvelope]:
    root = Path(root)
    for trace in sorted(root.glob(f"**/{TRACE_FILE}")):
        yield read_envelope(trace.parent)


@dataclass(frozen=True)
class DiffEntry:
    path: str
    actual: Any
    golden: Any

    def __str__(self) -> str:
        return f"{self.path}: {self.golden!r} -> {self.actual!r}"


def _diff(actual: Any, golden: Any, path: str, out: list[DiffEntry]) -> None:
    if isinstance(actual, dict) and isinstance(golden, dict):
        for key in sorted(set(actual) | set(golden)):
            _diff(actual.get(key), golden.get(key), f"{path}.{key}" if path else key, out)
    elif isinstance(actual, list) and isinstance(golden, list):
        keyed = all(isinstance(x, dict) and "id" in x for x in actual + golden)
        if keyed:
            a = {x["id"]: x for x in actual}
            g = {x["id"]: x for x in golden}
            order = [x["id"] for x in golden] + [i for i in a if i not in g]
            for item_id in order:
                _diff(a.get(item_id), g.get(item_id), f"{path}[{item_id}]", out)
        else:
            for i in range(max(len(actual), len(golden))):
                _diff(
                    actual[i] if i < len(actual) else None,
                    golden[i] if i < len(golden) else None,
                    f"{path}[{i}]",
                    out,
                )
    elif actual != golden:
        out.append(DiffEntry(path, actual, golden))


def compare_golden(actual: RunEnvelope, golden: RunEnvelope) -> list[DiffEntry]:
    """Field-level differences, ignoring timestamps, latency and run identity. Empty means identical behaviour."""
    if actual.case_id != golden.case_id:
        raise IncomparableError(f"different cases: {actual.case_id} vs {golden.case_id}")
    if actual.config_hash != golden.config_hash:
        raise IncomparableError(f"different configs: {actual.config} vs {golden.config}")
    out: list[DiffEntry] = []
    _diff(actual.comparable_dict(), golden.comparable_dict(), "", out)
    return out

"""On-disk case format, corpus manifests, and the multi-hop QA adapter.

Case file (JSON, one per case)::

    {"schema_version": 1, "case_id": ..., "mode": "DP" | "QA", "difficulty": "Easy"|"Medium"|"Complex"|"NA",
     "task": {"dimensions": [...], "instruction": ...},
     "narrative": [{"id", "text", "ordinal"}, ...],
     "gold": {"suspect": {"name", "aliases": [...]}, "motive": [...], "modus": [...], "critical_clues": [...],
              "answers": [...], "support": [...]}}

DP cases need suspect, motive, modus and critical_clues; QA cases need answers.
See docs/formats.md for the field-by-field description.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import AdapterError, DatasetValidationError, StructuralValidationError
from .state import ANSWER, MODUS_OPERANDI, MOTIVE, SUSPECT, NarrativeUnit, Task

SCHEMA_VERSION = 1
DIFFICULTIES = ("Easy", "Medium", "Complex", "NA")
CASE_MODES = ("DP", "QA")
CORPUS_MODES = ("DP", "QA", "ChoiceAccuracy")
MANIFEST_NAME = "corpus.json"


@dataclass(frozen=True)
class GoldSuspect:
    name: str
    aliases: tuple[str, ...] = ()


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    mode: str
    difficulty: str
    narrative: tuple[NarrativeUnit, ...]
    task: Task
    gold_suspect: GoldSuspect | None = None
    gold_motive_props: tuple[str, ...] = ()
    gold_modus_props: tuple[str, ...] = ()
    gold_critical_clues: tuple[str, ...] = ()
    gold_answers: tuple[str, ...] = ()
    gold_support: tuple[str, ...] = ()

    def validate(self, source: str = "<memory>") -> None:
        def fail(field_name: str, why: str) -> None:
            raise DatasetValidationError(f"{source}: field {field_name!r}: {why}")

        if not self.case_id:
            fail("case_id", "empty")
        if self.mode not in CASE_MODES:
            fail("mode", f"must be one of {CASE_MODES}")
        if self.difficulty not in DIFFICULTIES:
            fail("difficulty", f"must be one of {DIFFICULTIES}")
        if not self.narrative:
            fail("narrative", "empty")
        ids = [u.id for u in self.narrative]
        if len(set(ids)) != len(ids):
            fail("narrative", "unit ids repeat")
        if sorted(u.ordinal for u in self.narrative) != list(range(len(self.narrative))):
            fail("narrative", "ordinals are not 0..n-1")
        if any(not u.text.strip() for u in self.narrative):
            fail("narrative", "blank unit text")
        if self.mode == "DP":
            if self.gold_suspect is None or not self.gold_suspect.name.strip():
                fail("gold.suspect", "required in DP mode")
            for name, value in (
                ("gold.motive", self.gold_motive_props),
                ("gold.modus", self.gold_modus_props),
                ("gold.critical_clues", self.gold_critical_clues),
            ):
                if not value:
                    fail(name, "required in DP mode")
            if self.gold_answers:
                fail("gold.answers", "QA field present on a DP case")
        else:
            if not self.gold_answers:
                fail("gold.answers", "required in QA mode")
            if self.gold_suspect is not None:
                fail("gold.suspect", "DP field present on a QA case")

    def to_dict(self) -> dict[str, Any]:
        gold: dict[str, Any] = {}
        if self.gold_suspect is not None:
            gold["suspect"] = {"name": self.gold_suspect.name, "aliases": list(self.gold_suspect.aliases)}
        if self.mode == "DP":
            gold["motive"] = list(self.gold_motive_props)
            gold["modus"] = list(self.gold_modus_props)
            gold["critical_clues"] = list(self.gold_critical_clues)
        else:
            gold["answers"] = list(self.gold_answers)
            gold["support"] = list(self.gold_support)
        return {
            "schema_version": SCHEMA_VERSION,
            "case_id": self.case_id,
            "mode": self.mode,
            "difficulty": self.difficulty,
            "task": self.task.to_dict(),
            "narrative": [u.to_dict() for u in self.narrative],
            "gold": gold,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], source: str = "<memory>") -> "CaseSpec":
        try:
            version = data.get("schema_version")
            if version != SCHEMA_VERSION:
                raise DatasetValidationError(f"{source}: field 'schema_version': expected {SCHEMA_VERSION}, got {version!r}")
            gold = data.get("gold") or {}
            suspect = gold.get("suspect")
            case = cls(
                case_id=str(data["case_id"]),
                mode=str(data.get("mode", "DP")),
                difficulty=str(data.get("difficulty", "NA")),
                narrative=tuple(NarrativeUnit.from_dict(u) for u in data["narrative"]),
                task=Task.from_dict(data["task"]),
                gold_suspect=GoldSuspect(suspect["name"], tuple(suspect.get("aliases", ()))) if suspect else None,
                gold_motive_props=tuple(gold.get("motive", ())),
                gold_modus_props=tuple(gold.get("modus", ())),
                gold_critical_clues=tuple(gold.get("critical_clues", ())),
                gold_answers=tuple(gold.get("answers", ())),
                gold_support=tuple(gold.get("support", ())),
            )
        except KeyError as exc:
            raise DatasetValidationError(f"{source}: field {exc.args[0]!r}: missing") from exc
        except (TypeError, ValueError, StructuralValidationError) as exc:
            if isinstance(exc, DatasetValidationError):
                raise
            raise DatasetValidationError(f"{source}: {exc}") from exc
        case.validate(source)
        return case


def dump_json(data: Any) -> str:
    """Canonical text form used for every file this package writes."""
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def load_case(path: str | Path) -> CaseSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetValidationError(f"{path}: not valid JSON: {exc}") from exc
    except OSError as exc:
        raise DatasetValidationError(f"{path}: cannot read: {exc}") from exc
    return CaseSpec.from_dict(data, source=str(path))


def save_case(case: CaseSpec, path: str | Path) -> None:
    Path(path).write_text(dump_json(case.to_dict()), encoding="utf-8")


@dataclass(frozen=True)
class CorpusManifest:
    name: str
    mode: str
    case_files: tuple[str, ...]
    counts: dict[str, int] = field(default_factory=dict)
    root: Path | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "mode": self.mode,
            "cases": list(self.case_files),
            "counts": dict(self.counts),
        }


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_corpus(path: str | Path) -> tuple[CorpusManifest, list[CaseSpec]]:
    manifest_path = _manifest_path(path)
    if not manifest_path.exists():
        raise DatasetValidationError(f"{manifest_path}: manifest not found")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetValidationError(f"{manifest_path}: not valid JSON: {exc}") from exc
    if data.get("schema_version") != SCHEMA_VERSION:
        raise DatasetValidationError(f"{manifest_path}: field 'schema_version': expected {SCHEMA_VERSION}")
    for key in ("name", "mode", "cases"):
        if key not in data:
            raise DatasetValidationError(f"{manifest_path}: field {key!r}: missing")
    if data["mode"] not in CORPUS_MODES:
        raise DatasetValidationError(f"{manifest_path}: field 'mode': must be one of {CORPUS_MODES}")

    root = manifest_path.parent
    cases = [load_case(root / rel) for rel in data["cases"]]
    seen: set[str] = set()
    for rel, case in zip(data["cases"], cases):
        if case.case_id in seen:
            raise DatasetValidationError(f"{root / rel}: duplicate case_id {case.case_id!r}")
        seen.add(case.case_id)
        expected = "DP" if data["mode"] == "DP" else "QA"
        if case.mode != expected:
            raise DatasetValidationError(f"{root / rel}: field 'mode': {case.mode} case in a {data['mode']} corpus")

    actual = dict(Counter(c.difficulty for c in cases))
    declared = {k: int(v) for k, v in (data.get("counts") or {}).items() if int(v) != 0}
    if declared and declared != actual:
        raise DatasetValidationError(f"{manifest_path}: field 'counts': declares {declared}, files give {actual}")

    manifest = CorpusManifest(
        name=str(data["name"]),
        mode=str(data["mode"]),
        case_files=tuple(data["cases"]),
        counts={d: actual.get(d, 0) for d in DIFFICULTIES if actual.get(d, 0)},
        root=root,
    )
    return manifest, cases


def save_corpus(manifest: CorpusManifest, cases: Iterable[CaseSpec], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rel, case in zip(manifest.case_files, cases):
        target = directory / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        save_case(case, target)
    path = directory / MANIFEST_NAME
    path.write_text(dump_json(manifest.to_dict()), encoding="utf-8")
    return path


DP_TASK = Task(dimensions=(SUSPECT, MOTIVE, MODUS_OPERANDI), instruction="Identify the culprit, the motive, and the modus operandi.")


def _support_id(title: str, index: int) -> str:
    return f"{title}::{index}"


def adapt_qa(record: dict[str, Any], difficulty: str = "NA") -> CaseSpec:
    """Map a multi-hop QA record onto a QA-mode case.

    HotpotQA-style records (``context`` = [[title, [sentences]]], ``supporting_facts``
    = [[title, sentence index]]) yield one narrative unit per sentence, with ids
    ``"<title>::<index>"`` so supporting facts keep their identity. StrategyQA-style
    records (boolean ``answer``, ``facts`` or ``paragraphs``) yield one unit per passage.
    """
    question = record.get("question")
    if not isinstance(question, str) or not question.strip():
        raise AdapterError("record has no question")
    if "answer" in record:
        raw_answers: list[Any] = [record["answer"]]
    elif "answers" in record:
        raw_answers = list(record["answers"])
    else:
        raise AdapterError("record has no answer")
    answers = []
    for answer in raw_answers:
        if isinstance(answer, bool):
            answers.append("yes" if answer else "no")
        elif answer is None or not str(answer).strip():
            raise AdapterError("record has an empty answer")
        else:
            answers.append(str(answer))

    units: list[NarrativeUnit] = []
    support: list[str] = []
    if "context" in record:
        for title, sentences in record["context"]:
            for idx, sentence in enumerate(sentences):
                if sentence.strip():
                    units.append(NarrativeUnit(_support_id(title, idx), sentence.strip(), len(units)))
        support = [_support_id(title, int(idx)) for title, idx in record.get("supporting_facts", ())]
    else:
        passages = record.get("facts") or record.get("paragraphs") or record.get("passages") or []
        for idx, passage in enumerate(passages):
            text = passage if isinstance(passage, str) else passage.get("text", "")
            if text.strip():
                units.append(NarrativeUnit(f"p{idx}", text.strip(), len(units)))
    if not units:
        # a bare question still needs one unit to reason over
        units.append(NarrativeUnit("q", question.strip(), 0))

    case_id = str(record.get("_id") or record.get("qid") or record.get("id") or hashlib.sha1(question.encode("utf-8")).hexdigest()[:12])
    case = CaseSpec(
        case_id=case_id,
        mode="QA",
        difficulty=difficulty,
        narrative=tuple(units),
        task=Task(dimensions=(ANSWER,), instruction=question.strip()),
        gold_answers=tuple(answers),
        gold_support=tuple(support),
    )
    case.validate(f"record {case_id}")
    return case

"""Prompt templates and the structured-response schema for each prompt kind.

Templates are plain ``string.Template`` files (``$name`` placeholders) kept in
``abductor/templates/``; point :class:`PromptLibrary` at another directory to
edit them without touching the package.
"""

from __future__ import annotations

from enum import Enum
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any

from .errors import TemplateError
from .state import AttributeKind, Verdict


class PromptKind(str, Enum):
    EXTRACT_STRUCTURE = "ExtractStructure"
    ALIGN = "Align"
    VERIFY = "Verify"
    AWARE = "Aware"
    DECOMPOSE = "Decompose"
    HYPOTHESIZE = "Hypothesize"
    SYNTHESIZE = "Synthesize"
    DIRECT_ANSWER = "DirectAnswer"
    PROPOSITIONS = "Propositions"


TEMPLATE_FILES = {
    PromptKind.EXTRACT_STRUCTURE: "extract_structure.txt",
    PromptKind.ALIGN: "align.txt",
    PromptKind.VERIFY: "verify.txt",
    PromptKind.AWARE: "aware.txt",
    PromptKind.DECOMPOSE: "decompose.txt",
    PromptKind.HYPOTHESIZE: "hypothesize.txt",
    PromptKind.SYNTHESIZE: "synthesize.txt",
    PromptKind.DIRECT_ANSWER: "direct_answer.txt",
    PromptKind.PROPOSITIONS: "propositions.txt",
}
COT_TEMPLATE = "cot_answer.txt"

_STRING = {"type": "string"}
_NONEMPTY = {"type": "string", "minLength": 1, "pattern": r"\S"}
_ID_LIST = {"type": "array", "items": _STRING}

SCHEMAS: dict[PromptKind, dict[str, Any]] = {
    PromptKind.EXTRACT_STRUCTURE: {
        "type": "object",
        "required": ["events", "attributes"],
        "properties": {
            "events": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["description"],
                    "properties": {"description": _NONEMPTY, "source_unit_ids": _ID_LIST},
                },
            },
            "attributes": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["description", "kind", "source_unit_ids"],
                    "properties": {
                        "description": _NONEMPTY,
                        "kind": {"enum": [k.value for k in AttributeKind]},
                        "source_unit_ids": {"type": "array", "minItems": 1, "items": _STRING},
                    },
                },
            },
        },
    },
    PromptKind.ALIGN: {
        "type": "object",
        "required": ["alignment"],
        "properties": {"alignment": {"type": "object", "additionalProperties": _ID_LIST}},
    },
    PromptKind.VERIFY: {
        "type": "object",
        "required": ["verdict"],
        "properties": {
            "verdict": {"enum": [v.value for v in Verdict]},
            "note": _STRING,
            "referenced_unit_ids": _ID_LIST,
        },
    },
    PromptKind.AWARE: {
        "type": "object",
        "required": ["obstacles"],
        "properties": {
            "obstacles": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["type", "dimension", "requirement"],
                    "properties": {"type": _STRING, "dimension": _STRING, "requirement": _NONEMPTY},
                },
            }
        },
    },
    PromptKind.DECOMPOSE: {
        "type": "object",
        "required": ["queries"],
        "properties": {"queries": {"type": "array", "items": _STRING}},
    },
    PromptKind.HYPOTHESIZE: {
        "type": "object",
        "required": ["statement"],
        "properties": {
            "statement": _NONEMPTY,
            "citations": _ID_LIST,
            "flagged": {"type": "boolean"},
            "supersedes": {"type": ["string", "null"]},
        },
    },
    PromptKind.SYNTHESIZE: {
        "type": "object",
        "required": ["answers"],
        "properties": {
            "answers": {"type": "object", "additionalProperties": _STRING},
            "rationale": _STRING,
        },
    },
    PromptKind.PROPOSITIONS: {
        "type": "object",
        "required": ["propositions"],
        "properties": {"propositions": {"type": "array", "minItems": 1, "items": _NONEMPTY}},
    },
}
SCHEMAS[PromptKind.DIRECT_ANSWER] = SCHEMAS[PromptKind.SYNTHESIZE]


class PromptLibrary:
    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._cache: dict[str, Template] = {}

    def _load(self, filename: str) -> Template:
        if filename not in self._cache:
            if self.directory is not None and (self.directory / filename).exists():
                text = (self.directory / filename).read_text(encoding="utf-8")
            else:
                try:
                    text = resources.files("abductor.templates").joinpath(filename).read_text(encoding="utf-8")
                except FileNotFoundError as exc:
                    raise TemplateError(f"no template {filename}") from exc
            self._cache[filename] = Template(text)
        return self._cache[filename]

    def render(self, kind: PromptKind, template: str | None = None, **values: Any) -> str:
        filename = template or TEMPLATE_FILES[kind]
        try:
            return self._load(filename).substitute(**{k: str(v) for k, v in values.items()})
        except (KeyError, ValueError) as exc:
            raise TemplateError(f"template {filename} has an unresolved placeholder: {exc}") from exc

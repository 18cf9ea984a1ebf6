"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class AbductorError(Exception):
    exit_code = 1


class StructuralValidationError(AbductorError):
    """A state value violates one of its structural invariants."""

    exit_code = 7


class LinkError(StructuralValidationError):
    """A query or hypothesis points at a parent that does not exist."""


class IdCollisionError(StructuralValidationError):
    pass


class InputValidationError(AbductorError, ValueError):
    exit_code = 3


class ParseError(AbductorError):
    """A model response failed schema validation on every allowed attempt."""

    exit_code = 6

    def __init__(self, message: str, raw_attempts: list[str] | None = None):
        super().__init__(message)
        self.raw_attempts = list(raw_attempts or [])


class FusionParseError(ParseError):
    pass


class QSRParseError(ParseError):
    pass


class BackendUnavailableError(AbductorError):
    exit_code = 5


class MissingFixtureError(AbductorError):
    exit_code = 4

    def __init__(self, key: str):
        super().__init__(f"no mock fixture for key {key!r}")
        self.key = key


class TemplateError(AbductorError):
    exit_code = 7


class DatasetValidationError(AbductorError):
    exit_code = 3


class AdapterError(DatasetValidationError):
    pass


class StorageError(AbductorError):
    exit_code = 8


class SequencingError(StorageError):
    pass


class IncomparableError(AbductorError):
    exit_code = 9


class CostError(AbductorError, ZeroDivisionError):
    exit_code = 1


EXIT_CODES = {
    "ok": 0,
    "generic": AbductorError.exit_code,
    "usage": 2,
    "dataset": DatasetValidationError.exit_code,
    "missing_fixture": MissingFixtureError.exit_code,
    "backend_unavailable": BackendUnavailableError.exit_code,
    "parse": ParseError.exit_code,
    "structural": StructuralValidationError.exit_code,
    "storage": StorageError.exit_code,
    "incomparable": IncomparableError.exit_code,
    "batch_partial_failure": 10,
}

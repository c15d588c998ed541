from __future__ import annotations

import uuid
from datetime import datetime, timezone
from typing import Any, Dict, Optional


# -------------------------------------------------
# Core: rich ToolkitException (problem-dict compatible)
# -------------------------------------------------
class ToolkitException(Exception):
    """
    Rich toolkit error with structured fields and helpers
    to render a problem document consistently at the command boundary.
    """

    exit_code: int = 1

    def __init__(
        self,
        detail: str = "",
        *,
        code: Optional[str] = None,      # machine-friendly error code (e.g. "argument/invalid")
        errors: Any = None,                  # field-level errors, validation issues, etc.
        extra: Optional[Dict[str, Any]] = None,  # any additional context
        instance: Optional[str] = None,      # unique id for this occurrence
    ) -> None:
        super().__init__(detail)
        self.detail = detail
        self.code = code
        self.errors = errors or []
        self.extra = extra or {}
        self.instance = instance or f"urn:uuid:{uuid.uuid4()}"
        self.timestamp = datetime.now(timezone.utc).isoformat()

    def to_problem(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {
            "title": self.extra.get("title", self.__class__.__name__),
            "status": self.exit_code,
            "detail": self.detail,
            "instance": self.instance,
            "timestamp": self.timestamp,
        }
        if self.code:
            body["code"] = self.code
        if self.errors:
            body["errors"] = self.errors
        if self.extra:
            # keep extra last to avoid collisions with reserved keys
            body["extra"] = self.extra
        return body

    @property
    def retryable(self) -> bool:
        """Whether the caller might retry the same operation."""
        return False

    @classmethod
    def from_unexpected(cls, exc: Exception) -> "ToolkitException":
        """Factory to wrap unknown exceptions safely."""
        return InternalError(str(exc) or "Unexpected failure", extra={"cause": exc.__class__.__name__})


# -------------------------------------------------
# Typed Exceptions
# -------------------------------------------------

class InvalidArgumentError(ToolkitException, ValueError):
    exit_code = 2

    def __init__(self, detail: str = "Invalid argument", **kw):
        super().__init__(detail, code="argument/invalid", **kw)

class DataError(ToolkitException):
    exit_code = 3

    def __init__(self, detail: str = "Unprocessable data", errors: Any = None, **kw):
        super().__init__(detail, code="data/unprocessable", errors=errors, **kw)

class NotFoundError(ToolkitException):
    exit_code = 4

    def __init__(self, detail: str = "Not found", **kw):
        super().__init__(detail, code="artifact/not_found", **kw)

class ConflictError(ToolkitException):
    exit_code = 5

    def __init__(self, detail: str = "Conflict", **kw):
        super().__init__(detail, code="artifact/conflict", **kw)

class PreconditionError(ToolkitException):
    exit_code = 6

    def __init__(self, detail: str = "Precondition failed", stage: Optional[str] = None, **kw):
        super().__init__(detail, code="pipeline/precondition", **kw)
        self.stage = stage
        if stage:
            self.extra.setdefault("stage", stage)

class TrainingFailureError(ToolkitException):
    exit_code = 7

    def __init__(
        self,
        detail: str = "Training diverged",
        last_stable: Optional[Dict[str, Any]] = None,
        **kw,
    ):
        super().__init__(detail, code="training/diverged", **kw)
        # state_dict of the last finite checkpoint, if one was taken
        self.last_stable = last_stable

class TransportError(ToolkitException):
    exit_code = 8

    def __init__(self, detail: str = "Endpoint transport failure", partial: Any = None, **kw):
        super().__init__(detail, code="endpoint/transport", **kw)
        self.partial = partial

    @property
    def retryable(self) -> bool:
        return True

class InternalError(ToolkitException):
    exit_code = 1

    def __init__(self, detail: str = "Internal failure", **kw):
        super().__init__(detail, code="internal/unexpected", **kw)

"""Exception hierarchy shared by every pathagent module.

All domain failures derive from :class:`PathAgentError`; the CLI maps those to
exit code 1.
"""

from __future__ import annotations


class PathAgentError(Exception):
    """Base class for every structured domain error."""


# slide_model / region_tiler


class SlideError(PathAgentError):
    pass


class MissingLevel(SlideError):
    pass


class DimensionMismatch(SlideError):
    pass


class UnreadableRaster(SlideError):
    pass


class InvalidMagnification(SlideError):
    pass


class OutOfBounds(SlideError):
    pass


class InvalidOverlap(SlideError):
    pass


# nav_dsl


class ParseError(PathAgentError):
    pass


class NoJsonFound(ParseError):
    pass


class SchemaViolation(ParseError):
    def __init__(self, message: str, path: str = "$", line: int | None = None):
        self.path = path
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{path}: {message}")


class DuplicateRegionId(ParseError):
    pass


class InvalidViewport(ParseError):
    pass


class InconsistentAction(ParseError):
    pass


class Unparseable(ParseError):
    pass


# backend


class BackendError(PathAgentError):
    pass


class BackendTimeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class ApiError(BackendError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body[:500]
        super().__init__(f"HTTP {status}: {self.body}")


class TooManyImages(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


# agent_runtime


class UnknownRegionId(PathAgentError):
    pass


class AnswerMissing(PathAgentError):
    def __init__(self, message: str, transcript: str = ""):
        self.transcript = transcript
        super().__init__(message)


class LabelMismatch(PathAgentError):
    pass


class PromptError(PathAgentError):
    pass


class StageError(PathAgentError):
    """Wraps a failure with the agent stage that raised it."""

    def __init__(self, stage: str, cause: BaseException, report=None):
        self.stage = stage
        self.cause = cause
        self.report = report
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


# eval_harness / dataset_io


class EvalError(PathAgentError):
    pass


class InvalidArgs(EvalError):
    pass


class UnknownRecordId(EvalError):
    pass


class DuplicatePrediction(EvalError):
    pass


class RaggedAttempts(EvalError):
    pass


class EmptyClass(EvalError):
    pass


class EmptyClassWarning(UserWarning):
    pass


class DuplicateRecordId(SchemaViolation):
    pass


class BadAnswerIndex(SchemaViolation):
    pass

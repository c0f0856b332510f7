"""Exception hierarchy shared by all agent_gpa modules."""

from __future__ import annotations


class GpaError(Exception):
    """Base class for every error raised by this package."""


# trace_model
class TraceError(GpaError):
    pass


class MalformedDocument(TraceError):
    pass


class DuplicateSpanId(TraceError):
    pass


class DanglingParent(TraceError):
    """Only used as a warning category; dangling spans are re-rooted."""


class UnknownSpan(TraceError, KeyError):
    pass


class AnnotationError(GpaError):
    pass


class UnknownImpactLevel(AnnotationError):
    pass


class EmptySpanSet(AnnotationError):
    pass


class UnknownJudgeId(AnnotationError):
    pass


class EmptyJudgeSet(AnnotationError):
    pass


# preprocess
class NoAgentSpans(GpaError):
    pass


# judge_core
class MissingPlaceholder(GpaError):
    pass


class BackendError(GpaError):
    pass


class TransientBackendError(BackendError):
    """Retryable failure (rate limit, 5xx, network)."""


class BackendExhausted(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class CacheMissInReplayMode(BackendError):
    pass


class VerdictParseError(GpaError):
    pass


class MissingScore(VerdictParseError):
    pass


class ScoreOutOfRange(VerdictParseError):
    def __init__(self, message: str, score: int, clamped: int):
        super().__init__(message)
        self.score = score
        self.clamped = clamped


# matching
class MatchingError(GpaError):
    pass


class TraceMismatch(MatchingError):
    pass


class UnknownErrorRef(MatchingError):
    pass


class InconsistentEntry(MatchingError):
    pass


class UnmappedError(MatchingError):
    pass


# metrics
class MetricsError(GpaError, ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class EmptyInput(MetricsError):
    pass


class InsufficientData(MetricsError):
    pass


class ZeroVector(MetricsError):
    pass


class DimensionMismatch(MetricsError):
    pass


class CoverageGap(MetricsError):
    pass


# harness
class ValidationFailure(GpaError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("validation failed:\n" + "\n".join(f"  - {d}" for d in diagnostics))
        self.diagnostics = diagnostics


class DatasetMismatch(GpaError):
    pass

"""Parsing and indexing of OpenTelemetry-style agent traces and their annotations.

Trace files are JSON objects with ``trace_id``, ``task`` and a ``spans`` array.
Each span carries ``span_id``, optional ``parent_span_id``, ``name``, optional
``kind``, a flat string-to-string ``attributes`` object and integer
``start_ns``/``end_ns`` timestamps. Annotations and GPA mappings are JSON Lines.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import (
    DuplicateSpanId,
    EmptyJudgeSet,
    EmptySpanSet,
    MalformedDocument,
    UnknownImpactLevel,
    UnknownJudgeId,
    UnknownSpan,
)

log = logging.getLogger(__name__)

SPAN_KIND_ATTRIBUTE = "openinference.span.kind"


class SpanKind(str, Enum):
    AGENT = "AGENT"
    LLM = "LLM"
    TOOL = "TOOL"
    CHAIN = "CHAIN"
    OTHER = "OTHER"


class Impact(str, Enum):
    LOW = "LOW"
    MEDIUM = "MEDIUM"
    HIGH = "HIGH"


IMPACT_ORDER = (Impact.LOW, Impact.MEDIUM, Impact.HIGH)

_IMPACT_ALIASES = {
    "low": Impact.LOW,
    "med": Impact.MEDIUM,
    "medium": Impact.MEDIUM,
    "high": Impact.HIGH,
}


class JudgeId(str, Enum):
    LC = "LC"
    EE = "EE"
    PA = "PA"
    PQ = "PQ"
    TS = "TS"
    TC = "TC"
    GF = "GF"


# Order of the per-judge report tables.
GPA_JUDGE_ORDER = ("LC", "EE", "PA", "PQ", "TS", "TC", "GF")


@dataclass(frozen=True)
class Span:
    span_id: str
    parent_span_id: str | None
    name: str
    kind: SpanKind
    attributes: Mapping[str, str]
    start_ns: int
    end_ns: int

    def attr(self, key: str, default: str | None = None) -> str | None:
        return self.attributes.get(key, default)


@dataclass(frozen=True)
class Trace:
    trace_id: str
    task: str
    spans: tuple[Span, ...]
    # Diagnostics are not part of trace identity.
    warnings: tuple[str, ...] = field(default=(), compare=False)
    _by_id: dict[str, Span] = field(default_factory=dict, init=False, repr=False, compare=False)
    _children: dict[str | None, list[Span]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        by_id: dict[str, Span] = {}
        children: dict[str | None, list[Span]] = {}
        for span in self.spans:
            by_id[span.span_id] = span
            children.setdefault(span.parent_span_id, []).append(span)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_children", children)

    @property
    def span_ids(self) -> frozenset[str]:
        return frozenset(self._by_id)

    @property
    def roots(self) -> list[Span]:
        return list(self._children.get(None, []))

    @property
    def multi_root(self) -> bool:
        return len(self.roots) > 1

    def span(self, span_id: str) -> Span:
        try:
            return self._by_id[span_id]
        except KeyError:
            raise UnknownSpan(f"span {span_id!r} not in trace {self.trace_id!r}") from None

    def __contains__(self, span_id: object) -> bool:
        return span_id in self._by_id

    def parent(self, span: Span) -> Span | None:
        if span.parent_span_id is None:
            return None
        return self._by_id[span.parent_span_id]

    def ancestors(self, span: Span) -> list[Span]:
        """Ancestors nearest-first, excluding the span itself."""
        out = []
        cur = self.parent(span)
        while cur is not None:
            out.append(cur)
            cur = self.parent(cur)
        return out


@dataclass(frozen=True)
class AnnotatedError:
    error_id: str
    trace_id: str
    category: str
    impact: Impact
    span_ids: frozenset[str]
    description: str = ""


@dataclass(frozen=True)
class GpaMapping:
    error_id: str
    judges: frozenset[str]


def _kind_of(raw: Mapping[str, Any], attributes: Mapping[str, str]) -> SpanKind:
    value = raw.get("kind") or attributes.get(SPAN_KIND_ATTRIBUTE)
    if not value:
        return SpanKind.OTHER
    try:
        return SpanKind(str(value).upper())
    except ValueError:
        return SpanKind.OTHER


def _attributes(raw: Any, span_id: str) -> dict[str, str]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise MalformedDocument(f"span {span_id!r}: attributes must be an object")
    out: dict[str, str] = {}
    for key, value in raw.items():
        # Nested values from sloppy exporters are kept as their JSON text.
        out[str(key)] = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)
    return out


def _int_field(raw: Mapping[str, Any], key: str, span_id: str) -> int:
    value = raw.get(key, 0)
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise MalformedDocument(f"span {span_id!r}: {key} must be an integer")
    try:
        return int(value)
    except ValueError:
        raise MalformedDocument(f"span {span_id!r}: {key} must be an integer") from None


def trace_from_dict(doc: Any) -> Trace:
    if not isinstance(doc, dict):
        raise MalformedDocument("trace document must be a JSON object")
    if "spans" not in doc or not isinstance(doc["spans"], list):
        raise MalformedDocument("trace document has no 'spans' array")
    trace_id = doc.get("trace_id")
    if not isinstance(trace_id, str) or not trace_id:
        raise MalformedDocument("trace document has no 'trace_id'")

    staged: list[tuple[int, dict[str, Any]]] = []
    seen: set[str] = set()
    for position, raw in enumerate(doc["spans"]):
        if not isinstance(raw, dict):
            raise MalformedDocument(f"span #{position} is not an object")
        span_id = raw.get("span_id")
        if not isinstance(span_id, str) or not span_id:
            raise MalformedDocument(f"span #{position} has no span_id")
        if span_id in seen:
            raise DuplicateSpanId(f"span_id {span_id!r} appears more than once in {trace_id!r}")
        seen.add(span_id)
        staged.append((position, raw))

    warnings: list[str] = []
    spans: list[tuple[int, int, Span]] = []
    for position, raw in staged:
        span_id = raw["span_id"]
        parent = raw.get("parent_span_id") or None
        if parent is not None and parent not in seen:
            msg = f"span {span_id!r} references unknown parent {parent!r}; re-rooted"
            log.warning("%s: %s", trace_id, msg)
            warnings.append(msg)
            parent = None
        attributes = _attributes(raw.get("attributes"), span_id)
        start_ns = _int_field(raw, "start_ns", span_id)
        end_ns = _int_field(raw, "end_ns", span_id)
        if end_ns < start_ns:
            raise MalformedDocument(f"span {span_id!r}: end_ns precedes start_ns")
        span = Span(
            span_id=span_id,
            parent_span_id=parent,
            name=str(raw.get("name", "")),
            kind=_kind_of(raw, attributes),
            attributes=attributes,
            start_ns=start_ns,
            end_ns=end_ns,
        )
        spans.append((start_ns, position, span))

    spans.sort(key=lambda t: (t[0], t[1]))
    ordered = tuple(s for _, _, s in spans)
    _check_acyclic(ordered, trace_id)
    trace = Trace(
        trace_id=trace_id, task=str(doc.get("task", "")), spans=ordered, warnings=tuple(warnings)
    )
    if trace.multi_root:
        msg = f"trace has {len(trace.roots)} roots"
        log.warning("%s: %s", trace_id, msg)
        object.__setattr__(trace, "warnings", trace.warnings + (msg,))
    return trace


def _check_acyclic(spans: Iterable[Span], trace_id: str) -> None:
    parent_of = {s.span_id: s.parent_span_id for s in spans}
    state: dict[str, int] = {}  # 1 = on current path, 2 = known to reach a root
    for start in parent_of:
        path = []
        cur: str | None = start
        while cur is not None and state.get(cur) != 2:
            if state.get(cur) == 1:
                raise MalformedDocument(f"parent links in {trace_id!r} form a cycle through {cur!r}")
            state[cur] = 1
            path.append(cur)
            cur = parent_of[cur]
        for node in path:
            state[node] = 2


def parse_trace(document: str | bytes) -> Trace:
    """Parse one trace document (JSON text)."""
    try:
        doc = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from exc
    return trace_from_dict(doc)


def load_trace(path: str | Path) -> Trace:
    return parse_trace(Path(path).read_bytes())


def trace_to_dict(trace: Trace) -> dict[str, Any]:
    return {
        "trace_id": trace.trace_id,
        "task": trace.task,
        "spans": [
            {
                "span_id": s.span_id,
                "parent_span_id": s.parent_span_id,
                "name": s.name,
                "kind": s.kind.value,
                "attributes": dict(s.attributes),
                "start_ns": s.start_ns,
                "end_ns": s.end_ns,
            }
            for s in trace.spans
        ],
    }


def serialize_trace(trace: Trace) -> str:
    return json.dumps(trace_to_dict(trace), ensure_ascii=False, indent=2)


def children_of(trace: Trace, span_id: str) -> list[Span]:
    """Direct children of ``span_id`` ordered by start time."""
    trace.span(span_id)
    return list(trace._children.get(span_id, []))


# ---------------------------------------------------------------------------
# annotations


def normalize_impact(value: Any) -> Impact:
    if isinstance(value, Impact):
        return value
    key = str(value).strip().lower()
    try:
        return _IMPACT_ALIASES[key]
    except KeyError:
        raise UnknownImpactLevel(f"unknown impact level {value!r}") from None


def _jsonl_records(document: str | bytes | Iterable[str]) -> list[tuple[int, dict[str, Any]]]:
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    lines = document.splitlines() if isinstance(document, str) else list(document)
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"line {lineno}: not valid JSON: {exc}") from exc
        if not isinstance(rec, dict):
            raise MalformedDocument(f"line {lineno}: record must be an object")
        records.append((lineno, rec))
    return records


def annotated_error_from_dict(rec: Mapping[str, Any], where: str = "record") -> AnnotatedError:
    span_ids = rec.get("span_ids")
    if span_ids is None and rec.get("location"):
        # TRAIL exports cite a single span under "location".
        span_ids = [rec["location"]]
    if isinstance(span_ids, str):
        span_ids = [span_ids]
    if not span_ids:
        raise EmptySpanSet(f"{where}: error {rec.get('error_id')!r} cites no spans")
    for key in ("error_id", "trace_id"):
        if not rec.get(key):
            raise MalformedDocument(f"{where}: missing {key}")
    return AnnotatedError(
        error_id=str(rec["error_id"]),
        trace_id=str(rec["trace_id"]),
        category=str(rec.get("category", "")),
        impact=normalize_impact(rec.get("impact")),
        span_ids=frozenset(str(s) for s in span_ids),
        description=str(rec.get("description", "")),
    )


def load_annotations(document: str | bytes | Iterable[str]) -> list[AnnotatedError]:
    """Parse a JSON Lines annotation document."""
    return [
        annotated_error_from_dict(rec, f"line {lineno}")
        for lineno, rec in _jsonl_records(document)
    ]


def annotated_error_to_dict(error: AnnotatedError) -> dict[str, Any]:
    return {
        "error_id": error.error_id,
        "trace_id": error.trace_id,
        "category": error.category,
        "impact": error.impact.value,
        "span_ids": sorted(error.span_ids),
        "description": error.description,
    }


def load_gpa_mapping(
    document: str | bytes | Iterable[str], known_judges: Iterable[str] = GPA_JUDGE_ORDER
) -> list[GpaMapping]:
    known = set(known_judges)
    out = []
    for lineno, rec in _jsonl_records(document):
        if not rec.get("error_id"):
            raise MalformedDocument(f"line {lineno}: missing error_id")
        judges = rec.get("judges") or []
        if isinstance(judges, str):
            judges = [judges]
        if not judges:
            raise EmptyJudgeSet(f"line {lineno}: error {rec['error_id']!r} maps to no judge")
        for j in judges:
            if j not in known:
                raise UnknownJudgeId(f"line {lineno}: unknown judge id {j!r}")
        out.append(GpaMapping(error_id=str(rec["error_id"]), judges=frozenset(judges)))
    return out


def mapping_index(mappings: Iterable[GpaMapping]) -> dict[str, frozenset[str]]:
    """error_id -> judges; repeated records for one error are merged."""
    index: dict[str, set[str]] = {}
    for m in mappings:
        index.setdefault(m.error_id, set()).update(m.judges)
    return {k: frozenset(v) for k, v in index.items()}


def judge_totals(
    mappings: Iterable[GpaMapping], errors: Iterable[AnnotatedError] | None = None
) -> Counter:
    """Count errors per judge, or per (judge, impact) when errors are given."""
    index = mapping_index(mappings)
    totals: Counter = Counter()
    if errors is None:
        for judges in index.values():
            totals.update(judges)
        return totals
    for err in errors:
        for judge in index.get(err.error_id, ()):
            totals[(judge, err.impact)] += 1
    return totals


def validate_annotations(
    errors: Iterable[AnnotatedError], traces: Mapping[str, Trace]
) -> list[str]:
    """Cross-check annotations against loaded traces; returns diagnostics."""
    problems = []
    seen: set[str] = set()
    for err in errors:
        if err.error_id in seen:
            problems.append(f"error {err.error_id}: duplicate error_id")
        seen.add(err.error_id)
        trace = traces.get(err.trace_id)
        if trace is None:
            problems.append(f"error {err.error_id}: unknown trace {err.trace_id!r}")
            continue
        for sid in sorted(err.span_ids):
            if sid not in trace:
                problems.append(f"error {err.error_id}: span {sid!r} not in trace {err.trace_id!r}")
    return problems

"""Decide whether each annotated error was identified and localized by a judge run."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import (
    InconsistentEntry,
    MalformedDocument,
    TraceMismatch,
    UnknownErrorRef,
    UnmappedError,
)
from .judges import JudgeVerdict
from .trace_model import AnnotatedError, GpaMapping, mapping_index

UNION_JUDGE = "ALL"
ALL = "ALL"


class MatchMode(str, Enum):
    AUTO = "AUTO"
    ADJUDICATED = "ADJUDICATED"


@dataclass(frozen=True)
class MatchRecord:
    error_id: str
    judge_id: str
    run_index: int
    identified: bool
    localized: bool
    mode: MatchMode = MatchMode.AUTO
    matched_span_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.localized and not self.identified:
            raise InconsistentEntry(f"{self.error_id}/{self.judge_id}: localized without identified")


@dataclass(frozen=True)
class AdjudicationEntry:
    error_id: str
    judge_id: str
    identified: bool
    localized: bool
    run_index: int | None = None
    note: str = ""


def auto_match(verdict: JudgeVerdict, error: AnnotatedError) -> MatchRecord:
    """Span-intersection match; identification is equated with localization."""
    if verdict.trace_id != error.trace_id:
        raise TraceMismatch(f"verdict for {verdict.trace_id!r} cannot match error in {error.trace_id!r}")
    matched = verdict.cited_span_ids & error.span_ids
    hit = bool(matched) and verdict.flags_issue
    return MatchRecord(
        error_id=error.error_id,
        judge_id=verdict.judge_id,
        run_index=verdict.run_index,
        identified=hit,
        localized=hit,
        mode=MatchMode.AUTO,
        matched_span_ids=matched if hit else frozenset(),
    )


def auto_match_all(verdicts: Iterable[JudgeVerdict], errors: Iterable[AnnotatedError]) -> list[MatchRecord]:
    by_trace: dict[str, list[AnnotatedError]] = {}
    for err in errors:
        by_trace.setdefault(err.trace_id, []).append(err)
    return [auto_match(v, e) for v in verdicts for e in by_trace.get(v.trace_id, ())]


def apply_adjudication(
    records: Sequence[MatchRecord], entries: Iterable[AdjudicationEntry]
) -> list[MatchRecord]:
    """Human verdicts replace automatic ones; a run-specific entry beats an all-runs entry."""
    entries = list(entries)
    known = {(r.error_id, r.judge_id) for r in records}
    for e in entries:
        if e.localized and not e.identified:
            raise InconsistentEntry(f"{e.error_id}/{e.judge_id}: localized=true with identified=false")
        if (e.error_id, e.judge_id) not in known:
            raise UnknownErrorRef(f"no match record for error {e.error_id!r} and judge {e.judge_id!r}")
    general = {(e.error_id, e.judge_id): e for e in entries if e.run_index is None}
    specific = {(e.error_id, e.judge_id, e.run_index): e for e in entries if e.run_index is not None}

    out = []
    covered: set[tuple[str, str, int]] = set()
    for r in records:
        key = (r.error_id, r.judge_id, r.run_index)
        entry = specific.get(key) or general.get((r.error_id, r.judge_id))
        covered.add(key)
        if entry is None:
            out.append(r)
            continue
        out.append(
            replace(
                r,
                identified=entry.identified,
                localized=entry.localized,
                mode=MatchMode.ADJUDICATED,
                matched_span_ids=r.matched_span_ids if entry.localized else frozenset(),
            )
        )
    for key, entry in sorted(specific.items()):
        if key not in covered:
            out.append(
                MatchRecord(entry.error_id, entry.judge_id, key[2], entry.identified, entry.localized, MatchMode.ADJUDICATED)
            )
    return out


def load_adjudication(path: str | Path) -> list[AdjudicationEntry]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"{path}:{lineno}: {exc}") from exc
        run = rec.get("run_index")
        out.append(
            AdjudicationEntry(
                error_id=str(rec["error_id"]),
                judge_id=str(rec["judge_id"]),
                identified=bool(rec["identified"]),
                localized=bool(rec["localized"]),
                run_index=None if run is None else int(run),
                note=str(rec.get("note", "")),
            )
        )
    return out


def adjudication_skeleton(records: Iterable[MatchRecord]) -> list[dict[str, Any]]:
    """Pre-filled entries from automatic results, for annotators to amend."""
    rows = sorted(records, key=lambda r: (r.error_id, r.judge_id, r.run_index))
    return [
        {
            "error_id": r.error_id,
            "judge_id": r.judge_id,
            "run_index": r.run_index,
            "identified": r.identified,
            "localized": r.localized,
            "note": "",
        }
        for r in rows
    ]


def record_to_dict(r: MatchRecord) -> dict[str, Any]:
    return {
        "error_id": r.error_id,
        "judge_id": r.judge_id,
        "run_index": r.run_index,
        "identified": r.identified,
        "localized": r.localized,
        "mode": r.mode.value,
        "matched_span_ids": sorted(r.matched_span_ids),
    }


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageCell:
    caught: int = 0
    localized: int = 0
    total: int = 0

    def __add__(self, other: "CoverageCell") -> "CoverageCell":
        return CoverageCell(self.caught + other.caught, self.localized + other.localized, self.total + other.total)


def _group_key(
    group_by: Sequence[str], judge: str, err: AnnotatedError, split_of: Mapping[str, str] | None
) -> tuple[str, ...]:
    parts = []
    for dim in group_by:
        if dim == "judge":
            parts.append(judge)
        elif dim == "impact":
            parts.append(err.impact.value)
        elif dim == "split":
            parts.append((split_of or {}).get(err.trace_id, ALL))
        else:
            raise ValueError(f"unknown grouping dimension {dim!r}")
    return tuple(parts)


def coverage_counts(
    records: Iterable[MatchRecord],
    mappings: Iterable[GpaMapping],
    errors: Iterable[AnnotatedError],
    group_by: Sequence[str] = ("judge", "impact", "split"),
    split_of: Mapping[str, str] | None = None,
    judges: Iterable[str] | None = None,
    general_judges: Iterable[str] = (),
) -> dict[tuple[str, ...], CoverageCell]:
    """(caught, localized, total) per group, plus union rows under judge ``ALL``.

    A judge is only scored on errors mapped to it; ``general_judges`` are
    responsible for every error. In the union row an error counts once if any
    of its responsible judges caught it.
    """
    errors = list(errors)
    index = mapping_index(mappings)
    general = set(general_judges)
    selected = None if judges is None else set(judges)
    hits: dict[tuple[str, str], list[bool]] = {}
    for r in records:
        if r.error_id not in index and r.judge_id not in general:
            raise UnmappedError(f"error {r.error_id!r} has no GPA mapping")
        slot = hits.setdefault((r.error_id, r.judge_id), [False, False])
        slot[0] |= r.identified
        slot[1] |= r.localized

    table: dict[tuple[str, ...], CoverageCell] = {}

    def bump(key: tuple[str, ...], caught: bool, localized: bool) -> None:
        table[key] = table.get(key, CoverageCell()) + CoverageCell(int(caught), int(localized), 1)

    for err in errors:
        responsible = set(index.get(err.error_id, ())) | general
        if selected is not None:
            responsible &= selected
        if not responsible:
            continue
        any_caught = any_localized = False
        for judge in sorted(responsible):
            caught, localized = hits.get((err.error_id, judge), (False, False))
            any_caught |= caught
            any_localized |= localized
            if "judge" in group_by:
                bump(_group_key(group_by, judge, err, split_of), caught, localized)
        # Without a judge dimension this is the only row per group.
        bump(_group_key(group_by, UNION_JUDGE, err, split_of), any_caught, any_localized)
    return table

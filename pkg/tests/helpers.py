"""Shared builders for on-disk datasets used by the harness tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

from agent_gpa.harness import cmd_ingest


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def write_dataset(
    root: Path,
    traces: Iterable[dict[str, Any]],
    annotations: Iterable[dict[str, Any]],
    mapping: Iterable[dict[str, Any]],
    human_scores: Iterable[dict[str, Any]] | None = None,
) -> Path:
    """Write inputs under ``root`` and ingest them; returns the dataset directory."""
    tdir = root / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    for doc in traces:
        (tdir / f"{doc['trace_id']}.json").write_text(json.dumps(doc), encoding="utf-8")
    ann = write_jsonl(root / "annotations.jsonl", annotations)
    mp = write_jsonl(root / "mapping.jsonl", mapping)
    hs = write_jsonl(root / "human.jsonl", human_scores) if human_scores is not None else None
    ds = root / "ds"
    cmd_ingest(tdir, ann, mp, ds, hs, echo=lambda _: None)
    return ds


def span(span_id: str, parent: str | None = None, kind: str = "LLM", start: int = 0, **attrs: str) -> dict[str, Any]:
    return {
        "span_id": span_id,
        "parent_span_id": parent,
        "name": f"{kind.lower()}-{span_id}",
        "kind": kind,
        "attributes": dict(attrs),
        "start_ns": start,
        "end_ns": start + 1,
    }

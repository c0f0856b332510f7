"""On-disk layout: the ingested dataset index and the per-run verdict store.

Run store layout::

    <out>/<run_id>/manifest.json
    <out>/<run_id>/verdicts-<judge>.jsonl    append-only
    <out>/<run_id>/report.json, report.md
    <out>/cache.jsonl                         response cache shared by runs
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Literal

from pydantic import BaseModel, Field

from .errors import DatasetMismatch, GpaError, MalformedDocument
from .judges import JudgeVerdict, verdict_from_dict, verdict_to_dict
from .trace_model import (
    AnnotatedError,
    GpaMapping,
    IMPACT_ORDER,
    Trace,
    load_annotations,
    load_gpa_mapping,
    load_trace,
)

INDEX_NAME = "dataset.json"
SPLIT_NAME = "split.json"
SPLITS = ("dev", "test", "all")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(obj: Any) -> str:
    """Canonical JSON: sorted keys, stable float repr, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MalformedDocument(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class HumanScore:
    trace_id: str
    judge_id: str
    score: int


def load_human_scores(path: str | Path) -> list[HumanScore]:
    out = []
    for rec in read_jsonl(path):
        score = int(rec["score"])
        if not 0 <= score <= 3:
            raise MalformedDocument(f"{path}: human score {score} outside 0..3")
        out.append(HumanScore(str(rec["trace_id"]), str(rec["judge_id"]), score))
    return out


@dataclass
class Dataset:
    """An ingested dataset, loaded from its index file."""

    root: Path
    index: dict[str, Any]
    _traces: dict[str, Trace] = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        if path.is_dir():
            path = path / INDEX_NAME
        if not path.exists():
            raise GpaError(f"no dataset index at {path}; run 'ingest' first")
        return cls(path.parent, json.loads(path.read_text(encoding="utf-8")))

    def _path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def digest(self) -> str:
        return self.index["digest"]

    @property
    def trace_ids(self) -> list[str]:
        return [t["trace_id"] for t in self.index["traces"]]

    def trace(self, trace_id: str) -> Trace:
        if trace_id not in self._traces:
            entry = next((t for t in self.index["traces"] if t["trace_id"] == trace_id), None)
            if entry is None:
                raise KeyError(trace_id)
            self._traces[trace_id] = load_trace(self._path(entry["path"]))
        return self._traces[trace_id]

    @cached_property
    def errors(self) -> list[AnnotatedError]:
        return load_annotations(self._path(self.index["annotations"]).read_bytes())

    @cached_property
    def mappings(self) -> list[GpaMapping]:
        return load_gpa_mapping(self._path(self.index["mapping"]).read_bytes())

    @cached_property
    def human_scores(self) -> list[HumanScore]:
        rel = self.index.get("human_scores")
        return load_human_scores(self._path(rel)) if rel else []

    @property
    def split_path(self) -> Path:
        return self.root / SPLIT_NAME

    @cached_property
    def membership(self) -> dict[str, list[str]] | None:
        if not self.split_path.exists():
            return None
        doc = json.loads(self.split_path.read_text(encoding="utf-8"))
        return {"dev": list(doc["dev"]), "test": list(doc["test"])}

    def split_of(self) -> dict[str, str]:
        """trace_id -> 'dev' | 'test'; empty when no split has been made."""
        m = self.membership or {}
        return {t: name for name in ("dev", "test") for t in m.get(name, [])}

    def select(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if split == "all":
            return self.trace_ids
        if self.membership is None:
            raise DatasetMismatch(f"split '{split}' requested but the dataset has not been split")
        wanted = set(self.membership[split])
        return [t for t in self.trace_ids if t in wanted]

    def errors_in(self, trace_ids: Iterable[str]) -> list[AnnotatedError]:
        keep = set(trace_ids)
        return [e for e in self.errors if e.trace_id in keep]


def impact_totals(errors: Iterable[AnnotatedError]) -> dict[str, int]:
    c = Counter(e.impact for e in errors)
    out = {i.value: c.get(i, 0) for i in IMPACT_ORDER}
    out["ALL"] = sum(c.values())
    return out


def relpath(path: Path, start: Path) -> str:
    try:
        return os.path.relpath(path.resolve(), start.resolve())
    except ValueError:  # different drive on Windows
        return str(path.resolve())


# ---------------------------------------------------------------------------
# runs


class RunManifest(BaseModel):
    run_id: str
    dataset: str
    dataset_digest: str
    split: Literal["dev", "test", "all"] = "all"
    judges: list[str]
    model_id: str
    n_runs: int = Field(1, ge=1)
    seed: int = 0
    backend: Literal["live", "replay", "mock"] = "mock"
    created_at: str = ""
    updated_at: str = ""

    def identity(self) -> dict[str, Any]:
        """The fields that define what is evaluated (no timestamps, no paths)."""
        return {
            "dataset_digest": self.dataset_digest,
            "split": self.split,
            "judges": list(self.judges),
            "model_id": self.model_id,
            "n_runs": self.n_runs,
            "seed": self.seed,
            "backend": self.backend,
        }


def default_run_id(manifest_identity: dict[str, Any]) -> str:
    return "run-" + sha256_text(json.dumps(manifest_identity, sort_keys=True))[:12]


def now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


@dataclass(frozen=True)
class InvalidRun:
    judge_id: str
    trace_id: str
    run_index: int
    error: str
    reason: str


class RunStore:
    def __init__(self, run_dir: str | Path):
        self.dir = Path(run_dir)

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def manifest(self) -> RunManifest:
        if not self.manifest_path.exists():
            raise GpaError(f"no manifest in {self.dir}")
        return RunManifest.model_validate_json(self.manifest_path.read_text(encoding="utf-8"))

    def write_manifest(self, manifest: RunManifest) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(dump_json(manifest.model_dump()), encoding="utf-8", newline="\n")

    def verdict_path(self, judge_id: str) -> Path:
        return self.dir / f"verdicts-{judge_id}.jsonl"

    def append(self, judge_id: str, record: dict[str, Any]) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        with self.verdict_path(judge_id).open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    def append_verdict(self, verdict: JudgeVerdict, **extra: Any) -> None:
        self.append(verdict.judge_id, {"kind": "verdict", **verdict_to_dict(verdict), **extra})

    def append_invalid(self, bad: InvalidRun) -> None:
        self.append(
            bad.judge_id,
            {
                "kind": "invalid",
                "judge_id": bad.judge_id,
                "trace_id": bad.trace_id,
                "run_index": bad.run_index,
                "error": bad.error,
                "reason": bad.reason,
            },
        )

    def _latest(self, judge_id: str) -> dict[tuple[str, int], dict[str, Any]]:
        path = self.verdict_path(judge_id)
        if not path.exists():
            return {}
        latest: dict[tuple[str, int], dict[str, Any]] = {}
        for rec in read_jsonl(path):
            latest[(rec["trace_id"], int(rec["run_index"]))] = rec
        return latest

    def judges_on_disk(self) -> list[str]:
        return sorted(p.name[len("verdicts-") : -len(".jsonl")] for p in self.dir.glob("verdicts-*.jsonl"))

    def load(self, judge_id: str) -> tuple[list[JudgeVerdict], list[InvalidRun]]:
        """Latest record per (trace, run), sorted; a later valid line supersedes an invalid one."""
        verdicts, invalid = [], []
        latest = self._latest(judge_id)
        for key in sorted(latest):
            rec = latest[key]
            if rec.get("kind") == "invalid":
                invalid.append(
                    InvalidRun(rec["judge_id"], rec["trace_id"], int(rec["run_index"]), rec["error"], rec["reason"])
                )
            else:
                verdicts.append(verdict_from_dict(rec))
        return verdicts, invalid

    def completed(self, judge_id: str) -> set[tuple[str, int]]:
        return {k for k, rec in self._latest(judge_id).items() if rec.get("kind") != "invalid"}

    def verdict_digest(self, judge_id: str) -> str:
        """Digest of the canonical (sorted, deduplicated) verdict content."""
        verdicts, invalid = self.load(judge_id)
        canon = [verdict_to_dict(v) for v in verdicts] + [
            {"invalid": [b.trace_id, b.run_index, b.error]} for b in invalid
        ]
        return sha256_text(json.dumps(canon, sort_keys=True, ensure_ascii=False))

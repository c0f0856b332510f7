"""GPA judge specifications, prompt assembly and verdict parsing."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import MissingPlaceholder, MissingScore, ScoreOutOfRange
from .trace_model import GPA_JUDGE_ORDER

TRACE_PLACEHOLDER = "{TRACE}"
SCALE_MAX = 3
MAX_FEW_SHOTS = 2

JUDGE_NAMES = {
    "LC": "Logical Consistency",
    "EE": "Execution Efficiency",
    "PA": "Plan Adherence",
    "PQ": "Plan Quality",
    "TS": "Tool Selection",
    "TC": "Tool Calling",
    "GF": "Goal Fulfillment",
}


@dataclass(frozen=True)
class JudgeSpec:
    id: str
    base_prompt: str
    custom_instruction: str | None = None
    few_shots: tuple[str, ...] = ()
    scale_max: int = SCALE_MAX
    # GF ships an authored prompt and is not among the default judges.
    experimental: bool = False
    # A general judge (e.g. an external baseline) is responsible for every error.
    general: bool = False

    def __post_init__(self) -> None:
        check_placeholder(self.base_prompt, self.id)
        if len(self.few_shots) > MAX_FEW_SHOTS:
            raise ValueError(f"judge {self.id}: at most {MAX_FEW_SHOTS} few-shot examples")
        if self.scale_max < 1:
            raise ValueError(f"judge {self.id}: scale_max must be positive")


def check_placeholder(prompt: str, judge_id: str = "?") -> None:
    count = prompt.count(TRACE_PLACEHOLDER)
    if count != 1:
        raise MissingPlaceholder(
            f"judge {judge_id}: base prompt must contain exactly one {TRACE_PLACEHOLDER} (found {count})"
        )


def _asset(name: str, prompts_dir: str | Path | None = None) -> str | None:
    if prompts_dir is not None:
        path = Path(prompts_dir) / name
        if path.exists():
            return path.read_text(encoding="utf-8")
    res = resources.files("agent_gpa").joinpath("prompts", name)
    if res.is_file():
        return res.read_text(encoding="utf-8")
    return None


def control_flow_preamble(prompts_dir: str | Path | None = None) -> str:
    """The Open Deep-Research architecture description attached to every judge."""
    text = _asset("control_flow.txt", prompts_dir)
    assert text is not None
    return text


def builtin_judges(prompts_dir: str | Path | None = None) -> list[JudgeSpec]:
    """The seven GPA judges. Files in ``prompts_dir`` override the packaged assets."""
    specs = []
    for jid in GPA_JUDGE_ORDER:
        key = jid.lower()
        base = _asset(f"{key}_base.txt", prompts_dir)
        assert base is not None, jid
        specs.append(
            JudgeSpec(
                id=jid,
                base_prompt=base,
                custom_instruction=_asset(f"{key}_custom.txt", prompts_dir),
                experimental=jid == "GF",
            )
        )
    return specs


def judge_by_id(specs: Iterable[JudgeSpec]) -> dict[str, JudgeSpec]:
    return {s.id: s for s in specs}


def load_judge_spec(path: str | Path) -> JudgeSpec:
    """Load an external judge (such as the TRAIL baseline) from a JSON file.

    Prompt fields may be given inline or as ``*_path`` entries relative to the file.
    """
    path = Path(path)
    doc: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))

    def text(key: str) -> str | None:
        if doc.get(key) is not None:
            return str(doc[key])
        if doc.get(f"{key}_path"):
            return (path.parent / doc[f"{key}_path"]).read_text(encoding="utf-8")
        return None

    base = text("base_prompt")
    if base is None:
        raise MissingPlaceholder(f"{path}: no base_prompt")
    return JudgeSpec(
        id=str(doc["id"]),
        base_prompt=base,
        custom_instruction=text("custom_instruction"),
        few_shots=tuple(doc.get("few_shots", ())),
        scale_max=int(doc.get("scale_max", SCALE_MAX)),
        experimental=bool(doc.get("experimental", False)),
        general=bool(doc.get("general", doc["id"] not in GPA_JUDGE_ORDER)),
    )


# ---------------------------------------------------------------------------
# prompt assembly


@dataclass(frozen=True)
class PromptBundle:
    judge_id: str
    trace_id: str
    system_text: str
    user_text: str
    content_hash: str


def content_digest(system_text: str, user_text: str) -> str:
    h = hashlib.sha256()
    for part in (system_text, user_text):
        data = part.encode("utf-8")
        h.update(len(data).to_bytes(8, "big"))
        h.update(data)
    return h.hexdigest()


def build_prompt(
    spec: JudgeSpec,
    transcript: str,
    architecture_preamble: str | None = None,
    trace_id: str = "",
) -> PromptBundle:
    if not transcript:
        raise ValueError("transcript is empty")
    check_placeholder(spec.base_prompt, spec.id)
    parts = [architecture_preamble, spec.custom_instruction, *spec.few_shots]
    system_text = "\n\n".join(p.strip("\n") for p in parts if p)
    # A literal placeholder inside the transcript would survive substitution.
    safe = transcript.replace(TRACE_PLACEHOLDER, "{ TRACE }")
    user_text = spec.base_prompt.replace(TRACE_PLACEHOLDER, safe)
    return PromptBundle(
        judge_id=spec.id,
        trace_id=trace_id,
        system_text=system_text,
        user_text=user_text,
        content_hash=content_digest(system_text, user_text),
    )


# ---------------------------------------------------------------------------
# verdicts


@dataclass(frozen=True)
class JudgeVerdict:
    judge_id: str
    trace_id: str
    run_index: int
    raw_text: str
    score_raw: int
    score_norm: float
    criteria: str = ""
    evidence: str = ""
    cited_span_ids: frozenset[str] = field(default_factory=frozenset)
    model_id: str = ""

    @property
    def flags_issue(self) -> bool:
        return self.score_raw < SCALE_MAX


def normalize_score(raw: int, scale_max: int = SCALE_MAX) -> float:
    if not 0 <= raw <= scale_max:
        raise ValueError(f"score {raw} outside 0..{scale_max}")
    return raw / scale_max


def bucket_score(raw: int, scale_max: int = SCALE_MAX) -> int:
    """Collapse 0..3 to 0 (min), 1 (middle scores) or 2 (max)."""
    if not 0 <= raw <= scale_max:
        raise ValueError(f"score {raw} outside 0..{scale_max}")
    if raw == 0:
        return 0
    return 2 if raw == scale_max else 1


_SCORE_LINE = re.compile(
    r"^[ \t>#*_\-]*(?:final[ \t]+)?score[ \t*_]*:[ \t*_\[(]*(-?\d+)", re.IGNORECASE | re.MULTILINE
)
_CRITERIA = re.compile(r"^[ \t>#*_\-]*criteria[ \t*_]*:[*_]*", re.IGNORECASE | re.MULTILINE)
_EVIDENCE = re.compile(r"^[ \t>#*_\-]*supporting[ \t]+evidence[ \t*_]*:[*_]*", re.IGNORECASE | re.MULTILINE)
_SPAN_TOKEN = re.compile(
    r"\bspan(?:[ _-]?ids?)?s?[ \t]*(?:number[ \t]*)?[:#=]?[ \t]*[`'\"(\[]?([0-9a-fA-F]{8,32})\b",
    re.IGNORECASE,
)


def _last(pattern: re.Pattern[str], text: str, end: int) -> re.Match[str] | None:
    found = None
    for m in pattern.finditer(text, 0, end):
        found = m
    return found


def extract_cited_spans(text: str, known_span_ids: Iterable[str]) -> frozenset[str]:
    """Known span ids appearing as whole tokens, plus hex ids following the word "span"."""
    cited = set()
    for sid in known_span_ids:
        if not sid:
            continue
        if re.search(rf"(?<![0-9A-Za-z]){re.escape(sid)}(?![0-9A-Za-z])", text):
            cited.add(sid)
    cited.update(m.group(1) for m in _SPAN_TOKEN.finditer(text))
    return frozenset(cited)


def parse_verdict(
    response_text: str,
    spec: JudgeSpec,
    known_span_ids: Iterable[str] = (),
    *,
    trace_id: str = "",
    run_index: int = 0,
    model_id: str = "",
) -> JudgeVerdict:
    """Parse a templated judge response. Raises only VerdictParseError subclasses."""
    text = response_text if isinstance(response_text, str) else str(response_text)
    scores = list(_SCORE_LINE.finditer(text))
    if not scores:
        raise MissingScore(f"{spec.id}/{trace_id}: no 'Score:' line with an integer")
    final = scores[-1]
    score = int(final.group(1))
    if not 0 <= score <= spec.scale_max:
        clamped = min(max(score, 0), spec.scale_max)
        raise ScoreOutOfRange(
            f"{spec.id}/{trace_id}: score {score} outside 0..{spec.scale_max}", score, clamped
        )
    ev = _last(_EVIDENCE, text, final.start())
    evidence = text[ev.end() : final.start()].strip() if ev else ""
    crit_end = ev.start() if ev else final.start()
    cr = _last(_CRITERIA, text, crit_end)
    criteria = text[cr.end() : crit_end].strip() if cr else ""
    return JudgeVerdict(
        judge_id=spec.id,
        trace_id=trace_id,
        run_index=run_index,
        raw_text=text,
        score_raw=score,
        score_norm=normalize_score(score, spec.scale_max),
        criteria=criteria,
        evidence=evidence,
        cited_span_ids=extract_cited_spans(text, known_span_ids),
        model_id=model_id,
    )


def verdict_to_dict(v: JudgeVerdict) -> dict[str, Any]:
    return {
        "judge_id": v.judge_id,
        "trace_id": v.trace_id,
        "run_index": v.run_index,
        "model_id": v.model_id,
        "score_raw": v.score_raw,
        "score_norm": v.score_norm,
        "criteria": v.criteria,
        "evidence": v.evidence,
        "cited_span_ids": sorted(v.cited_span_ids),
        "raw_text": v.raw_text,
    }


def verdict_from_dict(d: dict[str, Any]) -> JudgeVerdict:
    return JudgeVerdict(
        judge_id=d["judge_id"],
        trace_id=d["trace_id"],
        run_index=int(d["run_index"]),
        raw_text=d.get("raw_text", ""),
        score_raw=int(d["score_raw"]),
        score_norm=float(d["score_norm"]),
        criteria=d.get("criteria", ""),
        evidence=d.get("evidence", ""),
        cited_span_ids=frozenset(d.get("cited_span_ids", ())),
        model_id=d.get("model_id", ""),
    )


def rationale(v: JudgeVerdict) -> str:
    """Text compared across runs for semantic consistency."""
    return v.evidence or v.raw_text


def specs_for(ids: Sequence[str], available: Iterable[JudgeSpec]) -> list[JudgeSpec]:
    index = judge_by_id(available)
    missing = [i for i in ids if i not in index]
    if missing:
        raise KeyError(f"unknown judge ids: {', '.join(missing)}")
    return [index[i] for i in ids]

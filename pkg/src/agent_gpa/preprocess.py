"""Turn a raw span tree into per-agent transcripts a judge can read.

Each span contributes messages to the segment of its nearest AGENT-kind
ancestor (itself included). Top-level agents form the MANAGER segment; every
nested AGENT span is one delegated ``search_agent`` invocation. LLM spans
usually replay the whole conversation so far, so repeated (role, content)
pairs are dropped within a segment before rendering.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Sequence

from .errors import NoAgentSpans
from .trace_model import Span, SpanKind, Trace

DEFAULT_MAX_MESSAGE_CHARS = 20_000
TRUNCATION_MARKER = "[truncated]"
PLAN_KEYWORD = "[PLAN]"


class Role(str, Enum):
    SYSTEM = "SYSTEM"
    USER = "USER"
    ASSISTANT = "ASSISTANT"
    TOOL = "TOOL"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str
    source_span: str
    sequence: int


@dataclass(frozen=True, order=True)
class AgentKey:
    """MANAGER is ``index=None``; delegated agents carry their index."""

    index: int | None = None

    @property
    def is_manager(self) -> bool:
        return self.index is None

    @property
    def label(self) -> str:
        return "MANAGER" if self.index is None else f"SEARCH_AGENT {self.index}"

    def __str__(self) -> str:
        return self.label


MANAGER = AgentKey()


def search_agent(index: int) -> AgentKey:
    return AgentKey(index)


@dataclass(frozen=True)
class AgentSegment:
    agent_key: AgentKey
    system_instructions: tuple[Message, ...] = ()
    messages: tuple[Message, ...] = ()
    plans: tuple[tuple[str, str], ...] = ()
    # span_id of the AGENT span that opened this segment, if any
    agent_span: str | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ProcessedTrace:
    trace_id: str
    task: str
    segments: tuple[AgentSegment, ...]
    rendered_char_count: int = 0


# ---------------------------------------------------------------------------
# message extraction

_ROLE_MAP = {
    "system": Role.SYSTEM,
    "developer": Role.SYSTEM,
    "user": Role.USER,
    "human": Role.USER,
    "assistant": Role.ASSISTANT,
    "ai": Role.ASSISTANT,
    "model": Role.ASSISTANT,
    "tool-call": Role.ASSISTANT,
    "tool": Role.TOOL,
    "tool-response": Role.TOOL,
    "function": Role.TOOL,
}

_FLAT_MESSAGE = re.compile(r"^llm\.(input|output)_messages\.(\d+)\.message\.(.+)$")
_CONTENT_PART = re.compile(r"^contents\.(\d+)\.message_content\.text$")
_TOOL_CALL = re.compile(r"^tool_calls\.(\d+)\.tool_call\.function\.(name|arguments)$")


def _role(value: Any) -> Role:
    return _ROLE_MAP.get(str(value).strip().lower(), Role.USER)


def _content_text(content: Any) -> str:
    if content is None:
        return ""
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        parts = []
        for part in content:
            if isinstance(part, dict):
                text = part.get("text")
                if text is None and isinstance(part.get("content"), str):
                    text = part["content"]
                if text is not None:
                    parts.append(str(text))
            elif isinstance(part, str):
                parts.append(part)
        return "\n".join(parts)
    return json.dumps(content, ensure_ascii=False)


def _flat_messages(span: Span) -> list[tuple[Role, str]] | None:
    grouped: dict[tuple[int, int], dict[str, Any]] = {}
    for key, value in span.attributes.items():
        m = _FLAT_MESSAGE.match(key)
        if not m:
            continue
        direction = 0 if m.group(1) == "input" else 1
        slot = grouped.setdefault((direction, int(m.group(2))), {"parts": {}, "calls": {}})
        rest = m.group(3)
        if rest == "role":
            slot["role"] = value
        elif rest == "content":
            slot["content"] = value
        elif (pm := _CONTENT_PART.match(rest)) is not None:
            slot["parts"][int(pm.group(1))] = value
        elif (tm := _TOOL_CALL.match(rest)) is not None:
            slot["calls"].setdefault(int(tm.group(1)), {})[tm.group(2)] = value
    if not grouped:
        return None
    out = []
    for key in sorted(grouped):
        slot = grouped[key]
        text = slot.get("content")
        if text is None and slot["parts"]:
            text = "\n".join(slot["parts"][i] for i in sorted(slot["parts"]))
        pieces = [text] if text else []
        for i in sorted(slot["calls"]):
            call = slot["calls"][i]
            pieces.append(f"tool_call {call.get('name', '')}({call.get('arguments', '')})")
        default_role = "user" if key[0] == 0 else "assistant"
        out.append((_role(slot.get("role", default_role)), "\n".join(pieces)))
    return out


def _json_messages(raw: str | None) -> list[tuple[Role, str]] | None:
    if not raw or not raw.lstrip().startswith("{"):
        return None
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError:
        return None
    msgs = doc.get("messages") if isinstance(doc, dict) else None
    if not isinstance(msgs, list):
        return None
    out = []
    for m in msgs:
        if isinstance(m, dict):
            out.append((_role(m.get("role", "user")), _content_text(m.get("content"))))
    return out


def span_messages(span: Span) -> list[tuple[Role, str]]:
    """The (role, content) pairs carried by one span, in conversational order."""
    flat = _flat_messages(span)
    if flat is not None:
        return flat
    inp = span.attr("input.value")
    outp = span.attr("output.value")
    if span.kind is SpanKind.TOOL:
        lines = []
        if span.attr("tool.name"):
            lines.append(f"tool: {span.attr('tool.name')}")
        if inp:
            lines.append(f"input: {inp}")
        if outp:
            lines.append(f"output: {outp}")
        return [(Role.TOOL, "\n".join(lines))] if lines else []
    out = _json_messages(inp)
    if out is None:
        out = [(Role.USER, inp)] if inp else []
    if outp:
        out.append((Role.ASSISTANT, outp))
    return out


def _clean(content: str) -> str:
    return content.rstrip()


# ---------------------------------------------------------------------------
# segmentation


def owning_agent(trace: Trace, span: Span) -> Span | None:
    """Nearest AGENT-kind span among ``span`` and its ancestors."""
    if span.kind is SpanKind.AGENT:
        return span
    for anc in trace.ancestors(span):
        if anc.kind is SpanKind.AGENT:
            return anc
    return None


def agent_keys(trace: Trace) -> dict[str, AgentKey]:
    """Map every AGENT span id to the segment it opens."""
    keys: dict[str, AgentKey] = {}
    next_index = 0
    for span in trace.spans:  # already in start order
        if span.kind is not SpanKind.AGENT:
            continue
        if any(a.kind is SpanKind.AGENT for a in trace.ancestors(span)):
            keys[span.span_id] = search_agent(next_index)
            next_index += 1
        else:
            keys[span.span_id] = MANAGER
    return keys


def _plans(messages: Iterable[Message]) -> tuple[tuple[str, str], ...]:
    return tuple((m.content, m.source_span) for m in messages if PLAN_KEYWORD in m.content)


def _build_segment(key: AgentKey, msgs: list[Message], agent_span: str | None) -> AgentSegment:
    system = tuple(m for m in msgs if m.role is Role.SYSTEM)
    rest = tuple(m for m in msgs if m.role is not Role.SYSTEM)
    return AgentSegment(
        agent_key=key,
        system_instructions=system,
        messages=rest,
        plans=_plans(msgs),
        agent_span=agent_span,
    )


def segment_agents(trace: Trace) -> list[AgentSegment]:
    """Split a trace into MANAGER and SEARCH_AGENT segments (history not yet deduplicated)."""
    if not any(s.kind in (SpanKind.AGENT, SpanKind.LLM) for s in trace.spans):
        raise NoAgentSpans(f"trace {trace.trace_id!r} has no AGENT or LLM spans")
    keys = agent_keys(trace)
    collected: dict[AgentKey, list[Message]] = {MANAGER: []}
    opener: dict[AgentKey, str] = {}
    for sid, key in keys.items():
        collected.setdefault(key, [])
        opener.setdefault(key, sid)
    for span in trace.spans:
        owner = owning_agent(trace, span)
        key = MANAGER if owner is None else keys[owner.span_id]
        bucket = collected[key]
        for role, content in span_messages(span):
            content = _clean(content)
            if not content.strip():
                continue
            bucket.append(Message(role, content, span.span_id, len(bucket)))
    ordered = sorted(collected, key=lambda k: (k.index is not None, k.index or 0))
    return [_build_segment(k, collected[k], opener.get(k)) for k in ordered]


def _in_order(segment: AgentSegment) -> list[Message]:
    return sorted(segment.system_instructions + segment.messages, key=lambda m: m.sequence)


def dedupe_history(segments: Sequence[AgentSegment]) -> list[AgentSegment]:
    """Drop repeated (role, content) pairs within each segment, keeping first occurrences."""
    out = []
    for seg in segments:
        seen: set[tuple[Role, str]] = set()
        kept: list[Message] = []
        for msg in _in_order(seg):
            key = (msg.role, _clean(msg.content))
            if key in seen:
                continue
            seen.add(key)
            kept.append(replace(msg, sequence=len(kept)))
        out.append(_build_segment(seg.agent_key, kept, seg.agent_span))
    return out


# ---------------------------------------------------------------------------
# rendering


def _truncate(content: str, budget: int | None) -> str:
    if budget is None or budget <= 0 or len(content) <= budget:
        return content
    return content[:budget] + f" {TRUNCATION_MARKER}"


def _render_message(msg: Message, budget: int | None) -> list[str]:
    body = _truncate(msg.content, budget).split("\n")
    prefix = f"[span {msg.source_span}]"
    lines = [f"{prefix} {msg.role.value}: {body[0]}"]
    lines.extend(f"{prefix}   {line}" for line in body[1:])
    return lines


def render_transcript(pt: ProcessedTrace, max_message_chars: int | None = DEFAULT_MAX_MESSAGE_CHARS) -> str:
    """Deterministic judge-ready text; every content line is prefixed with its span id."""
    lines = [f"TRACE {pt.trace_id}", f"TASK: {pt.task}" if pt.task else "TASK:"]
    for seg in pt.segments:
        lines.append("")
        lines.append(f"=== {seg.agent_key.label} ===")
        lines.append("System instructions:")
        for msg in seg.system_instructions:
            lines.extend(_render_message(msg, max_message_chars))
        lines.append("Messages:")
        for msg in seg.messages:
            lines.extend(_render_message(msg, max_message_chars))
    return "\n".join(lines) + "\n"


def process_trace(trace: Trace, max_message_chars: int | None = DEFAULT_MAX_MESSAGE_CHARS) -> ProcessedTrace:
    segments = tuple(dedupe_history(segment_agents(trace)))
    pt = ProcessedTrace(trace.trace_id, trace.task, segments)
    return replace(pt, rendered_char_count=len(render_transcript(pt, max_message_chars)))


SPAN_PREFIX = re.compile(r"^\[span ([^\]]+)\]")


def cited_line_spans(transcript: str) -> list[str]:
    """Span ids from the line prefixes of a rendered transcript."""
    return [m.group(1) for line in transcript.splitlines() if (m := SPAN_PREFIX.match(line))]


# ---------------------------------------------------------------------------
# dataset split

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Steele, Lea & Flood's splitmix64; identical output on every platform."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next()
            if x < limit:
                return x % bound


def shuffled(items: Sequence[str], seed: int) -> list[str]:
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_dataset(trace_ids: Sequence[str], ratio: float, seed: int) -> tuple[list[str], list[str]]:
    """Shuffle deterministically, then take ``floor(ratio * n)`` ids as dev and the rest as test."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must be within [0, 1], got {ratio}")
    if len(set(trace_ids)) != len(trace_ids):
        raise ValueError("trace ids must be unique")
    order = shuffled(trace_ids, seed)
    # Decimal reading of the ratio avoids 0.29 * 100 -> 28.999...
    n_dev = int(Fraction(repr(float(ratio))) * len(order))
    return order[:n_dev], order[n_dev:]

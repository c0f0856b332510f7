"""Deterministic synthetic agent traces for tests, demos and the replay fixture.

The traces imitate a manager agent that delegates to search sub-agents. Each
LLM call replays the full conversation so far, the way real agent frameworks
log it, so preprocessing has duplicated history to remove.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Sequence


def synthetic_span_id(trace_id: str, n: int) -> str:
    return hashlib.blake2b(f"{trace_id}/{n}".encode(), digest_size=8).hexdigest()


def flat_messages(direction: str, messages: Sequence[tuple[str, str]]) -> dict[str, str]:
    """OpenInference flattened message attributes."""
    attrs = {}
    for i, (role, content) in enumerate(messages):
        attrs[f"llm.{direction}_messages.{i}.message.role"] = role
        attrs[f"llm.{direction}_messages.{i}.message.content"] = content
    return attrs


@dataclass
class TraceBuilder:
    trace_id: str
    task: str = ""
    spans: list[dict[str, Any]] = field(default_factory=list)
    clock: int = 1_000

    def add(self, kind: str, name: str, parent: str | None, attributes: dict[str, str] | None = None) -> str:
        span_id = synthetic_span_id(self.trace_id, len(self.spans))
        self.spans.append(
            {
                "span_id": span_id,
                "parent_span_id": parent,
                "name": name,
                "kind": kind,
                "attributes": {"openinference.span.kind": kind, **(attributes or {})},
                "start_ns": self.clock,
                "end_ns": self.clock + 5,
            }
        )
        self.clock += 10
        return span_id

    def document(self) -> dict[str, Any]:
        return {"trace_id": self.trace_id, "task": self.task, "spans": list(self.spans)}


def _filler(tag: str, chars: int) -> str:
    words = []
    i = 0
    while sum(len(w) + 1 for w in words) < chars:
        words.append(f"{tag}{i}")
        i += 1
    return " ".join(words)


@dataclass
class SyntheticTrace:
    document: dict[str, Any]
    # span ids by role in the story, for annotating errors
    manager_llm: list[str]
    manager_tools: list[str]
    search_llm: list[list[str]]
    search_tools: list[list[str]]
    agents: list[str]


def agent_trace(
    trace_id: str,
    task: str = "Find the population of the capital of France in 2020.",
    manager_turns: int = 3,
    search_agents: int = 1,
    search_turns: int = 2,
    payload_chars: int = 200,
) -> SyntheticTrace:
    """A manager agent with ``search_agents`` nested sub-agents, history replayed per call."""
    b = TraceBuilder(trace_id, task)
    root = b.add("AGENT", "manager", None, {"input.value": task})
    system = "You are the manager agent. Plan first, then delegate tasks to a search_agent."
    history: list[tuple[str, str]] = [("system", system), ("user", task)]
    manager_llm, manager_tools, agents = [], [], [root]
    search_llm: list[list[str]] = []
    search_tools: list[list[str]] = []

    for turn in range(manager_turns):
        reply = f"[PLAN] step {turn}: " if turn == 0 else f"Thought {turn}: "
        reply += _filler(f"m{turn}w", payload_chars)
        attrs = flat_messages("input", history)
        attrs.update(flat_messages("output", [("assistant", reply)]))
        manager_llm.append(b.add("LLM", f"manager.llm.{turn}", root, attrs))
        history.append(("assistant", reply))

        if turn < search_agents:
            agent = b.add("AGENT", f"search_agent.{turn}", root, {"input.value": f"sub-task {turn}: {task}"})
            agents.append(agent)
            sub_history: list[tuple[str, str]] = [
                ("system", "You are a search agent. Use web_search and report back."),
                ("user", f"sub-task {turn}: {task}"),
            ]
            llms, tools = [], []
            for st in range(search_turns):
                sub_reply = f"Search step {st}: " + _filler(f"s{turn}.{st}w", payload_chars)
                a = flat_messages("input", sub_history)
                a.update(flat_messages("output", [("assistant", sub_reply)]))
                llms.append(b.add("LLM", f"search.llm.{turn}.{st}", agent, a))
                sub_history.append(("assistant", sub_reply))
                result = _filler(f"r{turn}.{st}w", payload_chars)
                tools.append(
                    b.add(
                        "TOOL",
                        "web_search",
                        agent,
                        {"tool.name": "web_search", "input.value": f"query {turn}.{st}", "output.value": result},
                    )
                )
                sub_history.append(("tool", result))
            search_llm.append(llms)
            search_tools.append(tools)
            history.append(("tool", f"search_agent {turn} returned: " + _filler(f"a{turn}w", payload_chars // 2)))
        else:
            result = _filler(f"t{turn}w", payload_chars)
            manager_tools.append(
                b.add(
                    "TOOL",
                    "python_interpreter",
                    root,
                    {"tool.name": "python_interpreter", "input.value": f"code {turn}", "output.value": result},
                )
            )
            history.append(("tool", result))
    return SyntheticTrace(b.document(), manager_llm, manager_tools, search_llm, search_tools, agents)


def verdict_text(score: int, cited: Sequence[str] = (), finding: str = "") -> str:
    """A response in the judges' output template."""
    if cited:
        evidence = " ".join(f"At span {sid} the agent {finding or 'made an error'}." for sid in cited)
    else:
        evidence = finding or "No issues were found in this dimension."
    return f"Criteria: synthetic check\nSupporting Evidence: {evidence}\nScore: {score}\n"

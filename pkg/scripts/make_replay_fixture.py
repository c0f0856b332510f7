"""Regenerate the shipped replay fixture under fixtures/replay.

Builds six synthetic traces with annotated errors, records scripted judge
responses through the MOCK backend, then replays them and writes the golden
report. Rerun after changing prompts or rendering; the recordings are keyed
by prompt digest, so stale recordings show up as replay gaps.

    python3 scripts/make_replay_fixture.py [--root fixtures/replay]
"""

from __future__ import annotations

import argparse
import json
import shutil
import tempfile
from pathlib import Path

from agent_gpa.config import HarnessConfig, MockConfig, ReplayConfig
from agent_gpa.harness import cmd_evaluate, cmd_ingest, cmd_report, cmd_split
from agent_gpa.synthetic import agent_trace, verdict_text

JUDGES = ["LC", "EE", "PA", "PQ", "TS", "TC"]
N_RUNS = 2
SPLIT_SEED = 7


def _jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8", newline="\n")


def build_inputs(root: Path) -> None:
    shapes = {
        "gaia-01": dict(manager_turns=3, search_agents=1),
        "gaia-02": dict(manager_turns=2, search_agents=1, search_turns=3),
        "gaia-03": dict(manager_turns=4, search_agents=2),
        "gaia-04": dict(manager_turns=2, search_agents=0),
        "gaia-05": dict(manager_turns=4, search_agents=1),
        "gaia-06": dict(manager_turns=3, search_agents=0),
    }
    t = {tid: agent_trace(tid, **kw) for tid, kw in shapes.items()}
    (root / "traces").mkdir(parents=True, exist_ok=True)
    for tid, st in t.items():
        (root / "traces" / f"{tid}.json").write_text(json.dumps(st.document, indent=1, sort_keys=True), encoding="utf-8", newline="\n")

    def err(eid, tid, impact, span, category, judges):
        return {"error_id": eid, "trace_id": tid, "impact": impact, "span_ids": [span], "category": category}, {
            "error_id": eid,
            "judges": judges,
        }

    pairs = [
        err("e1", "gaia-01", "HIGH", t["gaia-01"].manager_tools[0], "Incorrect tool arguments", ["TC"]),
        err("e2", "gaia-01", "LOW", t["gaia-01"].manager_llm[1], "Instruction non-compliance", ["PA", "LC"]),
        err("e3", "gaia-02", "MEDIUM", t["gaia-02"].search_tools[0][1], "Tool selection error", ["TS"]),
        err("e4", "gaia-03", "HIGH", t["gaia-03"].manager_llm[2], "Formatting error", ["LC", "PQ"]),
        err("e5", "gaia-03", "MEDIUM", t["gaia-03"].search_llm[0][0], "Resource abuse", ["EE"]),
        err("e6", "gaia-05", "LOW", t["gaia-05"].manager_tools[0], "Incorrect tool arguments", ["TC"]),
        err("e7", "gaia-05", "HIGH", t["gaia-05"].manager_llm[3], "Goal deviation", ["PA"]),
        err("e8", "gaia-06", "MEDIUM", t["gaia-06"].manager_llm[0], "Poor plan", ["PQ"]),
    ]
    _jsonl(root / "annotations.jsonl", [a for a, _ in pairs])
    _jsonl(root / "mapping.jsonl", [m for _, m in pairs])

    def resp(tid, judge, score, cited=(), run=None, finding="made an error"):
        rec = {"trace_id": tid, "judge_id": judge, "text": verdict_text(score, cited, finding)}
        if run is not None:
            rec["run_index"] = run
        return rec

    responses = [
        resp("gaia-01", "TC", 1, [t["gaia-01"].manager_tools[0]], finding="passed a malformed argument"),
        resp("gaia-01", "PA", 2, [t["gaia-01"].manager_llm[0]], finding="skipped a planned step"),
        resp("gaia-01", "LC", 2, [t["gaia-01"].manager_llm[1]], run=0, finding="contradicted itself"),
        resp("gaia-01", "LC", 3, run=1),
        resp("gaia-02", "TS", 1, [t["gaia-02"].search_tools[0][1]], run=0, finding="picked the wrong tool"),
        resp("gaia-02", "TS", 2, [t["gaia-02"].search_tools[0][1]], run=1, finding="picked a weak tool"),
        resp("gaia-03", "LC", 0, [t["gaia-03"].manager_llm[2]], finding="ignored a formatting rule"),
        resp("gaia-03", "PQ", 2, finding="The plan is thin but workable."),
        resp("gaia-03", "EE", 1, [t["gaia-03"].search_llm[0][0]], finding="repeated the same search"),
        resp("gaia-04", "EE", 2, [t["gaia-04"].manager_llm[1]], finding="made a redundant call"),
        resp("gaia-05", "PA", 1, [t["gaia-05"].manager_llm[3]], finding="abandoned the plan"),
        resp("gaia-06", "PQ", 1, [t["gaia-06"].manager_llm[0]], run=0, finding="wrote a plan with no verification"),
        resp("gaia-06", "PQ", 0, [t["gaia-06"].manager_llm[0]], run=1, finding="wrote a plan with no verification"),
    ]
    _jsonl(root / "responses.jsonl", responses)

    human = [
        ("gaia-01", "TC", 1), ("gaia-01", "LC", 2), ("gaia-02", "TS", 1), ("gaia-03", "LC", 1),
        ("gaia-03", "EE", 1), ("gaia-04", "EE", 3), ("gaia-05", "PA", 0), ("gaia-05", "TC", 2),
        ("gaia-06", "PQ", 2), ("gaia-04", "LC", 3),
    ]
    _jsonl(root / "human_scores.jsonl", [{"trace_id": a, "judge_id": b, "score": c} for a, b, c in human])
    (root / "config.json").write_text(json.dumps({"replay": {"path": "recordings.jsonl"}}, indent=2) + "\n", encoding="utf-8", newline="\n")


def build_fixture(root: Path, quiet: bool = True) -> None:
    echo = (lambda _: None) if quiet else print
    root = Path(root)
    build_inputs(root)
    cmd_ingest(
        root / "traces", root / "annotations.jsonl", root / "mapping.jsonl", root, root / "human_scores.jsonl", echo=echo
    )
    cmd_split(root, 0.5, SPLIT_SEED, echo=echo)

    with tempfile.TemporaryDirectory() as tmp:
        mock = HarnessConfig(mock=MockConfig(responses=str(root / "responses.jsonl")))
        cmd_evaluate(root, mock, Path(tmp) / "mock", JUDGES, n_runs=N_RUNS, backend_mode="mock", echo=echo)
        # One record per line, sorted by key, so the file diff stays readable.
        recs = [json.loads(line) for line in (Path(tmp) / "mock" / "cache.jsonl").read_text().splitlines()]
        _jsonl(root / "recordings.jsonl", sorted(recs, key=lambda r: r["key"]))

        replay = HarnessConfig(replay=ReplayConfig(path=str(root / "recordings.jsonl")))
        result = cmd_evaluate(root, replay, Path(tmp) / "replay", JUDGES, n_runs=N_RUNS, backend_mode="replay", echo=echo)
        if result.exit_code:
            raise SystemExit(f"replay of fresh recordings failed with exit code {result.exit_code}")
        golden = root / "golden"
        if golden.exists():
            shutil.rmtree(golden)
        cmd_report(result.run_dir, replay, dataset=root, out=golden, echo=echo)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=str(Path(__file__).resolve().parent.parent / "fixtures" / "replay"))
    args = ap.parse_args()
    build_fixture(Path(args.root), quiet=False)


if __name__ == "__main__":
    main()

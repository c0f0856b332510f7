"""Acceptance suite: one or more tests per criterion, summarized at the end of the run."""

import json
import random
import sys
import time
from pathlib import Path

import pytest

from agent_gpa.config import HarnessConfig, MockConfig, ReplayConfig
from agent_gpa.harness import cmd_consistency, cmd_evaluate, cmd_report, cmd_split
from agent_gpa.judges import builtin_judges, bucket_score, control_flow_preamble, judge_by_id
from agent_gpa.metrics import ConfusionCounts, classification_metrics, krippendorff_alpha_interval
from agent_gpa.preprocess import (
    cited_line_spans,
    dedupe_history,
    process_trace,
    render_transcript,
    segment_agents,
    span_messages,
    split_dataset,
)
from agent_gpa.synthetic import agent_trace, verdict_text
from agent_gpa.trace_model import trace_from_dict

import oracles
from helpers import write_dataset, write_jsonl
from published_classification import ROWS

ROOT = Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "fixtures" / "replay"
quiet = {"echo": lambda _: None}


# --- 1 --------------------------------------------------------------------------


@pytest.mark.criterion(1, "F1/F2 reproduce every published (P, R) row within 5e-4")
def test_c1_published_f_scores():
    start = time.perf_counter()
    assert len(ROWS) == 96
    for criterion, impact, judge, split, p, r, f1, f2 in ROWS:
        tp, fp, fn = oracles.counts_for(p, r)
        m = classification_metrics(ConfusionCounts(tp=tp, fp=fp, fn=fn))
        where = (criterion, impact, judge, split)
        assert (m.precision is None) == (p is None), where
        if p is not None:
            assert abs(m.precision - float(p)) <= 5e-5 and abs(m.recall - float(r)) <= 5e-5, where
        for got, printed in ((m.f1, f1), (m.f2, f2)):
            if printed is None:
                assert got is None, where
            else:
                assert abs(got - float(printed)) <= 5e-4, (where, got, printed)
    assert time.perf_counter() - start < 1.0


@pytest.mark.criterion(1, "F1/F2 reproduce every published (P, R) row within 5e-4")
def test_c1_worked_example():
    # TC test row: P=0.8794, R=0.9688 -> F1 0.9219, F2 0.9495.
    tp, fp, fn = oracles.counts_for("0.8794", "0.9688")
    m = classification_metrics(ConfusionCounts(tp=tp, fp=fp, fn=fn))
    assert abs(m.f1 - 0.9219) <= 5e-4 and abs(m.f2 - 0.9495) <= 5e-4


# --- 2 --------------------------------------------------------------------------


@pytest.mark.criterion(2, "bucket_score over 0..3 is 0, 1, 1, 2")
def test_c2_bucketing():
    assert {s: bucket_score(s) for s in (0, 1, 2, 3)} == {0: 0, 1: 1, 2: 1, 3: 2}


# --- 3 --------------------------------------------------------------------------


def random_matrix(rng):
    raters, items = rng.randint(2, 5), rng.randint(3, 30)
    return [[None if rng.random() < 0.1 else rng.random() for _ in range(items)] for _ in range(raters)]


@pytest.mark.criterion(3, "Krippendorff alpha matches a brute-force oracle on 200 random matrices")
def test_c3_alpha_oracle():
    rng = random.Random(20240917)
    start = time.perf_counter()
    checked = 0
    for _ in range(200):
        matrix = random_matrix(rng)
        want = oracles.krippendorff_pairwise(matrix)
        if want is None:
            continue
        assert abs(krippendorff_alpha_interval(matrix) - want) <= 1e-9
        checked += 1
    assert checked >= 190
    assert time.perf_counter() - start < 5.0


@pytest.mark.criterion(3, "Krippendorff alpha matches a brute-force oracle on 200 random matrices")
def test_c3_identical_matrices():
    rng = random.Random(5)
    for _ in range(20):
        value = rng.random()
        items = rng.randint(3, 30)
        matrix = [[value] * items for _ in range(rng.randint(2, 5))]
        assert krippendorff_alpha_interval(matrix) == 1.0
    # Identical raters with variation across items.
    row = [rng.random() for _ in range(10)]
    assert krippendorff_alpha_interval([row, list(row), list(row)]) == 1.0


# --- 4 --------------------------------------------------------------------------


def four_trace_pipeline(root):
    traces = {tid: agent_trace(tid, manager_turns=2, search_agents=1) for tid in ("a", "b", "c", "d")}
    a, b, c, d = (traces[k] for k in "abcd")
    ann = [
        {"error_id": "e1", "trace_id": "a", "impact": "HIGH", "span_ids": [a.manager_llm[1]]},
        {"error_id": "e2", "trace_id": "b", "impact": "LOW", "span_ids": [b.manager_tools[0]]},
        {"error_id": "e3", "trace_id": "c", "impact": "MEDIUM", "span_ids": [c.manager_llm[0]]},
    ]
    mapping = [
        {"error_id": "e1", "judges": ["LC"]},
        {"error_id": "e2", "judges": ["TC"]},
        {"error_id": "e3", "judges": ["LC", "TC"]},
    ]
    human = [
        {"trace_id": "a", "judge_id": "LC", "score": 1},
        {"trace_id": "b", "judge_id": "LC", "score": 3},
        {"trace_id": "c", "judge_id": "LC", "score": 2},
        {"trace_id": "c", "judge_id": "TC", "score": 0},
        {"trace_id": "d", "judge_id": "TC", "score": 3},
    ]
    ds = write_dataset(root, [t.document for t in traces.values()], ann, mapping, human)
    member = root / "membership.json"
    member.write_text(json.dumps({"dev": ["a", "b"], "test": ["c", "d"]}))
    cmd_split(ds, membership=member, **quiet)

    scripted = [
        ("a", "LC", 1, [a.manager_llm[1]]),
        ("a", "TC", 3, []),
        ("b", "LC", 2, [b.manager_llm[0]]),
        ("b", "TC", 2, [b.manager_llm[0]]),
        ("c", "LC", 3, []),
        ("c", "TC", 0, [c.manager_llm[0]]),
        ("d", "LC", 3, []),
        ("d", "TC", 1, []),
    ]
    responses = [{"trace_id": t, "judge_id": j, "text": verdict_text(s, cited, "issue")} for t, j, s, cited in scripted]
    write_jsonl(root / "responses.jsonl", responses)
    cfg = HarnessConfig(mock=MockConfig(responses=str(root / "responses.jsonl"), default_response=None))
    result = cmd_evaluate(ds, cfg, root / "runs", ["LC", "TC"], **quiet)
    assert result.exit_code == 0 and result.verdicts == 8
    cmd_report(result.run_dir, cfg, **quiet)
    return result.run_dir


def cell(bundle, judge, impact, split="ALL"):
    row = next(r for r in bundle["coverage"] if (r["judge"], r["impact"], r["split"]) == (judge, impact, split))
    return (row["caught"]["num"], row["caught"]["den"]), (row["localized"]["num"], row["localized"]["den"])


@pytest.mark.criterion(4, "4-trace MOCK pipeline matches hand-enumerated tables, byte-identical reruns")
def test_c4_end_to_end(tmp_path):
    start = time.perf_counter()
    run_a = four_trace_pipeline(tmp_path / "one")
    run_b = four_trace_pipeline(tmp_path / "two")
    for name in ("report.json", "report.md"):
        assert (run_a / name).read_bytes() == (run_b / name).read_bytes()
    bundle = json.loads((run_a / "report.json").read_text())

    # Coverage and localization (AUTO matching makes them coincide).
    expected = {
        ("LC", "LOW"): (0, 0), ("LC", "MEDIUM"): (0, 1), ("LC", "HIGH"): (1, 1), ("LC", "ALL"): (1, 2),
        ("TC", "LOW"): (0, 1), ("TC", "MEDIUM"): (1, 1), ("TC", "HIGH"): (0, 0), ("TC", "ALL"): (1, 2),
        ("ALL", "LOW"): (0, 1), ("ALL", "MEDIUM"): (1, 1), ("ALL", "HIGH"): (1, 1), ("ALL", "ALL"): (2, 3),
    }
    for (judge, impact), want in expected.items():
        assert cell(bundle, judge, impact) == (want, want), (judge, impact)
    assert cell(bundle, "ALL", "ALL", "dev") == ((1, 2), (1, 2))
    assert cell(bundle, "ALL", "ALL", "test") == ((1, 1), (1, 1))

    cls = {(r["judge"], r["criterion"], r["impact"]): r for r in bundle["classification"]}
    counts = lambda r: (r["tp"], r["fp"], r["fn"], r["tn"])  # noqa: E731
    assert counts(cls[("LC", "CAUGHT", "ALL")]) == (1, 1, 1, 1)
    assert counts(cls[("TC", "CAUGHT", "ALL")]) == (2, 1, 0, 1)
    assert counts(cls[("LC", "LOCALIZED", "ALL")]) == (1, 1, 1, 1)
    assert counts(cls[("TC", "LOCALIZED", "ALL")]) == (1, 1, 1, 1)
    assert counts(cls[("LC", "CAUGHT", "HIGH")]) == (1, 1, 0, 2)
    tc = cls[("TC", "CAUGHT", "ALL")]
    assert tc["precision"] == pytest.approx(2 / 3) and tc["recall"] == 1.0
    assert tc["f1"] == pytest.approx(0.8) and tc["f2"] == pytest.approx(10 / 11)
    assert cls[("LC", "CAUGHT", "ALL")]["f1"] == pytest.approx(0.5)

    align = {r["judge"]: r for r in bundle["alignment"]}
    lc, tcr = align["LC"], align["TC"]
    assert (lc["n"], lc["acc_exact"], lc["acc_ob1"], lc["acc_3pt"], lc["acc_2pt"]) == (3, 1 / 3, 1.0, 1 / 3, 1.0)
    assert lc["nmae"] == pytest.approx(1 / 3) and lc["correlation"] == pytest.approx(0.5)
    assert (tcr["n"], tcr["acc_exact"], tcr["acc_ob1"], tcr["acc_3pt"], tcr["acc_2pt"]) == (2, 0.5, 0.5, 0.5, 1.0)
    assert tcr["nmae"] == pytest.approx(0.25) and tcr["correlation"] == pytest.approx(1.0)

    md = (run_a / "report.md").read_text()
    assert "| ALL | 1/2 (50.00%) | 1/1 (100.00%) | 2/3 (66.67%) |" in md
    assert "\r" not in md
    assert time.perf_counter() - start < 5.0


# --- 5 --------------------------------------------------------------------------


def consistency_dataset(root, scores):
    """``scores[trace][run]`` for judge LC; returns (dataset dir, config)."""
    traces = {tid: agent_trace(tid, manager_turns=2, search_agents=0) for tid in scores}
    ann = [{"error_id": f"e-{tid}", "trace_id": tid, "impact": "LOW", "span_ids": [t.manager_llm[0]]} for tid, t in traces.items()]
    mapping = [{"error_id": a["error_id"], "judges": ["LC"]} for a in ann]
    ds = write_dataset(root, [t.document for t in traces.values()], ann, mapping)
    responses = [
        {"trace_id": tid, "judge_id": j, "run_index": run, "text": verdict_text(score, [], "same rationale every run")}
        for tid, runs in scores.items()
        for run, score in enumerate(runs)
        for j in ("LC", "TC")
    ]
    write_jsonl(root / "responses.jsonl", responses)
    return ds, HarnessConfig(mock=MockConfig(responses=str(root / "responses.jsonl"), default_response=None))


@pytest.mark.criterion(5, "consistency: fixed scores give alpha 1, std 0, SCI 1; jitter matches the oracle")
def test_c5_fixed_scores(tmp_path):
    scores = {"t1": [0] * 5, "t2": [1] * 5, "t3": [3] * 5, "t4": [2] * 5}
    ds, cfg = consistency_dataset(tmp_path, scores)
    run = cmd_evaluate(ds, cfg, tmp_path / "runs", ["LC", "TC"], n_runs=5, **quiet)
    doc = cmd_consistency([run.run_dir], cfg, **quiet)
    for row in doc["reliability"]:
        assert row["runs"] == [0, 1, 2, 3, 4]
        assert (row["alpha"], row["avg_std"], row["sci"]) == (1.0, 0.0, pytest.approx(1.0, abs=1e-12))


@pytest.mark.criterion(5, "consistency: fixed scores give alpha 1, std 0, SCI 1; jitter matches the oracle")
def test_c5_jittered_scores(tmp_path):
    scores = {"t1": [0, 1, 0, 0, 1], "t2": [2, 2, 3, 2, 1], "t3": [3, 3, 3, 2, 3], "t4": [1, 0, 2, 1, 1]}
    ds, cfg = consistency_dataset(tmp_path, scores)
    run = cmd_evaluate(ds, cfg, tmp_path / "runs", ["LC", "TC"], n_runs=5, **quiet)
    doc = cmd_consistency([run.run_dir], cfg, **quiet)
    matrix = [[scores[t][r] / 3 for t in sorted(scores)] for r in range(5)]
    want_alpha = oracles.krippendorff_pairwise(matrix)
    want_std, want_ci = oracles.dispersion(matrix)
    for row in doc["reliability"]:
        assert abs(row["alpha"] - want_alpha) <= 1e-9
        assert abs(row["avg_std"] - want_std) <= 1e-9
        assert abs(row["ci95_halfwidth"] - want_ci) <= 1e-9
    assert want_alpha < 1.0


# --- 6 --------------------------------------------------------------------------


@pytest.mark.criterion(6, "dedupe shrinks replayed history below 60%, is idempotent, span ids resolve")
def test_c6_preprocessing():
    synthetic = agent_trace("dup", manager_turns=6, search_agents=2, search_turns=3, payload_chars=400)
    trace = trace_from_dict(synthetic.document)
    naive = "\n".join(content for s in trace.spans for _, content in span_messages(s))
    text = render_transcript(process_trace(trace, None), None)
    assert len(text) < 0.6 * len(naive), (len(text), len(naive))

    once = dedupe_history(segment_agents(trace))
    assert dedupe_history(once) == once

    ids = cited_line_spans(text)
    body = [line for line in text.splitlines() if line.startswith("[span ")]
    assert body and len(ids) >= 1
    assert set(ids) <= trace.span_ids
    for line in body:
        assert line[len("[span ") : line.index("]")] in trace.span_ids


# --- 7 --------------------------------------------------------------------------


@pytest.mark.criterion(7, "117 ids at ratio 0.5 split 58/59, identical across repeats")
def test_c7_split_determinism():
    ids = [f"trace-{i:03d}" for i in range(117)]
    dev, test = split_dataset(ids, 0.5, 42)
    assert (len(dev), len(test)) == (58, 59)
    assert split_dataset(ids, 0.5, 42) == (dev, test)
    assert [split_dataset(ids, 0.5, 42) for _ in range(3)] == [(dev, test)] * 3


# --- 8 --------------------------------------------------------------------------


@pytest.mark.criterion(8, "builtin prompts carry the verbatim anchor strings")
def test_c8_prompt_anchors():
    specs = judge_by_id(builtin_judges())
    assert "LOGICAL CONSISTENCY evaluator" in specs["LC"].base_prompt
    assert "PLAN ADHERENCE evaluator" in specs["PA"].base_prompt
    assert all("Supporting Evidence:" in s.base_prompt for s in specs.values())
    assert "delegates tasks to a search_agent" in control_flow_preamble()


# --- 9 --------------------------------------------------------------------------


@pytest.mark.criterion(9, "replay fixture reproduces the committed golden report exactly")
def test_c9_replay_golden(tmp_path):
    cfg = HarnessConfig(replay=ReplayConfig(path=str(FIXTURE / "recordings.jsonl")))
    manifest = json.loads((FIXTURE / "golden" / "report.json").read_text())["provenance"]["manifest"]
    result = cmd_evaluate(
        FIXTURE, cfg, tmp_path / "runs", manifest["judges"], n_runs=manifest["n_runs"], backend_mode="replay", **quiet
    )
    assert result.exit_code == 0 and not result.invalid and result.backend_calls == result.verdicts
    cmd_report(result.run_dir, cfg, dataset=FIXTURE, out=tmp_path / "out", **quiet)
    for name in ("report.json", "report.md"):
        assert (tmp_path / "out" / name).read_bytes() == (FIXTURE / "golden" / name).read_bytes(), name


@pytest.mark.criterion(9, "replay fixture reproduces the committed golden report exactly")
def test_c9_golden_tables_are_audit_ready():
    bundle = json.loads((FIXTURE / "golden" / "report.json").read_text())
    union = [r for r in bundle["coverage"] if r["judge"] == "ALL" and r["split"] == "ALL"]
    assert [r["impact"] for r in union] == ["LOW", "MEDIUM", "HIGH", "ALL"]
    for r in union:
        for key in ("caught", "localized"):
            assert set(r[key]) == {"num", "den", "rate"}
    totals = bundle["provenance"]["error_totals"]
    assert union[-1]["caught"]["den"] == totals["ALL"] == 8


@pytest.mark.criterion(9, "replay fixture reproduces the committed golden report exactly")
def test_c9_fixture_regenerates_identically(tmp_path):
    sys.path.insert(0, str(ROOT / "scripts"))
    try:
        from make_replay_fixture import build_fixture
    finally:
        sys.path.pop(0)
    build_fixture(tmp_path / "replay")
    for name in ("recordings.jsonl", "golden/report.json", "golden/report.md", "dataset.json", "split.json"):
        assert (tmp_path / "replay" / name).read_bytes() == (FIXTURE / name).read_bytes(), name

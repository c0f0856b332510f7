import json
from pathlib import Path

import pytest

from agent_gpa.cli import main
from agent_gpa.config import BackendConfig, HarnessConfig, MockConfig, ReplayConfig
from agent_gpa.errors import DatasetMismatch, ValidationFailure
from agent_gpa.harness import (
    EXIT_BACKEND_EXHAUSTED,
    EXIT_REPLAY_GAP,
    cmd_compare,
    cmd_consistency,
    cmd_evaluate,
    cmd_ingest,
    cmd_report,
    cmd_split,
)
from agent_gpa.report import format_fraction
from agent_gpa.store import Dataset
from agent_gpa.synthetic import agent_trace, verdict_text

from helpers import write_dataset, write_jsonl

quiet = {"echo": lambda _: None}


def synthetic(n):
    return {f"t{i}": agent_trace(f"t{i}", manager_turns=2, search_agents=1) for i in range(n)}


def simple_dataset(tmp_path, n=2, responses=None):
    traces = synthetic(n)
    ann = [
        {"error_id": f"e{i}", "trace_id": tid, "impact": "HIGH", "span_ids": [st.manager_llm[0]]}
        for i, (tid, st) in enumerate(traces.items())
    ]
    mapping = [{"error_id": a["error_id"], "judges": ["LC"]} for a in ann]
    ds = write_dataset(tmp_path, [st.document for st in traces.values()], ann, mapping)
    return ds, traces


def lines(path):
    return [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]


# --- ingest / split ----------------------------------------------------------


def test_ingest_rejects_unknown_span_naming_the_error(tmp_path):
    traces = synthetic(1)
    ann = [{"error_id": "bad-7", "trace_id": "t0", "impact": "LOW", "span_ids": ["nope"]}]
    with pytest.raises(ValidationFailure) as info:
        write_dataset(tmp_path, [traces["t0"].document], ann, [{"error_id": "bad-7", "judges": ["TC"]}])
    assert any("bad-7" in d and "nope" in d for d in info.value.diagnostics)
    assert not (tmp_path / "ds" / "dataset.json").exists()


def test_ingest_requires_a_mapping_for_every_error(tmp_path):
    traces = synthetic(1)
    ann = [{"error_id": "e1", "trace_id": "t0", "impact": "LOW", "span_ids": [traces["t0"].manager_llm[0]]}]
    with pytest.raises(ValidationFailure, match="e1"):
        write_dataset(tmp_path, [traces["t0"].document], ann, [])


def test_ingest_checks_human_scores(tmp_path):
    ds_dir = tmp_path / "x"
    with pytest.raises(ValidationFailure, match="ghost"):
        write_dataset(ds_dir, [synthetic(1)["t0"].document], [], [], human_scores=[{"trace_id": "ghost", "judge_id": "LC", "score": 2}])


def test_ingest_index_and_totals(tmp_path):
    ds, _ = simple_dataset(tmp_path, 3)
    index = json.loads((ds / "dataset.json").read_text())
    assert [t["trace_id"] for t in index["traces"]] == ["t0", "t1", "t2"]
    assert index["error_totals"]["HIGH"] == 3
    assert Dataset.open(ds).digest == index["digest"]


def test_split_single_trace_and_membership_override(tmp_path):
    ds, _ = simple_dataset(tmp_path, 1)
    doc = cmd_split(ds, 0.5, 0, **quiet)
    assert (doc["dev"], doc["test"]) == ([], ["t0"])
    ds3, _ = simple_dataset(tmp_path / "b", 3)
    member = tmp_path / "m.json"
    member.write_text(json.dumps({"dev": ["t2"], "test": ["t0", "t1"]}))
    cmd_split(ds3, membership=member, **quiet)
    assert Dataset.open(ds3).select("dev") == ["t2"]
    member.write_text(json.dumps({"dev": ["t9"], "test": []}))
    with pytest.raises(ValidationFailure):
        cmd_split(ds3, membership=member, **quiet)


def test_split_before_ingest_select_needs_split(tmp_path):
    ds, _ = simple_dataset(tmp_path, 2)
    with pytest.raises(DatasetMismatch):
        Dataset.open(ds).select("dev")
    assert Dataset.open(ds).select("all") == ["t0", "t1"]


# --- evaluate ------------------------------------------------------------------


def test_evaluate_writes_one_line_per_call_and_resumes(tmp_path):
    ds, _ = simple_dataset(tmp_path, 2)
    out = tmp_path / "runs"
    first = cmd_evaluate(ds, HarnessConfig(), out, ["LC", "TC"], **quiet)
    assert (first.verdicts, first.backend_calls, first.exit_code) == (4, 4, 0)
    total = sum(len(lines(p)) for p in first.run_dir.glob("verdicts-*.jsonl"))
    assert total == 4
    rec = lines(first.run_dir / "verdicts-LC.jsonl")[0]
    assert {"content_hash", "score_raw", "trace_id", "run_index"} <= set(rec)

    again = cmd_evaluate(ds, HarnessConfig(), out, ["LC", "TC"], **quiet)
    assert (again.verdicts, again.skipped, again.backend_calls) == (0, 4, 0)
    assert again.run_dir == first.run_dir


def test_evaluate_rejects_changed_manifest_under_same_run_id(tmp_path):
    ds, _ = simple_dataset(tmp_path, 2)
    cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], run_id="r", **quiet)
    with pytest.raises(DatasetMismatch):
        cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["TC"], run_id="r", **quiet)


def test_replay_gap_exit_code(tmp_path):
    ds, _ = simple_dataset(tmp_path, 2)
    rec = tmp_path / "rec.jsonl"
    rec.write_text("")
    cfg = HarnessConfig(replay=ReplayConfig(path=str(rec)))
    result = cmd_evaluate(ds, cfg, tmp_path / "runs", ["LC"], backend_mode="replay", **quiet)
    assert result.exit_code == EXIT_REPLAY_GAP
    assert len(result.invalid) == 2 and result.verdicts == 0
    assert not (tmp_path / "runs" / "cache.jsonl").exists()


def test_backend_exhausted_exit_code(tmp_path):
    ds, _ = simple_dataset(tmp_path, 1)
    cfg = HarnessConfig(
        backend=BackendConfig(retry_cap=2, backoff_base_ms=0, backoff_max_ms=0), mock=MockConfig(fail_first=99)
    )
    result = cmd_evaluate(ds, cfg, tmp_path / "runs", ["LC"], **quiet)
    assert result.exit_code == EXIT_BACKEND_EXHAUSTED
    assert result.invalid[0].error == "BackendExhausted"


def test_unparseable_response_is_recorded_as_invalid(tmp_path):
    ds, _ = simple_dataset(tmp_path, 1)
    cfg = HarnessConfig(mock=MockConfig(default_response="I refuse to score."))
    result = cmd_evaluate(ds, cfg, tmp_path / "runs", ["LC"], **quiet)
    assert result.exit_code == 0 and result.invalid[0].error == "MissingScore"
    bundle = cmd_report(result.run_dir, cfg, **quiet)
    assert bundle["invalid_runs"][0]["error"] == "MissingScore"
    assert bundle["provenance"]["unscored_traces"] == ["t0"]


def test_dump_transcripts(tmp_path):
    ds, traces = simple_dataset(tmp_path, 1)
    cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], dump_transcripts=tmp_path / "tx", **quiet)
    text = (tmp_path / "tx" / "t0.txt").read_text()
    assert text.startswith("TRACE t0") and f"[span {traces['t0'].manager_llm[0]}]" in text


# --- report ------------------------------------------------------------------


def test_fraction_format():
    assert format_fraction(19, 20) == "19/20 (95.00%)"
    assert format_fraction(4, 4) == "4/4 (100.00%)"
    assert format_fraction(0, 0) == "0/0 (n/a)"
    assert format_fraction(1, 3) == "1/3 (33.33%)"


def six_error_case(tmp_path):
    """Six errors over three traces with hand-scripted judge outputs."""
    traces = {f"t{i}": agent_trace(f"t{i}", manager_turns=3, search_agents=1) for i in range(3)}
    t0, t1, t2 = traces["t0"], traces["t1"], traces["t2"]
    errors = [
        ("e1", "t0", "HIGH", t0.manager_llm[0], ["LC"]),
        ("e2", "t0", "LOW", t0.manager_tools[0], ["TC", "TS"]),
        ("e3", "t1", "MEDIUM", t1.manager_llm[1], ["PA"]),
        ("e4", "t1", "HIGH", t1.search_llm[0][0], ["EE", "LC"]),
        ("e5", "t2", "LOW", t2.manager_llm[2], ["LC"]),
        ("e6", "t2", "MEDIUM", t2.manager_tools[0], ["TC"]),
    ]
    ann = [{"error_id": e, "trace_id": t, "impact": imp, "span_ids": [s]} for e, t, imp, s, _ in errors]
    mapping = [{"error_id": e, "judges": js} for e, _, _, _, js in errors]
    # (trace, judge) -> (score, cited spans)
    scripted = {
        ("t0", "LC"): (1, [t0.manager_llm[0]]),  # e1 caught and localized
        ("t0", "TS"): (2, [t0.manager_tools[0]]),  # e2 caught via TS
        ("t1", "PA"): (3, [t1.manager_llm[1]]),  # perfect score: e3 missed
        ("t1", "EE"): (1, [t1.manager_llm[0]]),  # flags, wrong span: e4 missed
        ("t1", "LC"): (0, [t1.search_llm[0][0]]),  # e4 caught via LC
        ("t2", "TC"): (1, [t2.manager_tools[0], t2.manager_llm[0]]),  # e6 caught
    }
    responses = [{"trace_id": t, "judge_id": j, "text": verdict_text(s, c, "problem")} for (t, j), (s, c) in scripted.items()]
    ds = write_dataset(tmp_path, [st.document for st in traces.values()], ann, mapping)
    write_jsonl(tmp_path / "responses.jsonl", responses)
    return ds, errors, scripted


def test_report_six_error_enumeration(tmp_path):
    ds, errors, scripted = six_error_case(tmp_path)
    cfg = HarnessConfig(mock=MockConfig(responses=str(tmp_path / "responses.jsonl")))
    judges = ["LC", "EE", "PA", "TS", "TC"]
    result = cmd_evaluate(ds, cfg, tmp_path / "runs", judges, **quiet)
    bundle = cmd_report(result.run_dir, cfg, **quiet)

    # Oracle: enumerate each (error, mapped judge) and apply the matching rule by hand.
    def hit(error, judge):
        score, cited = scripted.get((error[1], judge), (3, []))
        return score < 3 and error[3] in cited

    for judge in judges + ["ALL"]:
        for impact in ("LOW", "MEDIUM", "HIGH", "ALL"):
            scoped = [e for e in errors if impact in ("ALL", e[2]) and (judge == "ALL" or judge in e[4])]
            caught = sum(any(hit(e, j) for j in e[4] if judge in ("ALL", j)) for e in scoped)
            row = next(r for r in bundle["coverage"] if (r["judge"], r["impact"], r["split"]) == (judge, impact, "ALL"))
            assert (row["caught"]["num"], row["caught"]["den"]) == (caught, len(scoped)), (judge, impact)
            assert row["localized"] == row["caught"]
    union = next(r for r in bundle["coverage"] if (r["judge"], r["impact"], r["split"]) == ("ALL", "ALL", "ALL"))
    assert (union["caught"]["num"], union["caught"]["den"]) == (4, 6)
    md = (result.run_dir / "report.md").read_text()
    assert "| ALL | 4/6 (66.67%) |" in md


def test_report_saturated_coverage(tmp_path):
    traces = synthetic(2)
    ann, responses = [], []
    for i, (tid, st) in enumerate(traces.items()):
        ann.append({"error_id": f"e{i}", "trace_id": tid, "impact": "MEDIUM", "span_ids": [st.manager_tools[0]]})
        responses.append({"trace_id": tid, "judge_id": "TC", "text": verdict_text(0, [st.manager_tools[0]], "bad")})
    mapping = [{"error_id": a["error_id"], "judges": ["TC"]} for a in ann]
    ds = write_dataset(tmp_path, [st.document for st in traces.values()], ann, mapping)
    write_jsonl(tmp_path / "r.jsonl", responses)
    cfg = HarnessConfig(mock=MockConfig(responses=str(tmp_path / "r.jsonl")))
    result = cmd_evaluate(ds, cfg, tmp_path / "runs", ["TC"], **quiet)
    cmd_report(result.run_dir, cfg, **quiet)
    md = (result.run_dir / "report.md").read_text()
    assert "| MEDIUM | 2/2 (100.00%) |" in md
    assert "| LOW | 0/0 (n/a) |" in md


def test_adjudicated_matching_via_skeleton(tmp_path):
    ds, errors, _ = six_error_case(tmp_path)
    cfg = HarnessConfig(mock=MockConfig(responses=str(tmp_path / "responses.jsonl")))
    result = cmd_evaluate(ds, cfg, tmp_path / "runs", ["LC", "EE", "PA", "TS", "TC"], **quiet)
    skel = tmp_path / "adj.jsonl"
    cmd_report(result.run_dir, cfg, skeleton=skel, **quiet)
    entries = lines(skel)
    for e in entries:
        if (e["error_id"], e["judge_id"]) == ("e3", "PA"):
            e["identified"], e["localized"] = True, False
    write_jsonl(skel, entries)
    bundle = cmd_report(result.run_dir, cfg, matching="adjudicated", adjudication=skel, **quiet)
    union = next(r for r in bundle["coverage"] if (r["judge"], r["impact"], r["split"]) == ("ALL", "ALL", "ALL"))
    assert (union["caught"]["num"], union["localized"]["num"]) == (5, 4)
    assert "ADJUDICATED" in (result.run_dir / "report.md").read_text()


# --- consistency / compare ---------------------------------------------------------


def test_consistency_needs_two_runs(tmp_path):
    ds, _ = simple_dataset(tmp_path, 2)
    result = cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], **quiet)
    doc = cmd_consistency([result.run_dir], HarnessConfig(), out=tmp_path / "c", **quiet)
    assert "2 runs" in doc["reliability"][0]["note"]
    assert (tmp_path / "c" / "consistency.json").exists()


def test_consistency_pools_run_stores(tmp_path):
    ds, _ = simple_dataset(tmp_path, 3)
    a = cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], run_id="a", **quiet)
    b = cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], run_id="b", seed=1, **quiet)
    doc = cmd_consistency([a.run_dir, b.run_dir], HarnessConfig(), **quiet)
    row = doc["reliability"][0]
    assert row["runs"] == [0, 1] and row["alpha"] == 1.0 and row["avg_std"] == 0.0


def test_compare_with_itself_and_across_splits(tmp_path):
    ds, _ = simple_dataset(tmp_path, 4)
    cmd_split(ds, 0.5, 3, **quiet)
    dev = cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], split="dev", **quiet)
    test = cmd_evaluate(ds, HarnessConfig(), tmp_path / "runs", ["LC"], split="test", **quiet)
    cmd_report(dev.run_dir, HarnessConfig(), **quiet)
    cmd_report(test.run_dir, HarnessConfig(), **quiet)
    cmp = cmd_compare(dev.run_dir, dev.run_dir, out=tmp_path / "cmp", **quiet)
    assert len(cmp["rows"]) == 4
    assert all(r[k]["delta_num"] == 0 and r[k]["delta_rate"] in (0.0, None) for r in cmp["rows"] for k in ("caught", "localized"))
    assert (tmp_path / "cmp" / "compare.md").exists()
    with pytest.raises(DatasetMismatch):
        cmd_compare(dev.run_dir, test.run_dir, **quiet)


# --- CLI -------------------------------------------------------------------------


def test_cli_end_to_end_and_exit_codes(tmp_path, capsys):
    traces = synthetic(2)
    tdir = tmp_path / "traces"
    tdir.mkdir()
    for tid, st in traces.items():
        (tdir / f"{tid}.json").write_text(json.dumps(st.document))
    ann = write_jsonl(
        tmp_path / "a.jsonl",
        [{"error_id": "e1", "trace_id": "t0", "impact": "HIGH", "span_ids": [traces["t0"].manager_llm[0]]}],
    )
    mp = write_jsonl(tmp_path / "m.jsonl", [{"error_id": "e1", "judges": ["LC"]}])
    ds = tmp_path / "ds"
    base = ["--traces", str(tdir), "--annotations", str(ann), "--mapping", str(mp), "--out", str(ds)]
    assert main(["ingest", *base]) == 0
    assert main(["split", "--dataset", str(ds), "--ratio", "0.5", "--seed", "1"]) == 0
    runs = tmp_path / "runs"
    assert main(["evaluate", "--dataset", str(ds), "--judges", "LC,TC", "--runs", "2", "--out", str(runs), "--run-id", "r1"]) == 0
    assert main(["report", "--run", str(runs / "r1")]) == 0
    assert (runs / "r1" / "report.md").exists()
    assert main(["consistency", "--run", str(runs / "r1")]) == 0
    assert main(["compare", str(runs / "r1"), str(runs / "r1")]) == 0

    assert main(["evaluate", "--dataset", str(ds), "--judges", "LC,XX", "--out", str(runs)]) == 2
    bad = write_jsonl(tmp_path / "bad.jsonl", [{"error_id": "e1", "trace_id": "t0", "impact": "HUGE", "span_ids": ["x"]}])
    assert main(["ingest", *base[:2], "--annotations", str(bad), *base[4:]]) == 2
    cfg = tmp_path / "cfg.json"
    (tmp_path / "empty.jsonl").write_text("")
    cfg.write_text(json.dumps({"replay": {"path": "empty.jsonl"}}))
    assert main(["evaluate", "--config", str(cfg), "--dataset", str(ds), "--judges", "LC", "--backend", "replay", "--out", str(runs)]) == 4
    cfg.write_text(json.dumps({"mock": {"fail_first": 9}, "backend": {"retry_cap": 1, "backoff_base_ms": 0}}))
    assert main(["evaluate", "--config", str(cfg), "--dataset", str(ds), "--judges", "LC", "--out", str(tmp_path / "r3")]) == 3
    cfg.write_text(json.dumps({"backend": {"parallelism": 0}}))
    assert main(["evaluate", "--config", str(cfg), "--dataset", str(ds)]) == 2
    assert main(["report", "--run", str(tmp_path / "missing")]) == 1
    err = capsys.readouterr().err
    assert "XX" in err and "HUGE" in err

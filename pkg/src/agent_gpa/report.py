"""Assemble the report bundle and render it as JSON and markdown.

Every number in the bundle is stored next to the counts it was computed
from, so a reader can recompute any cell from the verdict store.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import DatasetMismatch, GpaError, InsufficientData, ZeroVector
from .judges import JudgeVerdict, rationale
from .matching import UNION_JUDGE, CoverageCell, MatchMode, MatchRecord, coverage_counts
from .metrics import (
    Criterion,
    Embedder,
    Unit,
    alignment_report,
    build_confusion,
    classification_metrics,
    ratings_matrix,
    reliability_report,
)
from .trace_model import IMPACT_ORDER, AnnotatedError, GpaMapping

ALL = "ALL"
IMPACT_LABELS = [i.value for i in IMPACT_ORDER] + [ALL]
NA = "n/a"


def fraction(num: int, den: int) -> dict[str, Any]:
    return {"num": num, "den": den, "rate": num / den if den else None}


def format_fraction(num: int, den: int) -> str:
    """``19/20 (95.00%)``; an empty denominator renders as ``0/0 (n/a)``."""
    if not den:
        return f"{num}/{den} ({NA})"
    return f"{num}/{den} ({100.0 * num / den:.2f}%)"


def format_metric(value: float | None, digits: int = 4) -> str:
    return NA if value is None else f"{value:.{digits}f}"


def _cell_text(cell: Mapping[str, Any]) -> str:
    return format_fraction(cell["num"], cell["den"])


# ---------------------------------------------------------------------------
# building


@dataclass
class ReportInputs:
    run_id: str
    manifest: dict[str, Any]
    judges: list[str]
    trace_ids: list[str]
    errors: list[AnnotatedError]
    mappings: list[GpaMapping]
    verdicts: dict[str, list[JudgeVerdict]]
    records: list[MatchRecord]
    matching: MatchMode = MatchMode.AUTO
    unit: Unit = Unit.TRACE_JUDGE
    run_index: int = 0
    split_of: dict[str, str] = field(default_factory=dict)
    general_judges: list[str] = field(default_factory=list)
    human_scores: dict[tuple[str, str], int] = field(default_factory=dict)
    embedder: Embedder | None = None
    invalid: list[dict[str, Any]] = field(default_factory=list)
    verdict_digests: dict[str, str] = field(default_factory=dict)


def coverage_rows(
    records: Sequence[MatchRecord],
    mappings: Sequence[GpaMapping],
    errors: Sequence[AnnotatedError],
    judges: Sequence[str],
    split_of: Mapping[str, str],
    general_judges: Iterable[str] = (),
) -> list[dict[str, Any]]:
    """One row per (judge or ALL) x (impact or ALL) x (split or ALL), zero rows included."""
    general = list(general_judges)
    cells: dict[tuple[str, str, str], CoverageCell] = {}
    layouts = {
        ("judge", "impact", "split"): lambda k: (k[0], k[1], k[2]),
        ("judge", "impact"): lambda k: (k[0], k[1], ALL),
        ("judge", "split"): lambda k: (k[0], ALL, k[1]),
        ("judge",): lambda k: (k[0], ALL, ALL),
    }
    for group_by, to_key in layouts.items():
        table = coverage_counts(
            records, mappings, errors, group_by=group_by, split_of=split_of, judges=judges, general_judges=general
        )
        for key, cell in table.items():
            cells[to_key(key)] = cell

    splits = sorted({split_of[e.trace_id] for e in errors if e.trace_id in split_of})
    split_labels = [s for s in splits if s != ALL] + [ALL]
    rows = []
    for judge in [*judges, UNION_JUDGE]:
        for impact in IMPACT_LABELS:
            for split in split_labels:
                cell = cells.get((judge, impact, split), CoverageCell())
                rows.append(
                    {
                        "judge": judge,
                        "impact": impact,
                        "split": split,
                        "caught": fraction(cell.caught, cell.total),
                        "localized": fraction(cell.localized, cell.total),
                    }
                )
    return rows


def scored_traces(inp: ReportInputs, run_verdicts: list[JudgeVerdict]) -> list[str]:
    """Traces with at least one valid verdict in the reported run."""
    seen = {v.trace_id for v in run_verdicts}
    return [t for t in inp.trace_ids if t in seen]


def classification_rows(inp: ReportInputs, run_verdicts: list[JudgeVerdict]) -> list[dict[str, Any]]:
    # Traces whose every call failed have no prediction to classify.
    scored = scored_traces(inp, run_verdicts)
    rows = []
    for criterion in (Criterion.CAUGHT, Criterion.LOCALIZED):
        per_impact = {
            impact: build_confusion(
                run_verdicts,
                inp.errors,
                inp.mappings,
                scored,
                inp.judges,
                unit=inp.unit,
                criterion=criterion,
                impact=impact,
                records=inp.records,
                general_judges=inp.general_judges,
            )
            for impact in [*IMPACT_ORDER, None]
        }
        for judge in inp.judges:
            for impact, counts in per_impact.items():
                c = counts[judge]
                rows.append(
                    {
                        "judge": judge,
                        "criterion": criterion.value,
                        "impact": impact.value if impact else ALL,
                        "unit": inp.unit.value,
                        "tp": c.tp,
                        "fp": c.fp,
                        "fn": c.fn,
                        "tn": c.tn,
                        **asdict(classification_metrics(c)),
                    }
                )
    return rows


def alignment_rows(inp: ReportInputs, run_verdicts: list[JudgeVerdict]) -> list[dict[str, Any]]:
    if not inp.human_scores:
        return []
    scope = set(inp.trace_ids)
    rows = []
    for judge in inp.judges:
        pairs = []
        for v in sorted(run_verdicts, key=lambda v: v.trace_id):
            if v.judge_id != judge or v.trace_id not in scope:
                continue
            human = inp.human_scores.get((v.trace_id, judge))
            if human is not None:
                pairs.append({"trace_id": v.trace_id, "human": human, "judge": v.score_raw})
        row: dict[str, Any] = {"judge": judge, "pairs": pairs, "n": len(pairs)}
        if pairs:
            rep = alignment_report([p["human"] for p in pairs], [p["judge"] for p in pairs])
            row.update(asdict(rep))
        rows.append(row)
    return rows


def reliability_rows(inp: ReportInputs) -> list[dict[str, Any]]:
    rows = []
    for judge in inp.judges:
        verdicts = [v for v in inp.verdicts.get(judge, []) if v.trace_id in set(inp.trace_ids)]
        runs = sorted({v.run_index for v in verdicts})
        row: dict[str, Any] = {"judge": judge, "runs": runs}
        if len(runs) < 2:
            row["note"] = "needs at least 2 runs"
            rows.append(row)
            continue
        matrix = ratings_matrix(verdicts, inp.trace_ids, runs)
        embeddings = None
        if inp.embedder is not None:
            by_trace: dict[str, list[list[float]]] = {}
            for v in sorted(verdicts, key=lambda v: (v.trace_id, v.run_index)):
                by_trace.setdefault(v.trace_id, []).append(inp.embedder.embed(rationale(v)))
            embeddings = [by_trace[t] for t in inp.trace_ids if t in by_trace]
        try:
            rep = reliability_report(matrix, embeddings)
        except ZeroVector:
            rep = reliability_report(matrix, None)
            row["note"] = "SCI skipped: a rationale embedded to the zero vector"
        except InsufficientData as exc:
            row["note"] = str(exc)
            rows.append(row)
            continue
        row.update({k: v for k, v in asdict(rep).items() if k != "note" or v})
        row["matrix"] = matrix
        rows.append(row)
    return rows


def build_report(inp: ReportInputs) -> dict[str, Any]:
    run_verdicts = [
        v for judge in inp.judges for v in inp.verdicts.get(judge, []) if v.run_index == inp.run_index
    ]
    totals = {label: 0 for label in IMPACT_LABELS}
    for e in inp.errors:
        totals[e.impact.value] += 1
        totals[ALL] += 1
    return {
        "provenance": {
            "run_id": inp.run_id,
            "manifest": inp.manifest,
            "matching_mode": inp.matching.value,
            "confusion_unit": inp.unit.value,
            "run_index": inp.run_index,
            "judges": list(inp.judges),
            "general_judges": list(inp.general_judges),
            "n_traces": len(inp.trace_ids),
            "unscored_traces": [t for t in inp.trace_ids if t not in set(scored_traces(inp, run_verdicts))],
            "error_totals": totals,
            "verdict_digests": dict(sorted(inp.verdict_digests.items())),
        },
        "coverage": coverage_rows(
            inp.records, inp.mappings, inp.errors, inp.judges, inp.split_of, inp.general_judges
        ),
        "classification": classification_rows(inp, run_verdicts),
        "alignment": alignment_rows(inp, run_verdicts),
        "reliability": reliability_rows(inp),
        "invalid_runs": inp.invalid,
    }


def report_json(bundle: Mapping[str, Any]) -> str:
    return json.dumps(bundle, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# markdown


def _table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def _coverage_index(bundle: Mapping[str, Any]) -> dict[tuple[str, str, str], dict[str, Any]]:
    return {(r["judge"], r["impact"], r["split"]): r for r in bundle["coverage"]}


def _splits(bundle: Mapping[str, Any]) -> list[str]:
    seen = sorted({r["split"] for r in bundle["coverage"]} - {ALL})
    return seen + [ALL]


def render_markdown(bundle: Mapping[str, Any]) -> str:
    prov = bundle["provenance"]
    cov = _coverage_index(bundle)
    splits = _splits(bundle)
    judges = prov["judges"]
    out = [f"# Agent GPA report: {prov['run_id']}", ""]
    out += [
        f"- matching mode: {prov['matching_mode']}"
        + (" (span-overlap lower bound)" if prov["matching_mode"] == MatchMode.AUTO.value else ""),
        f"- judges: {', '.join(judges)}",
        f"- traces: {prov['n_traces']}; run index: {prov['run_index']}",
        f"- model: {prov['manifest'].get('model_id', '')}; backend: {prov['manifest'].get('backend', '')}",
    ]
    if prov.get("unscored_traces"):
        out.append(f"- left out of classification (no valid verdict): {', '.join(prov['unscored_traces'])}")
    out.append("")

    for title, key in (("Error identification coverage", "caught"), ("Error localization", "localized")):
        out += [f"## {title} by impact (all judges)", ""]
        out += _table(
            ["Impact", *splits],
            ([impact, *(_cell_text(cov[(UNION_JUDGE, impact, s)][key]) for s in splits)] for impact in IMPACT_LABELS),
        )
        out.append("")

    out += ["## Per-judge coverage", ""]
    out += _table(
        ["Judge", *(f"{i} caught" for i in IMPACT_LABELS), f"{ALL} localized"],
        (
            [
                j,
                *(_cell_text(cov[(j, i, ALL)]["caught"]) for i in IMPACT_LABELS),
                _cell_text(cov[(j, ALL, ALL)]["localized"]),
            ]
            for j in judges
        ),
    )
    out.append("")

    for criterion in (Criterion.CAUGHT.value, Criterion.LOCALIZED.value):
        rows = [r for r in bundle["classification"] if r["criterion"] == criterion]
        if not rows:
            continue
        out += [f"## Classification ({criterion.lower()}, unit {rows[0]['unit']})", ""]
        out += _table(
            ["Judge", "Impact", "TP", "FP", "FN", "TN", "Precision", "Recall", "F1", "F2"],
            (
                [
                    r["judge"],
                    r["impact"],
                    *(str(r[k]) for k in ("tp", "fp", "fn", "tn")),
                    *(format_metric(r[k]) for k in ("precision", "recall", "f1", "f2")),
                ]
                for r in rows
            ),
        )
        out.append("")

    if bundle["alignment"]:
        out += ["## Alignment with human scores", ""]
        out += _table(
            ["Judge", "n", "Acc", "Acc +/-1", "Acc 3-pt", "Acc 2-pt", "Pearson r", "NMAE"],
            (
                [
                    r["judge"],
                    str(r["n"]),
                    *(
                        format_metric(r.get(k))
                        for k in ("acc_exact", "acc_ob1", "acc_3pt", "acc_2pt", "correlation", "nmae")
                    ),
                ]
                for r in bundle["alignment"]
            ),
        )
        out.append("")

    out += ["## Reliability across runs", ""]
    out += _table(
        ["Judge", "Runs", "Traces", "Alpha", "Avg std", "95% CI", "SCI", "Note"],
        (
            [
                r["judge"],
                str(len(r["runs"])),
                str(r.get("n_traces", 0)),
                format_metric(r.get("alpha"), 3),
                format_metric(r.get("avg_std"), 3),
                format_metric(r.get("ci95_halfwidth"), 3),
                format_metric(r.get("sci"), 3),
                r.get("note", ""),
            ]
            for r in bundle["reliability"]
        ),
    )
    out.append("")

    if bundle["invalid_runs"]:
        out += ["## Invalid runs", ""]
        out += _table(
            ["Judge", "Trace", "Run", "Error", "Reason"],
            (
                [b["judge_id"], b["trace_id"], str(b["run_index"]), b["error"], b["reason"].replace("|", "/")]
                for b in bundle["invalid_runs"]
            ),
        )
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# comparison


def _rate_delta(a: Mapping[str, Any], b: Mapping[str, Any]) -> float | None:
    if a["rate"] is None or b["rate"] is None:
        return None
    return a["rate"] - b["rate"]


def compare_bundles(a: Mapping[str, Any], b: Mapping[str, Any]) -> dict[str, Any]:
    """Union-row coverage and localization of ``a`` against ``b`` per impact level.

    Raises ``DatasetMismatch`` when the bundles cover different data.
    """
    ma, mb = a["provenance"]["manifest"], b["provenance"]["manifest"]
    for key in ("dataset_digest", "split"):
        if ma.get(key) != mb.get(key):
            raise DatasetMismatch(f"bundles differ in {key}: {ma.get(key)!r} vs {mb.get(key)!r}")
    ca, cb = _coverage_index(a), _coverage_index(b)
    rows = []
    for impact in IMPACT_LABELS:
        ra, rb = ca[(UNION_JUDGE, impact, ALL)], cb[(UNION_JUDGE, impact, ALL)]
        row: dict[str, Any] = {"impact": impact}
        for key in ("caught", "localized"):
            row[key] = {
                "a": ra[key],
                "b": rb[key],
                "delta_num": ra[key]["num"] - rb[key]["num"],
                "delta_rate": _rate_delta(ra[key], rb[key]),
            }
        rows.append(row)
    return {
        "a": {"run_id": a["provenance"]["run_id"], "judges": a["provenance"]["judges"]},
        "b": {"run_id": b["provenance"]["run_id"], "judges": b["provenance"]["judges"]},
        "dataset_digest": ma.get("dataset_digest"),
        "split": ma.get("split"),
        "rows": rows,
    }


def _pp(delta: float | None) -> str:
    return NA if delta is None else f"{100.0 * delta:+.2f} pp"


def render_comparison(cmp: Mapping[str, Any]) -> str:
    a, b = cmp["a"]["run_id"], cmp["b"]["run_id"]
    out = [f"# Comparison: {a} vs {b}", "", f"- split: {cmp['split']}", ""]
    for key, title in (("caught", "Identification coverage"), ("localized", "Localization")):
        out += [f"## {title}", ""]
        out += _table(
            ["Impact", a, b, "Delta"],
            (
                [r["impact"], _cell_text(r[key]["a"]), _cell_text(r[key]["b"]), _pp(r[key]["delta_rate"])]
                for r in cmp["rows"]
            ),
        )
        out.append("")
    return "\n".join(out)


def load_bundle(text: str) -> dict[str, Any]:
    doc = json.loads(text)
    if "provenance" not in doc or "coverage" not in doc:
        raise GpaError("not a report bundle")
    return doc


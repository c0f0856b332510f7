"""End-to-end commands: ingest, split, evaluate, report, consistency, compare.

Each ``cmd_*`` function is what the matching CLI verb calls; they take plain
arguments so tests can drive them without going through argparse.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .backend import (
    Backend,
    LiveBackend,
    MockBackend,
    ReplayBackend,
    ResponseCache,
    ScriptedResponses,
    invoke,
)
from .config import HarnessConfig
from .errors import (
    BackendError,
    BackendExhausted,
    CacheMissInReplayMode,
    DatasetMismatch,
    GpaError,
    MalformedDocument,
    ValidationFailure,
    VerdictParseError,
)
from .judges import JudgeSpec, build_prompt, builtin_judges, control_flow_preamble, load_judge_spec, parse_verdict
from .matching import (
    MatchMode,
    adjudication_skeleton,
    apply_adjudication,
    auto_match_all,
    load_adjudication,
)
from .metrics import Embedder, HashingEmbedder, Unit
from .preprocess import process_trace, render_transcript, split_dataset
from .report import (
    ReportInputs,
    build_report,
    compare_bundles,
    load_bundle,
    reliability_rows,
    render_comparison,
    render_markdown,
    report_json,
)
from .store import (
    INDEX_NAME,
    Dataset,
    InvalidRun,
    RunManifest,
    RunStore,
    default_run_id,
    dump_json,
    impact_totals,
    load_human_scores,
    now_iso,
    relpath,
    sha256_file,
    sha256_text,
    write_jsonl,
)
from .trace_model import GPA_JUDGE_ORDER, Trace, load_annotations, load_gpa_mapping, load_trace, validate_annotations

DEFAULT_JUDGES = ("LC", "EE", "PA", "PQ", "TS", "TC")
CACHE_NAME = "cache.jsonl"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_BACKEND_EXHAUSTED = 3
EXIT_REPLAY_GAP = 4

Echo = Callable[[str], None]


# ---------------------------------------------------------------------------
# judges


def available_judges(config: HarnessConfig) -> list[JudgeSpec]:
    specs = builtin_judges(config.resolve(config.prompts_dir))
    for path in config.extra_judges:
        specs.append(load_judge_spec(config.resolve(path)))
    return specs


def select_judges(config: HarnessConfig, ids: Sequence[str] | None) -> list[JudgeSpec]:
    specs = {s.id: s for s in available_judges(config)}
    wanted = list(ids) if ids else list(DEFAULT_JUDGES)
    missing = [j for j in wanted if j not in specs]
    if missing:
        raise ValidationFailure([f"unknown judge id {j!r}; known: {', '.join(specs)}" for j in missing])
    return [specs[j] for j in wanted]


# ---------------------------------------------------------------------------
# ingest / split


def cmd_ingest(
    trace_dir: str | Path,
    annotations: str | Path,
    mapping: str | Path,
    out: str | Path,
    human_scores: str | Path | None = None,
    echo: Echo = print,
) -> Path:
    """Validate traces and annotations and write ``dataset.json`` into ``out``."""
    trace_dir, out = Path(trace_dir), Path(out)
    for p in (trace_dir, Path(annotations), Path(mapping)) + ((Path(human_scores),) if human_scores else ()):
        if not p.exists():
            raise ValidationFailure([f"{p}: not found"])

    problems: list[str] = []
    traces: dict[str, Trace] = {}
    entries = []
    for path in sorted(trace_dir.glob("*.json")):
        try:
            trace = load_trace(path)
        except GpaError as exc:
            problems.append(f"{path.name}: {type(exc).__name__}: {exc}")
            continue
        if trace.trace_id in traces:
            problems.append(f"{path.name}: duplicate trace_id {trace.trace_id!r}")
            continue
        for w in trace.warnings:
            echo(f"warning: {path.name}: {w}")
        traces[trace.trace_id] = trace
        entries.append({"trace_id": trace.trace_id, "path": relpath(path, out), "sha256": sha256_file(path)})
    if not entries and not problems:
        problems.append(f"{trace_dir}: no *.json trace files")

    errors = []
    try:
        errors = load_annotations(Path(annotations).read_bytes())
    except GpaError as exc:
        problems.append(f"{Path(annotations).name}: {type(exc).__name__}: {exc}")
    problems += validate_annotations(errors, traces)

    try:
        mappings = load_gpa_mapping(Path(mapping).read_bytes())
        known = {e.error_id for e in errors}
        mapped = {m.error_id for m in mappings}
        problems += [f"mapping: unknown error {eid!r}" for eid in sorted(mapped - known)]
        problems += [f"error {eid}: no GPA mapping" for eid in sorted(known - mapped)]
    except GpaError as exc:
        problems.append(f"{Path(mapping).name}: {type(exc).__name__}: {exc}")

    if human_scores:
        try:
            for hs in load_human_scores(human_scores):
                if hs.trace_id not in traces:
                    problems.append(f"human score: unknown trace {hs.trace_id!r}")
        except (GpaError, KeyError, ValueError) as exc:
            problems.append(f"{Path(human_scores).name}: {exc}")

    if problems:
        raise ValidationFailure(problems)

    entries.sort(key=lambda e: e["trace_id"])
    files = {"annotations": Path(annotations), "mapping": Path(mapping)}
    if human_scores:
        files["human_scores"] = Path(human_scores)
    digest_parts = [f"{e['trace_id']}:{e['sha256']}" for e in entries]
    digest_parts += [f"{k}:{sha256_file(p)}" for k, p in sorted(files.items())]
    index = {
        "traces": entries,
        "digest": sha256_text("\n".join(digest_parts)),
        "error_totals": impact_totals(errors),
        **{k: relpath(p, out) for k, p in files.items()},
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / INDEX_NAME
    path.write_text(dump_json(index), encoding="utf-8", newline="\n")
    echo(f"ingested {len(entries)} traces, {len(errors)} errors -> {path}")
    echo(_totals_line("errors", index["error_totals"]))
    return path


def _totals_line(label: str, totals: dict[str, int]) -> str:
    return f"{label}: " + ", ".join(f"{k}={v}" for k, v in totals.items())


def cmd_split(
    dataset: str | Path,
    ratio: float = 0.5,
    seed: int = 0,
    membership: str | Path | None = None,
    echo: Echo = print,
) -> dict[str, Any]:
    """Write ``split.json`` next to the dataset index.

    ``membership`` is an optional JSON file ``{"dev": [...], "test": [...]}``
    that overrides the seeded split.
    """
    ds = Dataset.open(dataset)
    ids = ds.trace_ids
    if membership is not None:
        doc = json.loads(Path(membership).read_text(encoding="utf-8"))
        dev, test = [str(t) for t in doc.get("dev", [])], [str(t) for t in doc.get("test", [])]
        problems = [f"membership: unknown trace {t!r}" for t in dev + test if t not in set(ids)]
        problems += [f"membership: {t!r} in both splits" for t in sorted(set(dev) & set(test))]
        if problems:
            raise ValidationFailure(problems)
        source = {"membership": str(membership)}
    else:
        dev, test = split_dataset(ids, ratio, seed)
        source = {"ratio": ratio, "seed": seed}
    doc = {"dev": dev, "test": test, **source}
    ds.split_path.write_text(dump_json(doc), encoding="utf-8", newline="\n")
    for name, members in (("dev", dev), ("test", test)):
        echo(f"{name}: {len(members)} traces; " + _totals_line("errors", impact_totals(ds.errors_in(members))))
    return doc


# ---------------------------------------------------------------------------
# evaluate


@dataclass
class EvaluateResult:
    run_dir: Path
    verdicts: int = 0
    skipped: int = 0
    invalid: list[InvalidRun] = field(default_factory=list)
    backend_calls: int = 0

    @property
    def exit_code(self) -> int:
        errors = {b.error for b in self.invalid}
        if CacheMissInReplayMode.__name__ in errors:
            return EXIT_REPLAY_GAP
        if BackendExhausted.__name__ in errors:
            return EXIT_BACKEND_EXHAUSTED
        return EXIT_OK


def make_backend(config: HarnessConfig, mode: str) -> Backend:
    if mode == "live":
        return LiveBackend(config.backend.live())
    if mode == "replay":
        path = config.resolve(config.replay.path)
        if path is None or not path.exists():
            raise GpaError("replay mode needs replay.path pointing at a recordings file")
        return ReplayBackend.from_file(path)
    if mode == "mock":
        responses = config.resolve(config.mock.responses)
        default = config.mock.default_response
        script = (
            ScriptedResponses.from_file(responses, default) if responses else ScriptedResponses({}, default)
        )
        return MockBackend(script, fail_first=config.mock.fail_first)
    raise ValueError(f"unknown backend mode {mode!r}")


def _evaluate_trace(
    trace: Trace,
    specs: Sequence[JudgeSpec],
    todo: Sequence[tuple[str, int]],
    backend: Backend,
    config: HarnessConfig,
    cache: ResponseCache | None,
    preamble: str | None,
    transcript_dir: Path | None,
) -> list[tuple[str, Any]]:
    """All pending (judge, run) calls for one trace, in a fixed order."""
    budget = config.render.max_message_chars
    transcript = render_transcript(process_trace(trace, budget), budget)
    if transcript_dir is not None:
        transcript_dir.mkdir(parents=True, exist_ok=True)
        (transcript_dir / f"{trace.trace_id}.txt").write_text(transcript, encoding="utf-8", newline="\n")
    by_id = {s.id: s for s in specs}
    settings = config.backend.settings()
    known = trace.span_ids
    out: list[tuple[str, Any]] = []
    for judge_id, run in todo:
        spec = by_id[judge_id]
        bundle = build_prompt(spec, transcript, preamble, trace_id=trace.trace_id)
        try:
            resp = invoke(backend, bundle, run, settings, cache)
            verdict = parse_verdict(
                resp.text, spec, known, trace_id=trace.trace_id, run_index=run, model_id=settings.model_id
            )
        except (BackendError, VerdictParseError) as exc:
            out.append(("invalid", InvalidRun(judge_id, trace.trace_id, run, type(exc).__name__, str(exc))))
            continue
        extra = {
            "content_hash": bundle.content_hash,
            "input_tokens": resp.input_tokens,
            "output_tokens": resp.output_tokens,
        }
        out.append(("verdict", (verdict, extra)))
    return out


def cmd_evaluate(
    dataset: str | Path,
    config: HarnessConfig,
    out: str | Path,
    judges: Sequence[str] | None = None,
    split: str = "all",
    n_runs: int = 1,
    backend_mode: str = "mock",
    run_id: str | None = None,
    seed: int = 0,
    backend: Backend | None = None,
    dump_transcripts: str | Path | None = None,
    echo: Echo = print,
) -> EvaluateResult:
    """Run every selected judge ``n_runs`` times on every trace of the split.

    Finished (trace, judge, run) keys already in the store are skipped, so an
    interrupted run is resumed by repeating the command.
    """
    ds = Dataset.open(dataset)
    specs = select_judges(config, judges)
    trace_ids = ds.select(split)
    manifest = RunManifest(
        run_id="",
        dataset=str(dataset),
        dataset_digest=ds.digest,
        split=split,
        judges=[s.id for s in specs],
        model_id=config.backend.model_id,
        n_runs=n_runs,
        seed=seed,
        backend=backend_mode,
    )
    manifest.run_id = run_id or default_run_id(manifest.identity())
    out = Path(out)
    store = RunStore(out / manifest.run_id)
    if store.manifest_path.exists():
        previous = store.manifest()
        if previous.identity() != manifest.identity():
            raise DatasetMismatch(f"run {manifest.run_id} exists with a different manifest")
        manifest.created_at = previous.created_at
    else:
        manifest.created_at = now_iso()
    manifest.updated_at = now_iso()
    store.write_manifest(manifest)

    if backend is None:
        backend = make_backend(config, backend_mode)
    cache = None if backend_mode == "replay" else ResponseCache(out / CACHE_NAME)
    preamble = control_flow_preamble(config.resolve(config.prompts_dir)) if config.architecture_preamble else None
    transcript_dir = Path(dump_transcripts) if dump_transcripts else None
    done = {s.id: store.completed(s.id) for s in specs}

    result = EvaluateResult(run_dir=store.dir)
    plan: list[tuple[Trace, list[tuple[str, int]]]] = []
    for tid in trace_ids:
        todo = [(s.id, r) for s in specs for r in range(n_runs) if (tid, r) not in done[s.id]]
        result.skipped += len(specs) * n_runs - len(todo)
        if todo:
            plan.append((ds.trace(tid), todo))

    calls_before = getattr(backend, "calls", 0)
    with ThreadPoolExecutor(max_workers=config.backend.parallelism) as pool:
        futures = [
            pool.submit(_evaluate_trace, trace, specs, todo, backend, config, cache, preamble, transcript_dir)
            for trace, todo in plan
        ]
        # Results are written by this thread only, in submission order.
        for fut in futures:
            for kind, payload in fut.result():
                if kind == "verdict":
                    verdict, extra = payload
                    store.append_verdict(verdict, **extra)
                    result.verdicts += 1
                else:
                    store.append_invalid(payload)
                    result.invalid.append(payload)
                    echo(f"invalid: {payload.judge_id}/{payload.trace_id} run {payload.run_index}: {payload.error}")
    result.backend_calls = getattr(backend, "calls", 0) - calls_before
    echo(
        f"run {manifest.run_id}: {result.verdicts} verdicts, {result.skipped} skipped, "
        f"{len(result.invalid)} invalid, {result.backend_calls} backend calls"
    )
    return result


# ---------------------------------------------------------------------------
# report


def _embedder(config: HarnessConfig) -> Embedder | None:
    if config.embedding.kind == "hashing":
        return HashingEmbedder(config.embedding.dim)
    return None


def _general_judges(config: HarnessConfig, judge_ids: Sequence[str]) -> list[str]:
    specs = {s.id: s for s in available_judges(config)}
    return [j for j in judge_ids if j in specs and specs[j].general]


def cmd_report(
    run_dir: str | Path,
    config: HarnessConfig,
    dataset: str | Path | None = None,
    matching: str = "auto",
    adjudication: str | Path | None = None,
    unit: str = "trace_judge",
    run_index: int = 0,
    out: str | Path | None = None,
    skeleton: str | Path | None = None,
    echo: Echo = print,
) -> dict[str, Any]:
    """Match verdicts against annotations and write ``report.json`` and ``report.md``."""
    store = RunStore(run_dir)
    manifest = store.manifest()
    ds = Dataset.open(dataset if dataset is not None else manifest.dataset)
    if ds.digest != manifest.dataset_digest:
        raise DatasetMismatch(f"dataset digest {ds.digest[:12]} does not match run {manifest.run_id}")
    trace_ids = ds.select(manifest.split)
    judges = list(manifest.judges)
    errors = ds.errors_in(trace_ids)

    verdicts, invalid = {}, []
    for j in judges:
        verdicts[j], bad = store.load(j)
        invalid += bad
    run_verdicts = [v for j in judges for v in verdicts[j] if v.run_index == run_index]
    records = auto_match_all(run_verdicts, errors)
    if skeleton is not None:
        write_jsonl(skeleton, adjudication_skeleton(records))
        echo(f"adjudication skeleton -> {skeleton}")
    mode = MatchMode(matching.upper())
    if mode is MatchMode.ADJUDICATED:
        if adjudication is None:
            raise GpaError("--matching adjudicated needs --adjudication PATH")
        records = apply_adjudication(records, load_adjudication(adjudication))

    inputs = ReportInputs(
        run_id=manifest.run_id,
        manifest={k: v for k, v in manifest.model_dump().items() if k not in ("dataset", "created_at", "updated_at")},
        judges=judges,
        trace_ids=trace_ids,
        errors=errors,
        mappings=ds.mappings,
        verdicts=verdicts,
        records=records,
        matching=mode,
        unit=Unit(unit.upper()),
        run_index=run_index,
        split_of=ds.split_of(),
        general_judges=_general_judges(config, judges),
        human_scores={(h.trace_id, h.judge_id): h.score for h in ds.human_scores},
        embedder=_embedder(config),
        invalid=[
            {"judge_id": b.judge_id, "trace_id": b.trace_id, "run_index": b.run_index, "error": b.error, "reason": b.reason}
            for b in invalid
        ],
        verdict_digests={j: store.verdict_digest(j) for j in judges},
    )
    bundle = build_report(inputs)
    target = Path(out) if out is not None else store.dir
    target.mkdir(parents=True, exist_ok=True)
    (target / "report.json").write_text(report_json(bundle), encoding="utf-8", newline="\n")
    (target / "report.md").write_text(render_markdown(bundle), encoding="utf-8", newline="\n")
    echo(f"report -> {target / 'report.json'}")
    return bundle


# ---------------------------------------------------------------------------
# consistency


def cmd_consistency(
    run_dirs: Sequence[str | Path],
    config: HarnessConfig,
    dataset: str | Path | None = None,
    judges: Sequence[str] | None = None,
    out: str | Path | None = None,
    echo: Echo = print,
) -> dict[str, Any]:
    """Reliability per judge over all runs found in one or more run stores.

    Each (store, run_index) pair counts as one rater. Judges with too little
    data get a note instead of aborting the command.
    """
    if not run_dirs:
        raise GpaError("consistency needs at least one run directory")
    stores = [RunStore(d) for d in run_dirs]
    manifests = [s.manifest() for s in stores]
    first = manifests[0]
    for m in manifests[1:]:
        if (m.dataset_digest, m.split) != (first.dataset_digest, first.split):
            raise DatasetMismatch(f"run {m.run_id} covers different data than {first.run_id}")
    ds = Dataset.open(dataset if dataset is not None else first.dataset)
    trace_ids = ds.select(first.split)
    judge_ids = list(judges) if judges else sorted(set().union(*(m.judges for m in manifests)), key=_judge_order)

    verdicts: dict[str, list] = {j: [] for j in judge_ids}
    rater = 0
    for store, manifest in zip(stores, manifests):
        offsets: dict[int, int] = {}
        for j in judge_ids:
            if j not in manifest.judges:
                continue
            for v in store.load(j)[0]:
                if v.run_index not in offsets:
                    offsets[v.run_index] = rater + len(offsets)
                verdicts[j].append(replace(v, run_index=offsets[v.run_index]))
        rater += max(len(offsets), manifest.n_runs)

    inputs = ReportInputs(
        run_id="+".join(m.run_id for m in manifests),
        manifest={},
        judges=judge_ids,
        trace_ids=trace_ids,
        errors=[],
        mappings=[],
        verdicts=verdicts,
        records=[],
        embedder=_embedder(config),
    )
    rows = reliability_rows(inputs)
    doc = {"runs": [m.run_id for m in manifests], "split": first.split, "reliability": rows}
    if out is not None:
        target = Path(out)
        target.mkdir(parents=True, exist_ok=True)
        (target / "consistency.json").write_text(report_json(doc), encoding="utf-8", newline="\n")
    for r in rows:
        if "alpha" in r:
            sci = "n/a" if r.get("sci") is None else f"{r['sci']:.3f}"
            echo(
                f"{r['judge']}: alpha={r['alpha']:.3f} avg_std={r['avg_std']:.3f} "
                f"ci95={r['ci95_halfwidth']:.3f} sci={sci} runs={len(r['runs'])}"
            )
        else:
            echo(f"{r['judge']}: {r.get('note', 'no data')}")
    return doc


def _judge_order(judge: str) -> tuple[int, str]:
    return (GPA_JUDGE_ORDER.index(judge) if judge in GPA_JUDGE_ORDER else len(GPA_JUDGE_ORDER), judge)


# ---------------------------------------------------------------------------
# compare


def _bundle_path(path: str | Path) -> Path:
    p = Path(path)
    return p / "report.json" if p.is_dir() else p


def cmd_compare(
    bundle_a: str | Path, bundle_b: str | Path, out: str | Path | None = None, echo: Echo = print
) -> dict[str, Any]:
    """Side-by-side union coverage and localization of two reports over the same data."""
    try:
        a = load_bundle(_bundle_path(bundle_a).read_text(encoding="utf-8"))
        b = load_bundle(_bundle_path(bundle_b).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedDocument(str(exc)) from exc
    cmp = compare_bundles(a, b)
    text = render_comparison(cmp)
    if out is not None:
        target = Path(out)
        target.mkdir(parents=True, exist_ok=True)
        (target / "compare.json").write_text(report_json(cmp), encoding="utf-8", newline="\n")
        (target / "compare.md").write_text(text, encoding="utf-8", newline="\n")
    echo(text)
    return cmp

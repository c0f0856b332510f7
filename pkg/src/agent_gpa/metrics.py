"""Classification, human-alignment and run-to-run reliability statistics.

Undefined values (a zero denominator, a constant series) are returned as
``None`` and rendered as "n/a", never silently as zero. Sums go through
``math.fsum`` so results do not depend on summation order.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Iterable, Protocol, Sequence

from .errors import (
    CoverageGap,
    DimensionMismatch,
    EmptyInput,
    InsufficientData,
    LengthMismatch,
    ZeroVector,
)
from .judges import JudgeVerdict, bucket_score
from .matching import MatchRecord, auto_match_all
from .trace_model import AnnotatedError, GpaMapping, Impact, mapping_index

Rating = float | None


class Unit(str, Enum):
    TRACE_JUDGE = "TRACE_JUDGE"
    ERROR_JUDGE = "ERROR_JUDGE"


class Criterion(str, Enum):
    CAUGHT = "CAUGHT"
    LOCALIZED = "LOCALIZED"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    unit: Unit = Unit.TRACE_JUDGE

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn, self.unit
        )


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float | None
    recall: float | None
    f1: float | None
    f2: float | None
    accuracy: float | None


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def f_beta(precision: float | None, recall: float | None, beta: float) -> float | None:
    if precision is None or recall is None:
        return None
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return None
    return (1 + b2) * precision * recall / den


def classification_metrics(c: ConfusionCounts) -> ClassificationMetrics:
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    return ClassificationMetrics(
        precision=p,
        recall=r,
        f1=f_beta(p, r, 1.0),
        f2=f_beta(p, r, 2.0),
        accuracy=_ratio(c.tp + c.tn, c.total),
    )


# ---------------------------------------------------------------------------
# alignment with human scores


def _paired(human: Sequence[float], judge: Sequence[float]) -> list[tuple[float, float]]:
    if len(human) != len(judge):
        raise LengthMismatch(f"{len(human)} human scores vs {len(judge)} judge scores")
    if not human:
        raise EmptyInput("no score pairs")
    return list(zip(human, judge))


def exact_accuracy(human: Sequence[int], judge: Sequence[int]) -> float:
    pairs = _paired(human, judge)
    return sum(h == j for h, j in pairs) / len(pairs)


def off_by_one_accuracy(human: Sequence[int], judge: Sequence[int]) -> float:
    pairs = _paired(human, judge)
    return sum(abs(h - j) <= 1 for h, j in pairs) / len(pairs)


def bucketed_accuracy(human: Sequence[int], judge: Sequence[int]) -> float:
    pairs = _paired(human, judge)
    return sum(bucket_score(h) == bucket_score(j) for h, j in pairs) / len(pairs)


def two_point_accuracy(human: Sequence[int], judge: Sequence[int]) -> float:
    """Agreement on serious error (score 0) versus not."""
    pairs = _paired(human, judge)
    return sum((h == 0) == (j == 0) for h, j in pairs) / len(pairs)


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float | None:
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} values")
    if len(x) < 2:
        raise EmptyInput("correlation needs at least two pairs")
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return None
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def nmae(human: Sequence[float], judge: Sequence[float], scale_range: float) -> float:
    if scale_range <= 0:
        raise ValueError("scale_range must be positive")
    pairs = _paired(human, judge)
    return math.fsum(abs(h - j) for h, j in pairs) / len(pairs) / scale_range


@dataclass(frozen=True)
class AlignmentReport:
    n: int
    acc_exact: float
    acc_ob1: float
    acc_3pt: float
    acc_2pt: float
    correlation: float | None
    nmae: float


def alignment_report(human: Sequence[int], judge: Sequence[int]) -> AlignmentReport:
    """All alignment measures for paired 0..3 scores.

    NMAE is taken on the bucketed 3-point scale (range 2).
    """
    pairs = _paired(human, judge)
    bh = [bucket_score(h) for h in human]
    bj = [bucket_score(j) for j in judge]
    corr = pearson_correlation(human, judge) if len(pairs) >= 2 else None
    return AlignmentReport(
        n=len(pairs),
        acc_exact=exact_accuracy(human, judge),
        acc_ob1=off_by_one_accuracy(human, judge),
        acc_3pt=bucketed_accuracy(human, judge),
        acc_2pt=two_point_accuracy(human, judge),
        correlation=corr,
        nmae=nmae(bh, bj, 2),
    )


# ---------------------------------------------------------------------------
# reliability


def _is_missing(v: Rating) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def _units(ratings: Sequence[Sequence[Rating]]) -> list[list[float]]:
    """Columns (items) of a raters x items matrix, missing values dropped."""
    if not ratings:
        return []
    width = len(ratings[0])
    if any(len(row) != width for row in ratings):
        raise DimensionMismatch("every rater row must cover the same items")
    return [[float(row[i]) for row in ratings if not _is_missing(row[i])] for i in range(width)]


def _pair_sq_sum(values: Sequence[float]) -> float:
    """Sum over ordered pairs i != j of (v_i - v_j)^2 = 2 * (m * sum v^2 - (sum v)^2)."""
    m = len(values)
    mean = math.fsum(values) / m
    return 2.0 * m * math.fsum((v - mean) ** 2 for v in values)


def krippendorff_alpha_interval(ratings: Sequence[Sequence[Rating]]) -> float:
    """Krippendorff's alpha with the interval (squared difference) metric.

    ``ratings`` is raters x items; ``None``/NaN marks a missing rating. Items
    with fewer than two ratings are not pairable and are ignored.
    """
    units = [u for u in _units(ratings) if len(u) >= 2]
    if len(units) < 2:
        raise InsufficientData(f"need at least 2 items with 2+ ratings, found {len(units)}")
    n = sum(len(u) for u in units)
    d_o = math.fsum(_pair_sq_sum(u) / (len(u) - 1) for u in units) / n
    d_e = _pair_sq_sum([v for u in units for v in u]) / (n * (n - 1))
    if d_e == 0:
        return 1.0
    return 1.0 - d_o / d_e


def pairable_items(ratings: Sequence[Sequence[Rating]]) -> int:
    return sum(1 for u in _units(ratings) if len(u) >= 2)


def _sample_std(values: Sequence[float]) -> float:
    m = len(values)
    mean = math.fsum(values) / m
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (m - 1))


def per_item_std(ratings: Sequence[Sequence[Rating]]) -> list[float]:
    return [_sample_std(u) for u in _units(ratings) if len(u) >= 2]


def per_trace_dispersion(ratings: Sequence[Sequence[Rating]]) -> tuple[float, float]:
    """(mean per-item sample std, 1.96 * SEM of those stds)."""
    stds = per_item_std(ratings)
    if not stds:
        raise InsufficientData("no item has two or more ratings")
    avg = math.fsum(stds) / len(stds)
    if len(stds) < 2:
        return avg, 0.0
    return avg, 1.96 * _sample_std(stds) / math.sqrt(len(stds))


# ---------------------------------------------------------------------------
# semantic consistency


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    if len(u) != len(v):
        raise DimensionMismatch(f"dimensions {len(u)} and {len(v)} differ")
    if not u:
        raise DimensionMismatch("empty vectors")
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return math.fsum(a * b for a, b in zip(u, v)) / (nu * nv)


def semantic_consistency_index(rationale_embeddings: Iterable[Sequence[Sequence[float]]]) -> float:
    """Mean over traces of the mean pairwise cosine similarity between run rationales."""
    per_trace = []
    for vectors in rationale_embeddings:
        if len(vectors) < 2:
            continue
        sims = [cosine_similarity(a, b) for a, b in combinations(vectors, 2)]
        per_trace.append(math.fsum(sims) / len(sims))
    if not per_trace:
        raise InsufficientData("no trace has two or more rationales")
    return math.fsum(per_trace) / len(per_trace)


class Embedder(Protocol):
    def embed(self, text: str) -> list[float]: ...


_TOKEN = re.compile(r"\w+", re.UNICODE)


class HashingEmbedder:
    """Deterministic hashed term-frequency vectors; needs no model or network."""

    def __init__(self, dim: int = 512):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def embed(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for tok in _TOKEN.findall(text.lower()):
            digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "big") % self.dim] += 1.0
        return vec


@dataclass(frozen=True)
class ReliabilityReport:
    alpha: float | None
    n_traces: int
    avg_std: float | None
    ci95_halfwidth: float | None
    sci: float | None = None
    n_runs: int = 0
    note: str = ""


def reliability_report(
    ratings: Sequence[Sequence[Rating]],
    rationale_embeddings: Sequence[Sequence[Sequence[float]]] | None = None,
) -> ReliabilityReport:
    """Alpha, dispersion and (optionally) SCI for one judge; raises InsufficientData."""
    if len(ratings) < 2:
        raise InsufficientData(f"need at least 2 runs, found {len(ratings)}")
    alpha = krippendorff_alpha_interval(ratings)
    avg, ci = per_trace_dispersion(ratings)
    sci = None
    if rationale_embeddings is not None:
        sci = semantic_consistency_index(rationale_embeddings)
    return ReliabilityReport(
        alpha=alpha,
        n_traces=pairable_items(ratings),
        avg_std=avg,
        ci95_halfwidth=ci,
        sci=sci,
        n_runs=len(ratings),
    )


# ---------------------------------------------------------------------------
# confusion matrices


def build_confusion(
    verdicts: Iterable[JudgeVerdict],
    errors: Iterable[AnnotatedError],
    mappings: Iterable[GpaMapping],
    trace_ids: Iterable[str],
    judges: Iterable[str],
    unit: Unit = Unit.TRACE_JUDGE,
    criterion: Criterion = Criterion.CAUGHT,
    impact: Impact | None = None,
    records: Iterable[MatchRecord] | None = None,
    general_judges: Iterable[str] = (),
) -> dict[str, ConfusionCounts]:
    """Per-judge confusion counts over ``trace_ids``.

    TRACE_JUDGE: a (trace, judge) pair is positive when an annotated error in
    the trace (at ``impact``, if given) maps to the judge, and predicted
    positive when the judge scores below the maximum. For LOCALIZED a flagged
    positive pair only counts as a hit when a mapped error was localized.

    ERROR_JUDGE: every (error, judge) pair; positive when the error maps to
    the judge, predicted positive when a match record identifies (or
    localizes) it.

    Only the first verdict per (trace, judge) is used; pass one run at a time.
    """
    trace_ids = list(dict.fromkeys(trace_ids))
    trace_set = set(trace_ids)
    judges = list(judges)
    general = set(general_judges)
    verdicts = list(verdicts)
    errors = [e for e in errors if e.trace_id in trace_set]
    scoped = [e for e in errors if impact is None or e.impact is impact]
    index = mapping_index(mappings)

    with_verdict = set()
    by_pair: dict[tuple[str, str], JudgeVerdict] = {}
    for v in verdicts:
        if v.trace_id not in trace_set:
            raise CoverageGap(f"verdict for trace {v.trace_id!r} which has no annotation record")
        with_verdict.add(v.trace_id)
        by_pair.setdefault((v.trace_id, v.judge_id), v)
    missing = [t for t in trace_ids if t not in with_verdict]
    if missing:
        raise CoverageGap(f"annotated traces without verdicts: {', '.join(missing[:5])}")

    if records is None:
        records = auto_match_all(by_pair.values(), errors)
    hit: dict[tuple[str, str], tuple[bool, bool]] = {}
    for r in records:
        caught, localized = hit.get((r.error_id, r.judge_id), (False, False))
        hit[(r.error_id, r.judge_id)] = (caught or r.identified, localized or r.localized)

    def responsible(err: AnnotatedError, judge: str) -> bool:
        return judge in general or judge in index.get(err.error_id, ())

    out: dict[str, ConfusionCounts] = {}
    for judge in judges:
        tp = fp = fn = tn = 0
        if unit is Unit.TRACE_JUDGE:
            for tid in trace_ids:
                verdict = by_pair.get((tid, judge))
                if verdict is None:
                    continue
                mapped = [e for e in scoped if e.trace_id == tid and responsible(e, judge)]
                predicted = verdict.flags_issue
                if criterion is Criterion.LOCALIZED and mapped:
                    predicted = predicted and any(hit.get((e.error_id, judge), (0, 0))[1] for e in mapped)
                if mapped:
                    tp += predicted
                    fn += not predicted
                else:
                    fp += predicted
                    tn += not predicted
        else:
            slot = 0 if criterion is Criterion.CAUGHT else 1
            for err in scoped:
                predicted = bool(hit.get((err.error_id, judge), (False, False))[slot])
                if responsible(err, judge):
                    tp += predicted
                    fn += not predicted
                else:
                    fp += predicted
                    tn += not predicted
        out[judge] = ConfusionCounts(tp, fp, fn, tn, unit)
    return out


def ratings_matrix(
    verdicts: Iterable[JudgeVerdict], trace_ids: Sequence[str], runs: Sequence[int]
) -> list[list[Rating]]:
    """runs x traces matrix of normalized scores; gaps are None."""
    cell: dict[tuple[int, str], float] = {}
    for v in verdicts:
        cell.setdefault((v.run_index, v.trace_id), v.score_norm)
    return [[cell.get((run, t)) for t in trace_ids] for run in runs]


"""Ranking metrics, cold/warm segmentation, run aggregation and the content KNN baseline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Case, ContentMatrix, SplitDataset

logger = logging.getLogger(__name__)

Recommender = Callable[[Sequence[Sequence[int]], int], list[list[int] | None]]


def hr_at_k(rank: int | None, k: int) -> float:
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(rank: int | None, k: int) -> float:
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def rank_in(ranked: Sequence[int], item: int) -> int | None:
    """1-based position of ``item`` in ``ranked`` or None."""
    for pos, it in enumerate(ranked, start=1):
        if it == item:
            return pos
    return None


@dataclass(frozen=True)
class EvalCase:
    input: tuple[int, ...]
    ground_truth: int
    gt_is_cold: bool
    cold_input_fraction: float
    gt_train_frequency: int


def build_eval_cases(split: SplitDataset, cases: Sequence[Case] | None = None) -> list[EvalCase]:
    freq = split.train_frequency()
    cold = split.cold_items
    out = []
    for c in split.test_cases if cases is None else cases:
        n_cold = sum(1 for i in c.input if i in cold)
        f = int(freq[c.ground_truth])
        out.append(EvalCase(
            input=tuple(c.input),
            ground_truth=c.ground_truth,
            gt_is_cold=f == 0,
            cold_input_fraction=n_cold / len(c.input) if c.input else 0.0,
            gt_train_frequency=f,
        ))
    return out


@dataclass(frozen=True)
class SegmentationSpec:
    # upper edges of cold-input bins after the dedicated zero bin
    cold_input_edges: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    # inclusive (lo, hi) frequency buckets; hi None = open-ended
    freq_buckets: tuple[tuple[int, int | None], ...] = (
        (0, 0), (1, 2), (3, 5), (6, 10), (11, 20), (21, 50), (51, None))

    def segment_names(self) -> list[str]:
        names = ["total", "cold_gt", "warm_gt", "cold_input_0"]
        lo = 0.0
        for hi in self.cold_input_edges:
            names.append(f"cold_input_({lo:g},{hi:g}]")
            lo = hi
        for a, b in self.freq_buckets:
            names.append(_freq_name(a, b))
        return names

    def segments_of(self, case: EvalCase) -> list[str]:
        segs = ["total", "cold_gt" if case.gt_is_cold else "warm_gt"]
        frac = case.cold_input_fraction
        if frac == 0.0:
            segs.append("cold_input_0")
        else:
            lo = 0.0
            for hi in self.cold_input_edges:
                if lo < frac <= hi:
                    segs.append(f"cold_input_({lo:g},{hi:g}]")
                    break
                lo = hi
        for a, b in self.freq_buckets:
            if case.gt_train_frequency >= a and (b is None or case.gt_train_frequency <= b):
                segs.append(_freq_name(a, b))
                break
        return segs

    def to_dict(self) -> dict:
        return {"cold_input_edges": list(self.cold_input_edges),
                "freq_buckets": [list(b) for b in self.freq_buckets]}

    @classmethod
    def from_dict(cls, d: dict | None) -> "SegmentationSpec":
        if not d:
            return cls()
        return cls(tuple(d.get("cold_input_edges", cls.cold_input_edges)),
                   tuple(tuple(b) for b in d.get("freq_buckets", cls.freq_buckets)))


def _freq_name(a: int, b: int | None) -> str:
    if b is None:
        return f"freq_{a}+"
    return f"freq_{a}" if a == b else f"freq_{a}-{b}"


@dataclass
class SegmentMetrics:
    hr: float | None
    ndcg: float | None
    count: int


@dataclass
class MetricsReport:
    k: int
    seed: int
    segments: dict[str, SegmentMetrics]
    skipped: int = 0
    notes: dict = field(default_factory=dict)

    def value(self, segment: str, metric: str) -> float | None:
        return getattr(self.segments[segment], metric)

    def to_json(self) -> str:
        doc = {
            "k": self.k,
            "seed": self.seed,
            "skipped": self.skipped,
            "segments": {name: {"hr": s.hr, "ndcg": s.ndcg, "count": s.count}
                         for name, s in self.segments.items()},
        }
        if self.notes:
            doc["notes"] = self.notes
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        segs = {n: SegmentMetrics(s["hr"], s["ndcg"], s["count"]) for n, s in d["segments"].items()}
        return cls(k=d["k"], seed=d["seed"], segments=segs, skipped=d.get("skipped", 0),
                   notes=d.get("notes", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["segment", "metric", "k", "value", "count", "seed"])
        for name, s in self.segments.items():
            for metric, v in (("hr", s.hr), ("ndcg", s.ndcg)):
                w.writerow([name, metric, self.k, "absent" if v is None else repr(v), s.count, self.seed])
        return buf.getvalue()


def evaluate(recommender: Recommender, cases: Sequence[EvalCase], k: int = 10,
             segmentation: SegmentationSpec | None = None, seed: int = 0) -> MetricsReport:
    """Score every case and average HR/NDCG per segment.

    The recommender returns one list per case, or None for a case it cannot
    serve (e.g. KNN with an empty content profile). Such cases are excluded
    and counted in ``skipped``. An empty list (e.g. every input item dropped
    by the model's cold-input policy) stays in the denominators as a miss and
    is counted in ``notes["empty_lists"]``.
    """
    seg = segmentation or SegmentationSpec()
    recs = recommender([c.input for c in cases], k)
    sums = {name: [0.0, 0.0, 0] for name in seg.segment_names()}
    empty = excluded = 0
    for case, ranked in zip(cases, recs):
        if ranked is None:
            excluded += 1
            continue
        if not ranked:
            empty += 1
        r = rank_in(ranked[:k], case.ground_truth)
        h, n = hr_at_k(r, k), ndcg_at_k(r, k)
        for name in seg.segments_of(case):
            acc = sums[name]
            acc[0] += h
            acc[1] += n
            acc[2] += 1
    segments = {}
    for name, (h, n, c) in sums.items():
        segments[name] = SegmentMetrics(h / c if c else None, n / c if c else None, c)
    if excluded:
        logger.warning("%d of %d cases excluded by the recommender", excluded, len(cases))
    if empty:
        logger.info("%d of %d cases had no recommendations", empty, len(cases))
    report = MetricsReport(k=k, seed=seed, segments=segments, skipped=excluded,
                           notes={"empty_lists": empty} if empty else {})
    check_report(report)
    return report


def check_report(report: MetricsReport) -> None:
    s = report.segments
    if s["total"].count != s["cold_gt"].count + s["warm_gt"].count:
        raise AssertionError("segment counts do not add up")
    for name, m in s.items():
        if m.count == 0:
            continue
        if not (0.0 <= m.ndcg <= m.hr + 1e-12 <= 1.0 + 1e-12):
            raise AssertionError(f"metric bounds violated in segment {name}")


# ---------------------------------------------------------------- KNN baseline

class EmptyProfileError(ValueError):
    pass


def knn_baseline(content: ContentMatrix, input_items: Sequence[int], k: int) -> list[int]:
    """Rank content-covered items by cosine similarity to the mean input content vector."""
    covered = [i for i in input_items if content.coverage[i]]
    if not covered:
        raise EmptyProfileError("no input item carries content")
    profile = content.vectors[covered].mean(axis=0)
    norm = np.linalg.norm(profile)
    if not norm > 0.0:
        raise EmptyProfileError("mean content vector is zero")
    cand = np.flatnonzero(content.coverage)
    V = content.vectors[cand]
    sims = (V @ profile) / (np.linalg.norm(V, axis=1) * norm)
    order = np.argsort(-sims, kind="stable")[:k]
    return cand[order].tolist()


def knn_recommender(content: ContentMatrix) -> Recommender:
    def recommend(inputs, k):
        out = []
        failed = 0
        for seq in inputs:
            try:
                out.append(knn_baseline(content, seq, k))
            except EmptyProfileError:
                failed += 1
                out.append(None)
        if failed:
            logger.warning("knn: %d cases had an empty content profile and are excluded", failed)
        return out

    return recommend


# ---------------------------------------------------------------- aggregation

@dataclass
class RunSummary:
    k: int
    seeds: list[int]
    # segment -> metric -> (mean, std, n) ; mean None when the segment was always empty
    stats: dict[str, dict[str, tuple[float | None, float | None, int]]]

    def formatted(self, segment: str, metric: str) -> str:
        mean, std, n = self.stats[segment][metric]
        if mean is None:
            return "absent"
        if n < 2:
            return f"{mean:.3f}"
        return f"{mean:.3f}±{std:.3f}"

    def to_dict(self) -> dict:
        return {"k": self.k, "seeds": self.seeds,
                "stats": {s: {m: list(v) for m, v in d.items()} for s, d in self.stats.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(d["k"], d["seeds"], {s: {m: tuple(v) for m, v in ms.items()}
                                        for s, ms in d["stats"].items()})


def summarize(reports: Sequence[MetricsReport]) -> RunSummary:
    """Mean and sample std per segment; a single report gets std None."""
    if not reports:
        raise ValueError("no reports to summarize")
    names = list(reports[0].segments)
    for r in reports[1:]:
        if list(r.segments) != names or r.k != reports[0].k:
            raise ValueError("reports have mismatched segmentation or k")
    stats = {}
    for name in names:
        stats[name] = {}
        for metric in ("hr", "ndcg"):
            vals = [r.segments[name].__dict__[metric] for r in reports]
            vals = [v for v in vals if v is not None]
            if not vals:
                stats[name][metric] = (None, None, 0)
                continue
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
            stats[name][metric] = (mean, std, len(vals))
    return RunSummary(reports[0].k, [r.seed for r in reports], stats)


def aggregate_runs(reports: Sequence[MetricsReport]) -> RunSummary:
    if len(reports) < 2:
        raise ValueError("aggregate_runs needs at least two reports")
    return summarize(reports)

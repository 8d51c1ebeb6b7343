"""Ranking metrics and run-file scoring.

Average precision at K normalizes by min(K, positive count), so a perfect
top-K page scores 1.0 even when more positives exist than K slots. Scoring
a run against a manifest uses test-corpus labels only: rankings must not
contain any withheld FSR id, and queries left with zero test positives are
skipped, not failed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .benchmark import BenchmarkManifest
from .errors import EmptyPositives, FsrLeak, SchemaError

DEFAULT_K = 50


@dataclass(frozen=True)
class RankedRun:
    """One query's ranked retrieval output, best first."""

    query_id: str
    ranking: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranking", tuple(self.ranking))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.ranking) != len(self.scores):
            raise SchemaError(
                f"run {self.query_id!r}: {len(self.ranking)} ids vs "
                f"{len(self.scores)} scores")
        if len(set(self.ranking)) != len(self.ranking):
            raise SchemaError(f"run {self.query_id!r}: duplicate ids in ranking")


def average_precision_at_k(ranking, positives, k: int = DEFAULT_K) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    positives = set(positives)
    if not positives:
        raise EmptyPositives("no positives to score against")
    hits = 0
    precision_sum = 0.0
    for rank, item in enumerate(ranking[:k], start=1):
        if item in positives:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / min(k, len(positives))


def recall_at_k(ranking, positives, k: int = DEFAULT_K) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    positives = set(positives)
    if not positives:
        raise EmptyPositives("no positives to score against")
    found = sum(1 for item in ranking[:k] if item in positives)
    return found / min(k, len(positives))


@dataclass(frozen=True)
class QueryScore:
    query_id: str
    sub_dataset: str
    ap: float
    recall: float
    test_positive_count: int


@dataclass(frozen=True)
class GroupScore:
    query_count: int
    mean_ap: float
    mean_recall: float


@dataclass
class MetricReport:
    k: int
    per_query: list[QueryScore]
    by_sub_dataset: dict[str, GroupScore]
    overall: GroupScore
    skipped: list[str]


def _group(scores: list[QueryScore]) -> GroupScore:
    n = len(scores)
    if n == 0:
        return GroupScore(0, 0.0, 0.0)
    return GroupScore(n, sum(s.ap for s in scores) / n,
                      sum(s.recall for s in scores) / n)


def evaluate_run(runs: list[RankedRun], manifest: BenchmarkManifest,
                 k: int = DEFAULT_K) -> MetricReport:
    withheld = manifest.fsr_ids()
    seen: set[str] = set()
    per_query: list[QueryScore] = []
    skipped: list[str] = []
    for run in sorted(runs, key=lambda r: r.query_id):
        if run.query_id in seen:
            raise SchemaError(f"duplicate run for query {run.query_id!r}")
        seen.add(run.query_id)
        query = manifest.query(run.query_id)
        leaked = [i for i in run.ranking if i in withheld]
        if leaked:
            raise FsrLeak(
                f"run {run.query_id!r} ranks withheld FSR ids: {leaked[:5]}")
        positives = set(query.positives)
        if not positives:
            skipped.append(run.query_id)
            continue
        per_query.append(QueryScore(
            query_id=run.query_id,
            sub_dataset=query.sub_dataset,
            ap=average_precision_at_k(run.ranking, positives, k),
            recall=recall_at_k(run.ranking, positives, k),
            test_positive_count=len(positives),
        ))
    groups: dict[str, list[QueryScore]] = {}
    for score in per_query:
        groups.setdefault(score.sub_dataset, []).append(score)
    return MetricReport(
        k=k,
        per_query=per_query,
        by_sub_dataset={name: _group(members)
                        for name, members in sorted(groups.items())},
        overall=_group(per_query),
        skipped=skipped,
    )


# --- run files and report rendering ----------------------------------------------

def write_run(runs: list[RankedRun], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for run in runs:
            f.write(json.dumps({"query_id": run.query_id,
                                "ranking": list(run.ranking),
                                "scores": list(run.scores)}) + "\n")


def read_run(path) -> list[RankedRun]:
    runs: list[RankedRun] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not valid JSON") from exc
            for key in ("query_id", "ranking", "scores"):
                if key not in obj:
                    raise SchemaError(f"{path}:{lineno}: missing key {key!r}")
            run = RankedRun(query_id=str(obj["query_id"]),
                            ranking=tuple(obj["ranking"]),
                            scores=tuple(obj["scores"]))
            if run.query_id in seen:
                raise SchemaError(
                    f"{path}:{lineno}: duplicate query {run.query_id!r}")
            seen.add(run.query_id)
            runs.append(run)
    return runs


def report_to_dict(report: MetricReport) -> dict:
    return {
        "k": report.k,
        "overall": {"query_count": report.overall.query_count,
                    "mean_ap": report.overall.mean_ap,
                    "mean_recall": report.overall.mean_recall},
        "by_sub_dataset": {
            name: {"query_count": g.query_count, "mean_ap": g.mean_ap,
                   "mean_recall": g.mean_recall}
            for name, g in report.by_sub_dataset.items()},
        "per_query": [{"query_id": s.query_id, "sub_dataset": s.sub_dataset,
                       "ap": s.ap, "recall": s.recall,
                       "test_positives": s.test_positive_count}
                      for s in report.per_query],
        "skipped": list(report.skipped),
    }


def format_report(report: MetricReport) -> str:
    header = f"{'group':<26}{'queries':>8}{'mAP@' + str(report.k):>12}" \
             f"{'recall@' + str(report.k):>12}"
    lines = [header, "-" * len(header)]
    for name, g in report.by_sub_dataset.items():
        lines.append(f"{name:<26}{g.query_count:>8}{g.mean_ap:>12.4f}"
                     f"{g.mean_recall:>12.4f}")
    g = report.overall
    lines.append(f"{'overall':<26}{g.query_count:>8}{g.mean_ap:>12.4f}"
                 f"{g.mean_recall:>12.4f}")
    if report.skipped:
        lines.append("skipped (no test positives): " + ", ".join(report.skipped))
    return "\n".join(lines)

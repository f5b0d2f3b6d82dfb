"""TREC-style evaluation: qrels/run I/O, P@k, nDCG@k, MAP@k, paired t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class RunRow:
    qid: str
    doc_id: str
    rank: int
    score: float
    tag: str


# -------------------------------------------------------------------------- I/O
def parse_qrels(path) -> dict[str, dict[str, int]]:
    """``qid 0 docid grade`` lines -> {qid: {docid: grade}}."""
    qrels: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
            if g < 0:
                g = 0  # negative judgments count as non-relevant
            qrels.setdefault(qid, {})[doc] = g
    return qrels


def write_qrels(qrels: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in qrels.items():
            for doc, g in docs.items():
                fh.write(f"{qid} 0 {doc} {g}\n")


def parse_run(path) -> list[RunRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, doc, rank, score, tag = parts
            try:
                rows.append(RunRow(qid, doc, int(rank), float(score), tag))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad rank or score") from None
    return rows


def write_run(lists, tag: str, path) -> None:
    """Write ScoredLists (or a mapping qid -> [(doc, score)]) as a TREC run.

    Scores are written with ``repr`` so that parsing recovers them exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for qid, entries in _iter_lists(lists):
            for rank, (doc, score) in enumerate(entries, 1):
                fh.write(f"{qid} Q0 {doc} {rank} {float(score)!r} {tag}\n")


def _iter_lists(lists):
    if isinstance(lists, dict):
        for qid, entries in lists.items():
            yield qid, [(e[0], e[1]) for e in entries]
    else:
        for sl in lists:
            yield sl.query_id, [(e[0], e[1]) for e in sl.entries]


def run_to_rankings(rows) -> dict[str, list[str]]:
    """{qid: [doc ids by rank]}; rows are ordered by rank, then score, then doc."""
    per: dict[str, list] = {}
    for r in rows:
        per.setdefault(r.qid, []).append(r)
    return {q: [r.doc_id for r in sorted(rs, key=lambda r: (r.rank, -r.score, r.doc_id))]
            for q, rs in per.items()}


# ---------------------------------------------------------------------- metrics
@dataclass
class MetricResult:
    per_query: dict
    mean: float


def _evaluate(run: dict, qrels: dict, fn) -> MetricResult:
    per = {}
    for qid in sorted(qrels):
        per[qid] = fn(run.get(qid, []), qrels[qid]) if qid in run else 0.0
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return MetricResult(per, mean)


def _rankings(run):
    if isinstance(run, dict):
        return run
    return run_to_rankings(run)


def precision_at(run, qrels: dict, cutoff: int = 20) -> MetricResult:
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")

    def p(docs, judged):
        return sum(1 for d in docs[:cutoff] if judged.get(d, 0) >= 1) / cutoff

    return _evaluate(_rankings(run), qrels, p)


def dcg(grades) -> float:
    return sum(g / math.log2(r + 1) for r, g in enumerate(grades, 1))


def ndcg_at(run, qrels: dict, cutoff: int = 20) -> MetricResult:
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")

    def nd(docs, judged):
        ideal = dcg(sorted((g for g in judged.values() if g > 0), reverse=True)[:cutoff])
        if ideal == 0:
            return 0.0
        return dcg([judged.get(d, 0) for d in docs[:cutoff]]) / ideal

    return _evaluate(_rankings(run), qrels, nd)


def map_at(run, qrels: dict, cutoff: int = 1000) -> MetricResult:
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")

    def ap(docs, judged):
        total_rel = sum(1 for g in judged.values() if g >= 1)
        if total_rel == 0:
            return 0.0
        hits, acc = 0, 0.0
        for r, d in enumerate(docs[:cutoff], 1):
            if judged.get(d, 0) >= 1:
                hits += 1
                acc += hits / r
        return acc / total_rel

    return _evaluate(_rankings(run), qrels, ap)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-tailed paired t-test; returns (t, p)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        if np.all(d == 0):
            return 0.0, 1.0
        return math.copysign(math.inf, d.mean()), 0.0
    t = d.mean() / (sd / math.sqrt(d.size))
    p = 2.0 * stats.t.sf(abs(t), df=d.size - 1)
    return float(t), float(min(p, 1.0))


def evaluate_run(run, qrels: dict, cutoff: int = 20) -> dict[str, MetricResult]:
    """P and nDCG at ``cutoff`` plus MAP over the top 1000."""
    return {f"P@{cutoff}": precision_at(run, qrels, cutoff),
            f"nDCG@{cutoff}": ndcg_at(run, qrels, cutoff),
            "MAP@1K": map_at(run, qrels, 1000)}

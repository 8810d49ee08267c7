"""Ranking metrics: NDCG@k, P@k, MAP, MRR, ROC/AUC, R@k and caption recall.

Candidates are ranked by descending score with ties broken by ascending
candidate id, so every metric is a deterministic function of the ranking.
Per-query functions return ``None`` when the query must be skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class JudgedList:
    """Scores and nonnegative integer relevance (grade or click count) per candidate."""

    scores: np.ndarray
    relevance: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        rel = np.asarray(self.relevance)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("a judged list needs at least one candidate")
        if rel.shape != s.shape:
            raise ValueError(f"relevance shape {rel.shape} != scores shape {s.shape}")
        if not np.all(np.isfinite(rel)) or np.any(rel < 0):
            raise ValueError("relevance must be finite and nonnegative")
        ids = np.arange(s.size) if self.ids is None else np.asarray(self.ids)
        if ids.shape != s.shape:
            raise ValueError("ids must align with scores")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "relevance", rel)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.scores.size

    def ranked_relevance(self) -> np.ndarray:
        # lexsort: last key is primary
        order = np.lexsort((self.ids, -self.scores))
        return self.relevance[order]


@dataclass(frozen=True)
class MetricReport:
    metric: str
    k: int | None
    value: float
    n_queries: int
    n_skipped: int

    def row(self) -> str:
        k = "-" if self.k is None else str(self.k)
        return f"{self.metric}\t{k}\t{self.value:.6f}\t{self.n_queries}\t{self.n_skipped}"


REPORT_HEADER = "metric\tk\tvalue\tn_queries\tn_skipped"


def _dcg(grades: np.ndarray, k: int) -> float:
    total = 0.0
    for j, g in enumerate(grades[:k], start=1):
        total += (2.0 ** float(g) - 1.0) / math.log2(j + 1)
    return total


def ndcg_at_k(lst: JudgedList, k: int) -> float | None:
    """Exponential-gain NDCG@k; None when the list is shorter than k or has no gain."""
    if len(lst) < k:
        return None
    ideal = _dcg(np.sort(lst.relevance)[::-1], k)
    if ideal == 0:
        return None
    return _dcg(lst.ranked_relevance(), k) / ideal


def precision_at_k(lst: JudgedList, k: int) -> float | None:
    if len(lst) < k:
        return None
    return float(np.count_nonzero(lst.ranked_relevance()[:k] > 0)) / k


def average_precision(lst: JudgedList) -> float | None:
    rel = lst.ranked_relevance() > 0
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return None
    total = 0.0
    for n_found, pos in enumerate(hits, start=1):
        total += n_found / (pos + 1)
    return total / hits.size


def reciprocal_rank(lst: JudgedList) -> float | None:
    hits = np.flatnonzero(lst.ranked_relevance() > 0)
    if hits.size == 0:
        return None
    return 1.0 / (hits[0] + 1)


def recall_at_k(lst: JudgedList, k: int) -> float | None:
    """Share of clicked candidates that land in the top k."""
    rel = lst.ranked_relevance() > 0
    total = np.count_nonzero(rel)
    if total == 0:
        return None
    return np.count_nonzero(rel[:k]) / total


@dataclass(frozen=True)
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray

    def polyline(self) -> str:
        return "".join(f"{f:.6f}\t{t:.6f}\n" for f, t in zip(self.fpr, self.tpr))


def roc_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> RocResult:
    """AUC by rank-sum with mid-ranks (ties count one half), plus the ROC polyline."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc needs at least one positive and one negative score")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    # doubled mid-ranks keep the arithmetic in integers
    ranks2 = np.empty(allv.size, dtype=np.int64)
    i = 0
    while i < sorted_v.size:
        j = i
        while j + 1 < sorted_v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks2[order[i:j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    n_pos, n_neg = pos.size, neg.size
    u2 = int(ranks2[:n_pos].sum()) - n_pos * (n_pos + 1)
    auc = u2 / (2.0 * n_pos * n_neg)

    # polyline: sweep thresholds from high to low, one vertex per distinct score
    desc = np.unique(allv)[::-1]
    fpr, tpr = [0.0], [0.0]
    for thr in desc:
        tpr.append(np.count_nonzero(pos >= thr) / n_pos)
        fpr.append(np.count_nonzero(neg >= thr) / n_neg)
    return RocResult(auc, np.array(fpr), np.array(tpr))


def caption_recall(batch: Iterable[tuple[Sequence[float], Sequence[bool]]], k: int) -> float:
    """Fraction of images with at least one true caption in their top k.

    ``batch`` yields (caption scores, is-true flags) per image.
    """
    hits = n = 0
    for scores, truth in batch:
        truth = np.asarray(truth, dtype=bool)
        if not truth.any():
            raise ValueError("every image needs at least one true caption among its candidates")
        lst = JudgedList(np.asarray(scores, dtype=np.float64), truth.astype(int))
        hits += bool(lst.ranked_relevance()[:k].any())
        n += 1
    if n == 0:
        raise ValueError("caption_recall needs at least one image")
    return hits / n


def mean_metric(name: str, lists: Sequence[JudgedList], fn: Callable[[JudgedList], float | None],
                k: int | None = None) -> MetricReport:
    """Average a per-query metric over the queries it applies to."""
    vals = [fn(lst) for lst in lists]
    kept = [v for v in vals if v is not None]
    value = float(np.mean(kept)) if kept else 0.0
    return MetricReport(name, k, value, len(kept), len(vals) - len(kept))


def auc_report(lists: Sequence[JudgedList]) -> tuple[MetricReport, RocResult | None]:
    """Pooled AUC over all (relevant, non-relevant) candidates of all queries."""
    pos, neg, used, skipped = [], [], 0, 0
    for lst in lists:
        rel = lst.relevance > 0
        if rel.all() or not rel.any():
            skipped += 1
            continue
        used += 1
        pos.extend(lst.scores[rel])
        neg.extend(lst.scores[~rel])
    if not pos:
        return MetricReport("AUC", None, 0.0, 0, skipped), None
    roc = roc_auc(pos, neg)
    return MetricReport("AUC", None, roc.auc, used, skipped), roc


def format_report(reports: Sequence[MetricReport]) -> str:
    return REPORT_HEADER + "\n" + "".join(r.row() + "\n" for r in reports)


def parse_report(text: str) -> list[MetricReport]:
    rows = []
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        m, k, v, nq, ns = line.split("\t")
        rows.append(MetricReport(m, None if k == "-" else int(k), float(v), int(nq), int(ns)))
    return rows

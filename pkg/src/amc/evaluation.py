"""Score a bundle's judged candidates and compute the metric suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics as M
from .data import DatasetBundle
from .model import AmcHyperparams, AmcParams, BatchForward, forward_batch

NDCG_KS = (5, 10, 15, 20, 25)
RECALL_KS = (1, 5, 10, 15, 20)


def score_candidates(bundle: DatasetBundle, params: AmcParams, hp: AmcHyperparams,
                     query_ids, image_ids, chunk: int = 4096) -> BatchForward:
    """Untracked forward over aligned (query, image) id lists, chunked; returns numpy fields."""
    parts = []
    for start in range(0, len(query_ids), chunk):
        Q, V, K, act = bundle.gather(query_ids[start:start + chunk], image_ids[start:start + chunk])
        parts.append(forward_batch(Q, V, K, act, params.tensors, hp))
    out = BatchForward(score=None)
    for name in ("score", "q_m", "v_q", "M", "k_q", "c_v", "c_k", "p_v", "p_k", "x_q"):
        vals = [getattr(p, name) for p in parts]
        if vals and vals[0] is not None:
            setattr(out, name, np.concatenate(vals))
    if parts and parts[0].p is not None:
        n = max(p.p.shape[1] for p in parts)
        out.p = np.concatenate([np.pad(p.p, ((0, 0), (0, n - p.p.shape[1]))) for p in parts])
    return out


@dataclass
class QueryScores:
    query: str
    images: list[str]
    scores: np.ndarray
    grades: np.ndarray
    clicks: np.ndarray

    def judged(self, relevance: str = "grades") -> M.JudgedList:
        rel = self.grades if relevance == "grades" else self.clicks
        return M.JudgedList(self.scores, rel, ids=np.arange(len(self.images)))


def score_judged(bundle: DatasetBundle, params: AmcParams, hp: AmcHyperparams,
                 queries=None) -> list[QueryScores]:
    """Scores for every judged candidate (clicks looked up where available).

    Candidate order within a query is ascending image id, which is also the
    tie-breaking order of the metrics.
    """
    judged = bundle.judgments_by_query()
    if not judged:
        # fall back to click counts as grades
        judged = {q: rows for q, rows in bundle.clicks_by_query().items()}
    clicks = {(q, i): c for q, i, c in bundle.clicks}
    wanted = sorted(judged) if queries is None else [q for q in sorted(judged) if q in set(queries)]
    qs, ims = [], []
    for q in wanted:
        for i, _ in sorted(judged[q]):
            qs.append(q)
            ims.append(i)
    fb = score_candidates(bundle, params, hp, qs, ims)
    out, pos = [], 0
    for q in wanted:
        rows = sorted(judged[q])
        n = len(rows)
        out.append(QueryScores(q, [i for i, _ in rows], fb.score[pos:pos + n],
                               np.array([g for _, g in rows]),
                               np.array([clicks.get((q, i), 0) for i, _ in rows])))
        pos += n
    return out


def metric_suite(per_query: list[QueryScores]) -> tuple[list[M.MetricReport], M.RocResult | None]:
    graded = [qs.judged("grades") for qs in per_query]
    clicked = [qs.judged("clicks") for qs in per_query]
    reports = [M.mean_metric("NDCG", graded, lambda l, k=k: M.ndcg_at_k(l, k), k) for k in NDCG_KS]
    reports.append(M.mean_metric("P", graded, lambda l: M.precision_at_k(l, 5), 5))
    reports.append(M.mean_metric("MAP", graded, M.average_precision))
    reports.append(M.mean_metric("MRR", graded, M.reciprocal_rank))
    auc, roc = M.auc_report(graded)
    reports.append(auc)
    reports.extend(M.mean_metric("R", clicked, lambda l, k=k: M.recall_at_k(l, k), k) for k in RECALL_KS)
    return reports, roc


def mean_ndcg(bundle, params, hp, k=5, queries=None) -> float:
    per_q = score_judged(bundle, params, hp, queries)
    return M.mean_metric("NDCG", [qs.judged() for qs in per_q], lambda l: M.ndcg_at_k(l, k), k).value

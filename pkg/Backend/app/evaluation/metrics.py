# Backend/app/evaluation/metrics.py
"""Ranking metrics: top-k accuracy, MRR and NDCG@k.

A run is ``(ranking, gold_ids)`` or ``(ranking, gold_ids, graded)``. The
ranking is a RankedList or a plain sequence of faq ids. With ``graded`` the
gold ids are ordered best-first and the gain of the gold at position p
(0-based) is ``len(gold) - p``; otherwise every gold id has gain 1.
"""
from typing import List, Sequence, Tuple, Union

import numpy as np

from app.core.errors import EmptyRuns
from app.core.models import RankedList

Ranking = Union[RankedList, Sequence[str]]
Run = Union[Tuple[Ranking, Sequence[str]], Tuple[Ranking, Sequence[str], bool]]


def _unpack(run: Run) -> Tuple[List[str], List[str], bool]:
    ranking, gold = run[0], run[1]
    graded = bool(run[2]) if len(run) > 2 else False
    ids = ranking.faq_ids if isinstance(ranking, RankedList) else list(ranking)
    return ids, list(gold), graded


def _check(runs: Sequence[Run], k: int = 1) -> None:
    if not runs:
        raise EmptyRuns()
    if k < 1:
        raise ValueError("k must be >= 1")


def top_k_accuracy(runs: Sequence[Run], k: int) -> float:
    """Fraction of runs with at least one gold id in the first k items."""
    _check(runs, k)
    hits = []
    for run in runs:
        ids, gold, _ = _unpack(run)
        gold_set = set(gold)
        hits.append(any(faq_id in gold_set for faq_id in ids[:k]))
    return float(np.mean(hits))


def reciprocal_rank(ids: Sequence[str], gold: Sequence[str]) -> float:
    gold_set = set(gold)
    for rank, faq_id in enumerate(ids, start=1):
        if faq_id in gold_set:
            return 1.0 / rank
    return 0.0


def mrr(runs: Sequence[Run]) -> float:
    """Mean reciprocal rank of the first gold hit; 0 for runs without one."""
    _check(runs)
    return float(np.mean([reciprocal_rank(*_unpack(run)[:2]) for run in runs]))


def _gains(gold: Sequence[str], graded: bool) -> dict:
    if graded:
        return {faq_id: float(len(gold) - pos) for pos, faq_id in enumerate(gold)}
    return {faq_id: 1.0 for faq_id in gold}


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_single(ids: Sequence[str], gold: Sequence[str], k: int, graded: bool = False) -> float:
    gains = _gains(gold, graded)
    if not gains:
        return 0.0
    ranked_gains = np.array([gains.get(faq_id, 0.0) for faq_id in list(ids)[:k]])
    dcg = float(np.sum(ranked_gains * _discounts(len(ranked_gains))))
    ideal = np.sort(np.array(list(gains.values())))[::-1][:k]
    idcg = float(np.sum(ideal * _discounts(len(ideal))))
    return dcg / idcg if idcg > 0 else 0.0


def ndcg_at_k(runs: Sequence[Run], k: int) -> float:
    """Mean NDCG@k over runs; runs with an empty gold list contribute 0."""
    _check(runs, k)
    scores = []
    for run in runs:
        ids, gold, graded = _unpack(run)
        scores.append(ndcg_single(ids, gold, k, graded))
    return float(np.mean(scores))


def metric_summary(runs: Sequence[Run]) -> dict:
    """The six reported metrics for one method."""
    return {
        "top1": top_k_accuracy(runs, 1),
        "top3": top_k_accuracy(runs, 3),
        "top5": top_k_accuracy(runs, 5),
        "mrr": mrr(runs),
        "ndcg3": ndcg_at_k(runs, 3),
        "ndcg5": ndcg_at_k(runs, 5),
    }

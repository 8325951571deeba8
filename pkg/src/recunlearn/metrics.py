"""Top-K ranking metrics and CKA-based parameter divergence."""
from __future__ import annotations

import itertools
import math
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import InteractionSet
from .model import ModelParams

DEFAULT_KS = (5, 10, 15, 20)


class ShortRanking(UserWarning):
    pass


def rank_items(params: ModelParams, train: InteractionSet, user: int, k: int) -> np.ndarray:
    """Top-``k`` unseen items by score; ties broken by ascending item id."""
    if not 0 <= user < params.num_users:
        raise IndexError(f"user {user} out of range")
    scores = params.item_emb @ params.user_emb[user]
    candidates = np.setdiff1d(np.arange(params.num_items), train.user_items(user))
    # lexsort: last key is primary
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(j + 2) for j, item in enumerate(ranked[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(j + 2) for j in range(min(k, len(relevant))))
    return dcg / idcg


def _hits(ranked, relevant, k) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(1 for item in ranked[:k] if item in relevant)


def hr_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    return 1.0 if _hits(ranked, set(relevant), k) > 0 else 0.0


def precision_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    return _hits(ranked, set(relevant), k) / k


def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        return 0.0
    return _hits(ranked, relevant, k) / len(relevant)


def ranking_report(params: ModelParams, train: InteractionSet, test: InteractionSet,
                   users: Optional[Iterable[int]] = None, ks: Sequence[int] = DEFAULT_KS) -> dict:
    """Mean NDCG/HR/Precision/Recall over users with at least one test item.

    Relevance is membership in the user's test interactions.
    """
    ks = sorted(ks)
    kmax = ks[-1]
    if users is None:
        users = test.active_users()
    sums = {k: {"ndcg": 0.0, "hr": 0.0, "precision": 0.0, "recall": 0.0} for k in ks}
    n = 0
    for u in users:
        relevant = set(test.user_items(int(u)).tolist())
        if not relevant:
            continue
        ranked = rank_items(params, train, int(u), kmax).tolist()
        n += 1
        for k in ks:
            s = sums[k]
            s["ndcg"] += ndcg_at_k(ranked, relevant, k)
            s["hr"] += hr_at_k(ranked, relevant, k)
            s["precision"] += precision_at_k(ranked, relevant, k)
            s["recall"] += recall_at_k(ranked, relevant, k)
    per_k = {str(k): {m: (v / n if n else 0.0) for m, v in sums[k].items()} for k in ks}
    return {"per_k": per_k, "evaluated_user_count": n}


def ranking_long_rows(report: dict) -> list[tuple[str, int, float]]:
    return [(metric, int(k), value) for k, row in report["per_k"].items() for metric, value in row.items()]


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA between row-aligned representation matrices."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0.0 or yy == 0.0:
        return 0.0
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


class DegenerateBlock(ValueError):
    pass


CKA_BLOCKS = ("UE_unlearn", "UE_remain", "item_emb")


def block_rows(params: ModelParams, block: str, target_users) -> np.ndarray:
    target_users = np.asarray(target_users, dtype=np.int64)
    if block == "UE_unlearn":
        return params.user_emb[target_users]
    if block == "UE_remain":
        mask = np.ones(params.num_users, dtype=bool)
        mask[target_users] = False
        return params.user_emb[mask]
    if block == "item_emb":
        return params.item_emb
    raise ValueError(f"unknown block {block!r}")


def relative_cka(originals: Sequence[ModelParams], unlearned: ModelParams, block: str,
                 target_users, return_parts: bool = False):
    """CKA of ``unlearned`` against the originals, scaled by the originals' mutual CKA.

    Numerator is averaged over all originals; the single-reference form
    (first original only) is returned alongside when ``return_parts``.
    """
    if len(originals) < 2:
        raise ValueError("relative CKA needs at least 2 original models")
    blocks = [block_rows(m, block, target_users) for m in originals]
    target = block_rows(unlearned, block, target_users)
    pair = [linear_cka(a, b) for a, b in itertools.combinations(blocks, 2)]
    denom = float(np.mean(pair))
    if denom == 0.0:
        raise DegenerateBlock(f"originals have zero mutual CKA on block {block!r}")
    num = [linear_cka(b, target) for b in blocks]
    value = float(np.mean(num)) / denom
    if return_parts:
        return value, {"numerator_mean": float(np.mean(num)), "numerator_first": num[0],
                       "relative_single": num[0] / denom, "denominator": denom}
    return value

"""Desk-scale synthetic rating data with MovieLens-like structure.

Users and items get low-rank latent factors. Each user picks items with
probability increasing in affinity and item popularity, so interaction
presence carries signal that a rating model can rank on. Ratings are the
affinity mapped onto a 1-5 scale plus noise, rounded and clipped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import InteractionSet, compact


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 500
    num_items: int = 300
    rank: int = 8
    min_per_user: int = 20
    max_per_user: int = 60
    selection_temperature: float = 1.0
    popularity_scale: float = 1.0
    rating_noise: float = 0.5
    seed: int = 0


def synthetic_ratings(cfg: SyntheticConfig = SyntheticConfig()) -> InteractionSet:
    rng = np.random.default_rng(cfg.seed)
    U = rng.normal(0.0, 1.0, size=(cfg.num_users, cfg.rank)) / np.sqrt(cfg.rank)
    V = rng.normal(0.0, 1.0, size=(cfg.num_items, cfg.rank))
    popularity = rng.normal(0.0, cfg.popularity_scale, size=cfg.num_items)
    item_bias = rng.normal(0.0, 0.3, size=cfg.num_items)
    user_bias = rng.normal(0.0, 0.3, size=cfg.num_users)
    affinity = U @ V.T

    users, items, ratings = [], [], []
    for u in range(cfg.num_users):
        n = int(rng.integers(cfg.min_per_user, cfg.max_per_user + 1))
        logits = (affinity[u] + popularity) / cfg.selection_temperature
        w = np.exp(logits - logits.max())
        chosen = rng.choice(cfg.num_items, size=min(n, cfg.num_items), replace=False, p=w / w.sum())
        raw = 3.5 + affinity[u, chosen] + item_bias[chosen] + user_bias[u] \
            + rng.normal(0.0, cfg.rating_noise, size=len(chosen))
        users.append(np.full(len(chosen), u))
        items.append(chosen)
        ratings.append(np.clip(np.round(raw), 1, 5))
    data = InteractionSet(np.concatenate(users), np.concatenate(items), np.concatenate(ratings),
                          cfg.num_users, cfg.num_items,
                          np.arange(1, cfg.num_users + 1), np.arange(1, cfg.num_items + 1))
    return compact(data)


def write_movielens(data: InteractionSet, path, separator: str = "::") -> None:
    """Write raw-ID lines ``user<sep>item<sep>rating<sep>0`` (timestamp placeholder)."""
    ru = data.raw_user_ids if data.raw_user_ids is not None else np.arange(data.num_users)
    ri = data.raw_item_ids if data.raw_item_ids is not None else np.arange(data.num_items)
    with open(path, "w") as fh:
        for u, i, r in data.triples():
            rating = int(r) if float(r).is_integer() else r
            fh.write(f"{ru[u]}{separator}{ri[i]}{separator}{rating}{separator}0\n")

"""Rating data: loading, min-degree filtering, train/test splitting.

All downstream code works on dense 0-based user/item indices. The raw IDs
seen at load time are kept on the set so reports can map back.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SEPARATOR_PRESETS = {"ml1m": "::", "ml100k": "\t", "tab": "\t", "csv": ","}


class DatasetError(ValueError):
    pass


class MalformedLineError(DatasetError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}: {line.strip()!r}")


class DatasetTooSparse(DatasetError):
    pass


class Interaction(NamedTuple):
    user: int
    item: int
    rating: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _buckets(keys: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [_frozen(order[bounds[k]:bounds[k + 1]]) for k in range(n)]


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Immutable bag of (user, item, rating) triples over a fixed index space.

    ``num_users``/``num_items`` may exceed the largest index present: train and
    test halves of a split keep the index space of their parent.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    num_users: int
    num_items: int
    raw_user_ids: Optional[np.ndarray] = field(default=None, repr=False)
    raw_item_ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        ratings = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
        if not (len(users) == len(items) == len(ratings)):
            raise DatasetError("users, items and ratings must have equal length")
        if len(users):
            if users.min() < 0 or users.max() >= self.num_users:
                raise DatasetError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise DatasetError("item index out of range")
        if not np.all(np.isfinite(ratings)):
            raise DatasetError("non-finite rating")
        object.__setattr__(self, "users", _frozen(users))
        object.__setattr__(self, "items", _frozen(items))
        object.__setattr__(self, "ratings", _frozen(ratings))

    def __len__(self) -> int:
        return len(self.ratings)

    def __iter__(self):
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield Interaction(u, i, r)

    def __getitem__(self, k: int) -> Interaction:
        return Interaction(int(self.users[k]), int(self.items[k]), float(self.ratings[k]))

    @cached_property
    def by_user(self) -> list[np.ndarray]:
        """Positions of each user's interactions, indexed by user."""
        return _buckets(self.users, self.num_users)

    @cached_property
    def by_item(self) -> list[np.ndarray]:
        return _buckets(self.items, self.num_items)

    @cached_property
    def user_degree(self) -> np.ndarray:
        return _frozen(np.bincount(self.users, minlength=self.num_users))

    @cached_property
    def item_degree(self) -> np.ndarray:
        return _frozen(np.bincount(self.items, minlength=self.num_items))

    def user_items(self, user: int) -> np.ndarray:
        return self.items[self.by_user[user]]

    def active_users(self) -> np.ndarray:
        return np.flatnonzero(self.user_degree > 0)

    def pairs(self) -> np.ndarray:
        """Linear pair keys ``user * num_items + item``."""
        return self.users * self.num_items + self.items

    def take(self, positions) -> "InteractionSet":
        """Sub-set by position (boolean mask or index array), same index space."""
        positions = np.asarray(positions)
        return InteractionSet(
            self.users[positions], self.items[positions], self.ratings[positions],
            self.num_users, self.num_items, self.raw_user_ids, self.raw_item_ids,
        )

    def with_ratings(self, ratings) -> "InteractionSet":
        return InteractionSet(
            self.users, self.items, ratings,
            self.num_users, self.num_items, self.raw_user_ids, self.raw_item_ids,
        )

    def contains(self, other: "InteractionSet") -> np.ndarray:
        """Boolean mask over ``other``: which of its (user, item) pairs occur here."""
        return np.isin(other.pairs(), self.pairs())

    def difference(self, other: "InteractionSet") -> "InteractionSet":
        """Interactions whose (user, item) pair is not in ``other``."""
        return self.take(~np.isin(self.pairs(), other.pairs()))

    def restrict_users(self, users: Iterable[int]) -> "InteractionSet":
        return self.take(np.isin(self.users, np.fromiter(users, dtype=np.int64)))

    def triples(self) -> list[tuple[int, int, float]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def sparsity(self) -> float:
        return 1.0 - len(self) / float(self.num_users * self.num_items)

    def stats(self) -> dict:
        return {
            "users": int(np.count_nonzero(self.user_degree)),
            "items": int(np.count_nonzero(self.item_degree)),
            "ratings": len(self),
            "num_users": self.num_users,
            "num_items": self.num_items,
            "sparsity_percent": round(100.0 * self.sparsity(), 3),
        }


def from_triples(triples: Sequence[tuple], num_users=None, num_items=None) -> InteractionSet:
    """Build a set directly from already-dense ``(user, item, rating)`` triples."""
    arr = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
    users = arr[:, 0].astype(np.int64)
    items = arr[:, 1].astype(np.int64)
    if num_users is None:
        num_users = int(users.max()) + 1 if len(users) else 0
    if num_items is None:
        num_items = int(items.max()) + 1 if len(items) else 0
    return InteractionSet(users, items, arr[:, 2], num_users, num_items)


def _from_raw(raw_users, raw_items, ratings, path="<memory>") -> InteractionSet:
    raw_users = np.asarray(raw_users)
    raw_items = np.asarray(raw_items)
    ratings = np.asarray(ratings, dtype=np.float64)

    # keep the last occurrence of each (user, item) pair
    keys = list(zip(raw_users.tolist(), raw_items.tolist()))
    last = {k: n for n, k in enumerate(keys)}
    dupes = len(keys) - len(last)
    if dupes:
        logger.warning("%s: %d duplicate (user, item) pairs, kept last occurrence", path, dupes)
        keep = np.fromiter(sorted(last.values()), dtype=np.int64)
        raw_users, raw_items, ratings = raw_users[keep], raw_items[keep], ratings[keep]

    user_ids, users = np.unique(raw_users, return_inverse=True)
    item_ids, items = np.unique(raw_items, return_inverse=True)
    return InteractionSet(users, items, ratings, len(user_ids), len(item_ids), user_ids, item_ids)


def load_movielens(path, separator: str = "::") -> InteractionSet:
    """Read ``user<sep>item<sep>rating[<sep>...]`` lines; extra fields are ignored."""
    path = Path(path)
    separator = SEPARATOR_PRESETS.get(separator, separator)
    raw_users, raw_items, ratings = [], [], []
    try:
        fh = path.open("r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\r\n").split(separator)
            if len(fields) < 3:
                raise MalformedLineError(path, lineno, line, "expected at least 3 fields")
            try:
                u, i = int(fields[0]), int(fields[1])
            except ValueError:
                raise MalformedLineError(path, lineno, line, "non-integer user or item id") from None
            try:
                r = float(fields[2])
            except ValueError:
                raise MalformedLineError(path, lineno, line, "non-numeric rating") from None
            if not np.isfinite(r):
                raise MalformedLineError(path, lineno, line, "non-finite rating")
            raw_users.append(u)
            raw_items.append(i)
            ratings.append(r)
    return _from_raw(raw_users, raw_items, ratings, path)


def compact(data: InteractionSet) -> InteractionSet:
    """Drop users/items with no interactions and renumber densely."""
    user_keep = np.flatnonzero(data.user_degree > 0)
    item_keep = np.flatnonzero(data.item_degree > 0)
    user_map = np.full(data.num_users, -1, dtype=np.int64)
    user_map[user_keep] = np.arange(len(user_keep))
    item_map = np.full(data.num_items, -1, dtype=np.int64)
    item_map[item_keep] = np.arange(len(item_keep))
    raw_u = data.raw_user_ids[user_keep] if data.raw_user_ids is not None else user_keep
    raw_i = data.raw_item_ids[item_keep] if data.raw_item_ids is not None else item_keep
    return InteractionSet(
        user_map[data.users], item_map[data.items], data.ratings,
        len(user_keep), len(item_keep), raw_u, raw_i,
    )


def filter_min_interactions(data: InteractionSet, k: int = 5) -> InteractionSet:
    """Iteratively remove users and items with fewer than ``k`` interactions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mask = np.ones(len(data), dtype=bool)
    while True:
        u_deg = np.bincount(data.users[mask], minlength=data.num_users)
        i_deg = np.bincount(data.items[mask], minlength=data.num_items)
        new_mask = mask & (u_deg[data.users] >= k) & (i_deg[data.items] >= k)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if not mask.any():
        raise DatasetTooSparse(f"no interactions survive min-degree filtering with k={k}")
    return compact(data.take(mask))


class SplitMode(str, Enum):
    GLOBAL_RANDOM = "global_random"
    PER_USER_RANDOM = "per_user_random"


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0
    mode: SplitMode = SplitMode.GLOBAL_RANDOM

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        object.__setattr__(self, "mode", SplitMode(self.mode))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(data: InteractionSet, spec: SplitSpec) -> tuple[InteractionSet, InteractionSet]:
    """Random disjoint train/test partition sharing the parent's index space."""
    rng = np.random.default_rng(spec.seed)
    in_train = np.zeros(len(data), dtype=bool)
    if spec.mode is SplitMode.GLOBAL_RANDOM:
        n_train = _round_half_up(spec.train_fraction * len(data))
        in_train[rng.permutation(len(data))[:n_train]] = True
    else:
        for user, positions in enumerate(data.by_user):
            if len(positions) == 0:
                continue
            n_train = _round_half_up(spec.train_fraction * len(positions))
            if n_train == 0:
                raise DatasetError(
                    f"user {user} has {len(positions)} interaction(s); "
                    f"train_fraction={spec.train_fraction} leaves none for training"
                )
            in_train[rng.permutation(positions)[:n_train]] = True
    return data.take(in_train), data.take(~in_train)


CSV_HEADER = ("user", "item", "rating")


def write_csv(data: InteractionSet, path) -> None:
    """Canonical dump in dense indices; ``repr`` keeps ratings bit-exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for u, i, r in data.triples():
            w.writerow((u, i, repr(r)))


def read_csv(path, num_users: int, num_items: int) -> InteractionSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise DatasetError(f"{path}: missing header {','.join(CSV_HEADER)}")
    body = rows[1:]
    users = np.array([int(r[0]) for r in body], dtype=np.int64)
    items = np.array([int(r[1]) for r in body], dtype=np.int64)
    ratings = np.array([float(r[2]) for r in body], dtype=np.float64)
    return InteractionSet(users, items, ratings, num_users, num_items)

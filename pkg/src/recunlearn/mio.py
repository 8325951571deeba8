"""Approximated membership-inference oracle over embedding features.

A sample is a (user, interaction set) pair under some model, featurized as the
user's embedding concatenated with the mean embedding of the items in the set.
The attacker is a ReLU MLP (64, 16, 4) with a 2-way softmax head trained by
mini-batch SGD on cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from .dataset import InteractionSet
from .model import ModelParams
from .unlearner import UnlearnRequest

logger = logging.getLogger(__name__)

HIDDEN = (64, 16, 4)


class Origin(str, Enum):
    REMAINING_TRAIN = "remaining_train"
    UNLEARNED = "unlearned"
    TEST = "test"


MEMBER, NON_MEMBER = 1, 0


class MioSample(NamedTuple):
    user: int
    features: np.ndarray
    label: int
    origin: Origin


@dataclass(eq=False)
class AttackSet:
    users: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        for u, x, y, o in zip(self.users, self.features, self.labels, self.origins):
            yield MioSample(int(u), x, int(y), Origin(o))

    def take(self, idx) -> "AttackSet":
        return AttackSet(self.users[idx], self.features[idx], self.labels[idx], self.origins[idx])

    def class_sizes(self) -> dict:
        return {"member": int(np.sum(self.labels == MEMBER)),
                "non_member": int(np.sum(self.labels == NON_MEMBER))}

    def origin_sizes(self) -> dict:
        return {o.value: int(np.sum(self.origins == o.value)) for o in Origin}


def extract_features(params: ModelParams, data: InteractionSet, user: int) -> np.ndarray:
    """``[p_u || mean of q_i over the user's items in data]``."""
    items = data.user_items(user)
    if len(items) == 0:
        raise ValueError(f"user {user} has no interactions in the reference set")
    return np.concatenate([params.user_emb[user], params.item_emb[items].mean(axis=0)])


def _features(params, data, users) -> np.ndarray:
    if len(users) == 0:
        return np.zeros((0, 2 * params.embed_dim))
    return np.stack([extract_features(params, data, int(u)) for u in users])


def balance(attack: AttackSet, rng: np.random.Generator) -> AttackSet:
    """Downsample the larger class to the size of the smaller one."""
    pos = np.flatnonzero(attack.labels == MEMBER)
    neg = np.flatnonzero(attack.labels == NON_MEMBER)
    n = min(len(pos), len(neg))
    keep = np.concatenate([
        pos if len(pos) == n else rng.choice(pos, n, replace=False),
        neg if len(neg) == n else rng.choice(neg, n, replace=False),
    ])
    return attack.take(np.sort(keep))


def build_attack_set(params: ModelParams, train: InteractionSet, test: InteractionSet,
                     request: UnlearnRequest, seed: int = 0, balanced: bool = True) -> AttackSet:
    """Origin-tagged member / non-member samples under the evaluated model ``params``.

    ``train`` is the original training set, so unlearned users are featurized
    with the interactions they withdrew. Remaining users who also have test
    interactions are split at random between a member role (featurized on
    train items) and a test role (featurized on test items), so no user
    carries both labels. Target users contribute their withdrawn lineage and,
    where available, a test-role sample.
    """
    rng = np.random.default_rng(seed)
    targets = np.unique(request.target_users)
    train_users = train.active_users()
    test_users = test.active_users() if len(test) else np.zeros(0, dtype=np.int64)
    remaining = np.setdiff1d(train_users, targets)

    with_test = np.intersect1d(remaining, test_users)
    test_role = rng.permutation(with_test)[: len(with_test) // 2]
    members = np.setdiff1d(remaining, test_role)
    test_only = np.setdiff1d(test_users, train_users)
    test_side = np.concatenate([np.sort(test_role), test_only,
                                np.intersect1d(targets, test_users)]).astype(np.int64)

    parts = [
        (members, _features(params, train, members), MEMBER, Origin.REMAINING_TRAIN),
        (targets, _features(params, train, targets), NON_MEMBER, Origin.UNLEARNED),
        (test_side, _features(params, test, test_side), NON_MEMBER, Origin.TEST),
    ]
    attack = AttackSet(
        np.concatenate([p[0] for p in parts]).astype(np.int64),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([np.full(len(p[0]), p[2]) for p in parts]).astype(np.int64),
        np.concatenate([np.full(len(p[0]), p[3].value, dtype=object) for p in parts]),
    )
    if not np.all(np.isfinite(attack.features)):
        raise ValueError("non-finite attack features")
    sizes = attack.class_sizes()
    if min(sizes.values()) == 0:
        raise ValueError(f"attack set has an empty class: {sizes}")
    return balance(attack, rng) if balanced else attack


@dataclass(frozen=True)
class MioConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    batch_size: int = 32
    seed: int = 0
    standardize: bool = True


@dataclass(eq=False)
class MioModel:
    weights: list
    biases: list
    config: MioConfig = field(default_factory=MioConfig)
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    final_loss: float = float("nan")

    def _prep(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def forward(self, x: np.ndarray) -> tuple[list, np.ndarray]:
        acts = [self._prep(x)]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(np.maximum(acts[-1] @ W + b, 0.0))
        logits = acts[-1] @ self.weights[-1] + self.biases[-1]
        return acts, softmax(logits)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities, columns (non_member, member)."""
        return self.forward(x)[1]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_mio(in_dim: int, config: MioConfig = MioConfig(), hidden=HIDDEN) -> MioModel:
    rng = np.random.default_rng(config.seed)
    sizes = [in_dim, *hidden, 2]
    weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return MioModel(weights, biases, config)


def zero_mio(in_dim: int, hidden=HIDDEN) -> MioModel:
    sizes = [in_dim, *hidden, 2]
    return MioModel([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                    [np.zeros(b) for b in sizes[1:]])


def cross_entropy(proba: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(proba[np.arange(len(labels)), labels], 1e-12, None))))


def train_mio(features: np.ndarray, labels: np.ndarray, config: MioConfig = MioConfig()) -> MioModel:
    """Mini-batch SGD on mean cross-entropy; deterministic in ``config.seed``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("MIO training needs both classes")
    model = init_mio(X.shape[1], config)
    if config.standardize:
        model.mean = X.mean(axis=0)
        model.scale = X.std(axis=0) + 1e-12
    rng = np.random.default_rng([config.seed, 1])
    onehot = np.eye(2)[y]
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            b = order[start:start + config.batch_size]
            acts, proba = model.forward(X[b])
            delta = (proba - onehot[b]) / len(b)
            for layer in range(len(model.weights) - 1, -1, -1):
                gW = acts[layer].T @ delta
                gb = delta.sum(axis=0)
                if layer > 0:
                    delta = (delta @ model.weights[layer].T) * (acts[layer] > 0)
                model.weights[layer] -= lr * gW
                model.biases[layer] -= lr * gb
        loss = cross_entropy(model.predict_proba(X), y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"MIO training diverged at epoch {epoch + 1}")
    model.final_loss = loss
    return model


def mio_score(model: MioModel, features: np.ndarray) -> np.ndarray | float:
    """Member-class probability."""
    p = model.predict_proba(features)[:, MEMBER]
    return float(p[0]) if np.ndim(features) == 1 else p


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC, ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == MEMBER]
    neg = scores[labels == NON_MEMBER]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC is undefined with a single class")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    # average ranks over tie groups
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(allv)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def completeness_report(model: MioModel, features: np.ndarray, labels: np.ndarray) -> dict:
    scores = mio_score(model, np.atleast_2d(features))
    labels = np.asarray(labels)
    acc = float(np.mean((scores >= 0.5).astype(int) == labels))
    return {"acc": acc, "auc": auc_score(scores, labels),
            "n_member": int(np.sum(labels == MEMBER)), "n_non_member": int(np.sum(labels == NON_MEMBER))}


def _stratified_split(labels: np.ndarray, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    train_idx, hold_idx = [], []
    for c in (MEMBER, NON_MEMBER):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(frac * len(idx)))
        train_idx.append(idx[:cut])
        hold_idx.append(idx[cut:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(hold_idx))


def assess_completeness(params: ModelParams, train: InteractionSet, test: InteractionSet,
                        request: UnlearnRequest, config: MioConfig = MioConfig(),
                        seed: int = 0, train_fraction: float = 0.8) -> dict:
    """Train an MIO on the evaluated model and query it with the withdrawn lineage.

    The MIO is fit on reference samples (remaining members vs. test-role
    samples of non-target users, balanced, 80/20 split for a held-out attack
    score). The query contrasts each target user's withdrawn lineage (label
    member: it *was* training data) with the same users' test interactions.
    AUC near 0.5 on the query means the lineage is no longer detectable.
    """
    rng = np.random.default_rng(seed)
    attack = build_attack_set(params, train, test, request, seed=seed, balanced=False)
    targets = set(np.unique(request.target_users).tolist())
    is_target = np.array([u in targets for u in attack.users.tolist()])
    reference = balance(attack.take(np.flatnonzero(~is_target)), rng)
    fit_idx, hold_idx = _stratified_split(reference.labels, train_fraction, rng)
    mio = train_mio(reference.features[fit_idx], reference.labels[fit_idx],
                    MioConfig(**{**config.__dict__, "seed": int(rng.integers(2 ** 31))}))

    query = attack.take(np.flatnonzero(is_target))
    q_labels = (query.origins == Origin.UNLEARNED.value).astype(np.int64)
    out = {
        "attack_holdout": completeness_report(mio, reference.features[hold_idx], reference.labels[hold_idx]),
        "attack_fit": completeness_report(mio, reference.features[fit_idx], reference.labels[fit_idx]),
        "mio_final_loss": mio.final_loss,
        "reference_sizes": reference.class_sizes(),
        "seed": seed,
    }
    if len(np.unique(q_labels)) == 2:
        out["query"] = completeness_report(mio, query.features, q_labels)
    return out

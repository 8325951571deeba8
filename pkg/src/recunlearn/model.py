"""Matrix-factorization recommender with analytic derivatives.

The per-interaction loss is

    l(z) = 1/2 (p_u . q_i - r)^2 + lambda/2 (|p_u|^2 + |q_i|^2)

and the training objective is the plain sum of ``l`` over the training set.
Regularization is therefore applied once per occurrence: a user with ``n``
ratings is effectively penalized by ``n * lambda``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dataset import Interaction, InteractionSet

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "recunlearn.params/1"


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")


@dataclass(frozen=True)
class ModelHyper:
    embed_dim: int = 64
    learning_rate: float = 0.001
    reg_lambda: float = 0.01
    epochs: int = 50
    init_std: float = 0.01
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.init_std <= 0:
            raise ValueError("init_std must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(eq=False)
class ModelParams:
    user_emb: np.ndarray
    item_emb: np.ndarray
    hyper: ModelHyper
    loss_history: list = field(default_factory=list, repr=False)

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.user_emb.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.user_emb.copy(), self.item_emb.copy(), self.hyper,
                           list(self.loss_history))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.user_emb.ravel(), self.item_emb.ravel()])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.user_emb)) and np.all(np.isfinite(self.item_emb)))

    def same_as(self, other: "ModelParams") -> bool:
        return (np.array_equal(self.user_emb, other.user_emb)
                and np.array_equal(self.item_emb, other.item_emb))


def init_params(num_users: int, num_items: int, hyper: ModelHyper) -> ModelParams:
    if num_users < 1 or num_items < 1:
        raise ValueError("num_users and num_items must be >= 1")
    rng = np.random.default_rng(hyper.seed)
    user_emb = rng.normal(0.0, hyper.init_std, size=(num_users, hyper.embed_dim))
    item_emb = rng.normal(0.0, hyper.init_std, size=(num_items, hyper.embed_dim))
    return ModelParams(user_emb, item_emb, hyper)


def predict(params: ModelParams, user: int, item: int) -> float:
    if not (0 <= user < params.num_users and 0 <= item < params.num_items):
        raise IndexError(f"(user={user}, item={item}) out of range")
    return float(params.user_emb[user] @ params.item_emb[item])


def predict_batch(params: ModelParams, users, items) -> np.ndarray:
    return np.einsum("nd,nd->n", params.user_emb[users], params.item_emb[items])


def score_all(params: ModelParams, user: int) -> np.ndarray:
    return params.item_emb @ params.user_emb[user]


def point_loss(params: ModelParams, z: Interaction) -> float:
    u, i, r = z
    p, q = params.user_emb[u], params.item_emb[i]
    lam = params.hyper.reg_lambda
    return 0.5 * (p @ q - r) ** 2 + 0.5 * lam * (p @ p + q @ q)


def pointwise_losses(params: ModelParams, data: InteractionSet) -> np.ndarray:
    p = params.user_emb[data.users]
    q = params.item_emb[data.items]
    err = np.einsum("nd,nd->n", p, q) - data.ratings
    lam = params.hyper.reg_lambda
    return 0.5 * err ** 2 + 0.5 * lam * (np.einsum("nd,nd->n", p, p) + np.einsum("nd,nd->n", q, q))


def total_loss(params: ModelParams, data: InteractionSet) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.sum(pointwise_losses(params, data)))


def grad_point(params: ModelParams, z: Interaction) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``point_loss`` w.r.t. (p_u, q_i); every other row is zero."""
    u, i, r = z
    p, q = params.user_emb[u], params.item_emb[i]
    lam = params.hyper.reg_lambda
    e = p @ q - r
    return e * q + lam * p, e * p + lam * q


def _scatter(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse (n x len(index)) matrix that sums rows of a per-interaction array by ``index``."""
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def gradients(params: ModelParams, data: InteractionSet, ratings=None) -> tuple[np.ndarray, np.ndarray]:
    """Summed gradient of ``sum_z l(z)`` as dense (user, item) matrices.

    ``ratings`` overrides the stored ratings, which is how surrogate
    interactions are differentiated.
    """
    r = data.ratings if ratings is None else np.asarray(ratings, dtype=np.float64)
    lam = params.hyper.reg_lambda
    p = params.user_emb[data.users]
    q = params.item_emb[data.items]
    e = (np.einsum("nd,nd->n", p, q) - r)[:, None]
    gu = _scatter(data.users, params.num_users) @ (e * q + lam * p)
    gi = _scatter(data.items, params.num_items) @ (e * p + lam * q)
    return np.asarray(gu), np.asarray(gi)


def user_hessian_block(params: ModelParams, data: InteractionSet, user: int) -> np.ndarray:
    """Exact Hessian of ``sum_{z in data, z.user == user} l(z)`` w.r.t. ``p_user``, items held fixed.

    Equals ``sum_i q_i q_i^T + n_u * lambda * I`` because the regularizer is
    charged per interaction.
    """
    q = params.item_emb[data.user_items(user)]
    d = params.embed_dim
    return q.T @ q + len(q) * params.hyper.reg_lambda * np.eye(d)


def train(
    data: InteractionSet,
    hyper: ModelHyper,
    init: Optional[ModelParams] = None,
    freeze_items: bool = False,
) -> ModelParams:
    """Mini-batch SGD on the summed loss.

    Each step applies ``lr * (sum of per-interaction gradients in the batch)``
    so the learning rate has per-sample meaning regardless of batch size.
    Shuffling is driven by ``hyper.seed``. ``init`` starts from existing
    parameters (copied) instead of a fresh Gaussian draw.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty interaction set")
    params = init.copy() if init is not None else init_params(data.num_users, data.num_items, hyper)
    params.hyper = hyper
    params.loss_history = [total_loss(params, data)]
    rng = np.random.default_rng([hyper.seed, 1])
    P, Q = params.user_emb, params.item_emb
    lr, lam, bs = hyper.learning_rate, hyper.reg_lambda, hyper.batch_size
    users, items, ratings = data.users, data.items, data.ratings
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), bs):
            b = order[start:start + bs]
            u, i = users[b], items[b]
            p, q = P[u], Q[i]
            e = (np.einsum("nd,nd->n", p, q) - ratings[b])[:, None]
            gp = e * q + lam * p
            gq = e * p + lam * q
            np.add.at(P, u, -lr * gp)
            if not freeze_items:
                np.add.at(Q, i, -lr * gq)
        loss = total_loss(params, data)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, loss)
        params.loss_history.append(loss)
        logger.debug("epoch %d loss %.6f", epoch, loss)
    return params


def save_params(params: ModelParams, path) -> None:
    meta = {"schema": CHECKPOINT_SCHEMA, "hyper": asdict(params.hyper),
            "shapes": {"user_emb": list(params.user_emb.shape), "item_emb": list(params.item_emb.shape)}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, user_emb=params.user_emb, item_emb=params.item_emb,
                 meta=np.array(json.dumps(meta, sort_keys=True)),
                 loss_history=np.asarray(params.loss_history, dtype=np.float64))


def load_params(path) -> ModelParams:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
        params = ModelParams(z["user_emb"].copy(), z["item_emb"].copy(),
                             ModelHyper(**meta["hyper"]), z["loss_history"].tolist())
    return params


def with_hyper(params: ModelParams, **changes) -> ModelParams:
    out = params.copy()
    out.hyper = replace(params.hyper, **changes)
    return out

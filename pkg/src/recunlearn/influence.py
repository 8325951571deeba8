"""Influence-function parameter updates for removing or replacing interactions.

Every update here is a damped Newton step toward the minimizer of a *target*
objective, taken from the current parameters:

    removal      L'(theta) = L(theta) - sum_{z in E} l(z)
    replacement  L'(theta) = L(theta) - sum_{z in E} [l(z) - l(zbar)]

    delta = (H' + damping I)^{-1} (sum_E grad l(z) [- sum_E grad l(zbar)] - g)

where ``H'`` is the Hessian of ``L'`` and ``g = grad L`` is the full-data
gradient (the compensation term). ``g`` vanishes at an exact minimizer of
``L``; after finite SGD it corrects for the remaining gap. The linear system
is solved by conjugate gradients on Hessian-vector products, never by forming
``H'``.

The selected-users scope keeps only the target users' embedding rows free,
treating every other row as a constant. The Hessian is then block diagonal,
one ``embed_dim`` block per user.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import Interaction, InteractionSet
from .model import ModelParams, gradients

logger = logging.getLogger(__name__)


class CGBreakdown(FloatingPointError):
    pass


class NoCollaborativeSignal(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 0.01
    cg_tol: float = 1e-6
    cg_max_iter: int = 100
    use_compensation: bool = True

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be > 0")
        if self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be >= 1")


class ScopeKind(str, Enum):
    FULL = "full"
    SELECTED_USERS = "selected_users"


@dataclass(frozen=True, eq=False)
class Scope:
    kind: ScopeKind
    users: Optional[np.ndarray] = None

    @classmethod
    def full(cls) -> "Scope":
        return cls(ScopeKind.FULL)

    @classmethod
    def selected(cls, users) -> "Scope":
        users = np.unique(np.asarray(list(users) if not isinstance(users, np.ndarray) else users,
                                     dtype=np.int64))
        return cls(ScopeKind.SELECTED_USERS, users)

    @property
    def is_full(self) -> bool:
        return self.kind is ScopeKind.FULL

    def dim(self, params: ModelParams) -> int:
        if self.is_full:
            return (params.num_users + params.num_items) * params.embed_dim
        return len(self.users) * params.embed_dim

    def flatten(self, gu: np.ndarray, gi: np.ndarray) -> np.ndarray:
        if self.is_full:
            return np.concatenate([gu.ravel(), gi.ravel()])
        return gu[self.users].ravel()

    def split(self, vec: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        """Vector -> (user block, item block) shaped as embedding rows."""
        d = params.embed_dim
        if self.is_full:
            nu = params.num_users * d
            return vec[:nu].reshape(-1, d), vec[nu:].reshape(-1, d)
        return vec.reshape(-1, d), np.zeros((0, d))

    def rows(self, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        if self.is_full:
            return np.arange(params.num_users), np.arange(params.num_items)
        return self.users, np.zeros(0, dtype=np.int64)


def _scatter(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


class HessianOperator:
    """``v -> (H + damping I) v`` for the summed loss over ``data`` within ``scope``."""

    def __init__(self, params: ModelParams, data: InteractionSet, scope: Scope, damping: float = 0.0):
        self.scope = scope
        self.damping = damping
        self.lam = params.hyper.reg_lambda
        self.d = params.embed_dim
        self.dim = scope.dim(params)
        if scope.is_full:
            self.nu, self.ni = params.num_users, params.num_items
            self.u, self.i = data.users, data.items
            self.p = params.user_emb[self.u]
            self.q = params.item_emb[self.i]
            self.e = (np.einsum("nd,nd->n", self.p, self.q) - data.ratings)[:, None]
            self.su = _scatter(self.u, self.nu)
            self.si = _scatter(self.i, self.ni)
        else:
            pos = np.full(params.num_users, -1, dtype=np.int64)
            pos[scope.users] = np.arange(len(scope.users))
            keep = pos[data.users] >= 0
            self.pos = pos[data.users[keep]]
            self.q = params.item_emb[data.items[keep]]
            self.deg = np.bincount(self.pos, minlength=len(scope.users)).astype(float)[:, None]
            self.s = _scatter(self.pos, len(scope.users))

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"vector has shape {v.shape}, scope dimension is {self.dim}")
        if not self.scope.is_full:
            return self.blocks(v.reshape(-1, self.d)).ravel()
        nud = self.nu * self.d
        vp = v[:nud].reshape(self.nu, self.d)
        vq = v[nud:].reshape(self.ni, self.d)
        a, b = vp[self.u], vq[self.i]
        s = (np.einsum("nd,nd->n", self.q, a) + np.einsum("nd,nd->n", self.p, b))[:, None]
        hp = self.su @ (s * self.q + self.e * b + self.lam * a)
        hq = self.si @ (s * self.p + self.e * a + self.lam * b)
        out = np.concatenate([np.asarray(hp).ravel(), np.asarray(hq).ravel()])
        return out + self.damping * v

    def blocks(self, V: np.ndarray) -> np.ndarray:
        """Selected scope only: apply each user's block to the matching row of ``V``."""
        s = np.einsum("nd,nd->n", self.q, V[self.pos])[:, None]
        return np.asarray(self.s @ (s * self.q)) + (self.lam * self.deg + self.damping) * V


def hvp(params: ModelParams, data: InteractionSet, scope: Scope, v: np.ndarray,
        damping: float = 0.0) -> np.ndarray:
    return HessianOperator(params, data, scope, damping)(v)


class CGResult(NamedTuple):
    x: np.ndarray
    residual: float
    iters: int
    converged: bool


def cg_solve(operator: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
             config: SolverConfig = SolverConfig()) -> CGResult:
    """Conjugate gradients for a symmetric positive-definite ``operator``.

    Stops at relative residual ``cg_tol``. On iteration cap or non-positive
    curvature it returns the best iterate seen with ``converged=False``; on an
    indefinite operator the later iterates can grow without bound, so the
    lowest-residual one is the safe choice (possibly the zero vector).
    """
    b = np.asarray(rhs, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, 0.0, 0, True)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    best_x, best_res = x.copy(), 1.0
    for k in range(1, config.cg_max_iter + 1):
        ap = operator(p)
        pap = p @ ap
        if not np.isfinite(pap):
            raise CGBreakdown(f"non-finite curvature at iteration {k}; try a larger damping")
        if pap <= 0.0:
            logger.warning("CG hit non-positive curvature at iteration %d; stopping early", k)
            return CGResult(best_x, best_res, k, False)
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = r @ r
        res = np.sqrt(rr_new) / bnorm
        if not np.isfinite(res):
            raise CGBreakdown(f"non-finite residual at iteration {k}; try a larger damping")
        if res < best_res:
            best_x, best_res = x, res
        if res <= config.cg_tol:
            true_res = np.linalg.norm(operator(x) - b) / bnorm
            return CGResult(x, float(true_res), k, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    logger.warning("CG stopped at %d iterations with relative residual %.3g", config.cg_max_iter, best_res)
    return CGResult(best_x, float(best_res), config.cg_max_iter, False)


def block_cg_solve(operator: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
                   config: SolverConfig = SolverConfig()) -> CGResult:
    """Independent CG solves for a block-diagonal operator, one block per row.

    ``operator`` maps an (n_blocks, d) array to the same shape, row ``k`` only
    depending on row ``k``. Each block stops at its own relative residual
    ``cg_tol``; ``iters`` is the maximum over blocks and ``residual`` the worst
    block's relative residual.
    """
    B = np.asarray(rhs, dtype=np.float64)
    bnorm = np.linalg.norm(B, axis=1)
    X = np.zeros_like(B)
    active = bnorm > 0
    if not active.any():
        return CGResult(X.ravel(), 0.0, 0, True)
    R = B.copy()
    P = R.copy()
    rr = np.einsum("nd,nd->n", R, R)
    safe = np.where(active, bnorm, 1.0)
    stalled = np.zeros(len(B), dtype=bool)
    iters = 0
    for k in range(1, config.cg_max_iter + 1):
        iters = k
        AP = operator(P)
        pap = np.einsum("nd,nd->n", P, AP)
        if not np.all(np.isfinite(pap)):
            raise CGBreakdown(f"non-finite curvature at iteration {k}; try a larger damping")
        bad = active & (pap <= 0.0)
        if bad.any():
            logger.warning("CG hit non-positive curvature in %d block(s)", int(bad.sum()))
            stalled |= bad
            active &= ~bad
        alpha = np.where(active, rr / np.where(active, pap, 1.0), 0.0)[:, None]
        X = X + alpha * P
        R = R - alpha * AP
        rr_new = np.einsum("nd,nd->n", R, R)
        res = np.sqrt(rr_new) / safe
        if not np.all(np.isfinite(res)):
            raise CGBreakdown(f"non-finite residual at iteration {k}; try a larger damping")
        active &= res > config.cg_tol
        if not active.any():
            break
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)[:, None]
        P = np.where(active[:, None], R + beta * P, P)
        rr = rr_new
    true_res = np.linalg.norm(operator(X) - B, axis=1) / safe
    worst = float(true_res[bnorm > 0].max())
    converged = bool(not active.any() and not stalled.any())
    if not converged:
        logger.warning("block CG: %d block(s) unconverged, worst relative residual %.3g",
                       int((active | stalled).sum()), worst)
    return CGResult(X.ravel(), worst, iters, converged)


class SurrogateSource(str, Enum):
    USER_AVERAGE = "user_average"
    ITEM_AVERAGE = "item_average"


class SurrogateInteraction(NamedTuple):
    base: Interaction
    surrogate_rating: float
    source: SurrogateSource

    @property
    def as_interaction(self) -> Interaction:
        return Interaction(self.base.user, self.base.item, self.surrogate_rating)


def _remaining_means(train: InteractionSet, E: InteractionSet):
    rest = train.difference(E)
    u_cnt = np.bincount(rest.users, minlength=train.num_users)
    u_sum = np.bincount(rest.users, weights=rest.ratings, minlength=train.num_users)
    i_cnt = np.bincount(rest.items, minlength=train.num_items)
    i_sum = np.bincount(rest.items, weights=rest.ratings, minlength=train.num_items)
    return u_cnt, u_sum, i_cnt, i_sum


def build_surrogate(train: InteractionSet, E: InteractionSet, z: Interaction) -> SurrogateInteraction:
    """Replace ``z``'s rating by its user's mean remaining rating (item mean as fallback)."""
    u_cnt, u_sum, i_cnt, i_sum = _remaining_means(train, E)
    return _surrogate_from_means(Interaction(*z), u_cnt, u_sum, i_cnt, i_sum)


def _surrogate_from_means(z: Interaction, u_cnt, u_sum, i_cnt, i_sum) -> SurrogateInteraction:
    if u_cnt[z.user] > 0:
        return SurrogateInteraction(z, u_sum[z.user] / u_cnt[z.user], SurrogateSource.USER_AVERAGE)
    if i_cnt[z.item] > 0:
        return SurrogateInteraction(z, i_sum[z.item] / i_cnt[z.item], SurrogateSource.ITEM_AVERAGE)
    raise NoCollaborativeSignal(f"user {z.user} and item {z.item} have no remaining ratings")


def build_surrogates(train: InteractionSet, E: InteractionSet) -> list[Optional[SurrogateInteraction]]:
    """One surrogate per point of ``E``; ``None`` where no collaborative signal remains."""
    means = _remaining_means(train, E)
    out = []
    for z in E:
        try:
            out.append(_surrogate_from_means(z, *means))
        except NoCollaborativeSignal:
            out.append(None)
    return out


@dataclass(eq=False)
class InfluenceEstimate:
    """Parameter deltas, stored with the sign that ``apply_update`` adds."""

    scope: ScopeKind
    user_rows: np.ndarray
    user_delta: np.ndarray
    item_rows: np.ndarray
    item_delta: np.ndarray
    cg_residual: float = 0.0
    cg_iters: int = 0
    converged: bool = True
    damping: float = 0.0
    compensation_norm: float = 0.0
    method: str = "if"
    degraded_points: int = 0

    @property
    def deltas(self) -> dict:
        out = {("user", int(u)): d for u, d in zip(self.user_rows, self.user_delta)}
        out.update({("item", int(i)): d for i, d in zip(self.item_rows, self.item_delta)})
        return out

    def negated(self) -> "InfluenceEstimate":
        return InfluenceEstimate(self.scope, self.user_rows, -self.user_delta, self.item_rows,
                                 -self.item_delta, self.cg_residual, self.cg_iters, self.converged,
                                 self.damping, self.compensation_norm, self.method,
                                 self.degraded_points)

    def report(self) -> dict:
        u_norms = np.linalg.norm(self.user_delta, axis=1) if len(self.user_rows) else np.zeros(0)
        i_norms = np.linalg.norm(self.item_delta, axis=1) if len(self.item_rows) else np.zeros(0)
        return {
            "method": self.method,
            "scope": self.scope.value,
            "cg_residual": self.cg_residual,
            "cg_iters": self.cg_iters,
            "converged": self.converged,
            "damping": self.damping,
            "compensation_norm": self.compensation_norm,
            "degraded_points": self.degraded_points,
            "user_rows_updated": int(len(self.user_rows)),
            "item_rows_updated": int(len(self.item_rows)),
            "user_delta_norm": float(np.linalg.norm(u_norms)),
            "item_delta_norm": float(np.linalg.norm(i_norms)),
            "max_user_row_delta": float(u_norms.max()) if len(u_norms) else 0.0,
            "max_item_row_delta": float(i_norms.max()) if len(i_norms) else 0.0,
            "user_row_delta_norms": {int(u): float(n) for u, n in zip(self.user_rows, u_norms)}
            if self.scope is ScopeKind.SELECTED_USERS else {},
        }


def _check_subset(train: InteractionSet, E: InteractionSet) -> None:
    if (E.num_users, E.num_items) != (train.num_users, train.num_items):
        raise ValueError("E and train must share an index space")
    if not np.all(train.contains(E)):
        raise ValueError("every point of E must be in the training set")


def _newton_step(params, train, target, scope, rhs_gu, rhs_gi, config, method, degraded=0):
    rhs = scope.flatten(rhs_gu, rhs_gi)
    comp_norm = 0.0
    if config.use_compensation:
        g = scope.flatten(*gradients(params, train))
        comp_norm = float(np.linalg.norm(g))
        rhs = rhs - g
    op = HessianOperator(params, target, scope, config.damping)
    if scope.is_full:
        res = cg_solve(op, rhs, config)
    else:
        res = block_cg_solve(op.blocks, rhs.reshape(-1, params.embed_dim), config)
    du, di = scope.split(res.x, params)
    user_rows, item_rows = scope.rows(params)
    return InfluenceEstimate(scope.kind, user_rows, du, item_rows, di, res.residual, res.iters,
                             res.converged, config.damping, comp_norm, method, degraded)


def influence_if(params: ModelParams, train: InteractionSet, E: InteractionSet, scope: Scope,
                 config: SolverConfig = SolverConfig()) -> InfluenceEstimate:
    """One-step removal of ``E``: ``theta + (H_rest + damping)^{-1} (sum_E grad l - g)``."""
    _check_subset(train, E)
    gu, gi = gradients(params, E)
    return _newton_step(params, train, train.difference(E), scope, gu, gi, config, "if")


def influence_cif(params: ModelParams, train: InteractionSet, E: InteractionSet,
                  surrogates: Sequence[Optional[SurrogateInteraction]], scope: Scope,
                  config: SolverConfig = SolverConfig()) -> InfluenceEstimate:
    """One-step replacement of each ``z`` in ``E`` by its surrogate ``zbar``.

    Points whose surrogate is ``None`` are removed outright, as in ``influence_if``.
    """
    _check_subset(train, E)
    if len(surrogates) != len(E):
        raise ValueError(f"expected {len(E)} surrogates, got {len(surrogates)}")
    has = np.array([s is not None for s in surrogates], dtype=bool)
    for z, s in zip(E, surrogates):
        if s is not None and (s.base.user, s.base.item) != (z.user, z.item):
            raise ValueError(f"surrogate {s} does not match interaction {z}")
    sur = E.take(has).with_ratings([s.surrogate_rating for s in surrogates if s is not None])
    gu, gi = gradients(params, E)
    su, si = gradients(params, sur)
    rest = train.difference(E)
    target = InteractionSet(
        np.concatenate([rest.users, sur.users]), np.concatenate([rest.items, sur.items]),
        np.concatenate([rest.ratings, sur.ratings]), train.num_users, train.num_items,
    )
    return _newton_step(params, train, target, scope, gu - su, gi - si, config, "cif",
                        int(np.count_nonzero(~has)))


def apply_update(params: ModelParams, estimate: InfluenceEstimate) -> ModelParams:
    d = params.embed_dim
    if estimate.user_delta.shape != (len(estimate.user_rows), d) or \
            estimate.item_delta.shape != (len(estimate.item_rows), d):
        raise ValueError("estimate shapes do not match the parameters")
    if len(estimate.user_rows) and estimate.user_rows.max() >= params.num_users:
        raise ValueError("estimate references a user row outside the parameters")
    if len(estimate.item_rows) and estimate.item_rows.max() >= params.num_items:
        raise ValueError("estimate references an item row outside the parameters")
    out = params.copy()
    out.user_emb[estimate.user_rows] += estimate.user_delta
    out.item_emb[estimate.item_rows] += estimate.item_delta
    return out

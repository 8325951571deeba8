"""Withdrawal requests and the unlearning strategies that serve them."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .dataset import InteractionSet
from .influence import (
    Scope,
    SolverConfig,
    apply_update,
    build_surrogates,
    influence_cif,
    influence_if,
)
from .model import ModelHyper, ModelParams, train as train_model
from .seeding import derive_seed

logger = logging.getLogger(__name__)


class RequestKind(str, Enum):
    USER_WISE = "user_wise"
    SAMPLE_WISE = "sample_wise"


class Strategy(str, Enum):
    RETRAIN = "retrain"
    IF_FULL = "if_full"
    SIF = "sif"
    CIF_FULL = "cif_full"
    SCIF = "scif"

    @property
    def selective(self) -> bool:
        return self in (Strategy.SIF, Strategy.SCIF)

    @property
    def collaborative(self) -> bool:
        return self in (Strategy.CIF_FULL, Strategy.SCIF)


@dataclass(frozen=True, eq=False)
class UnlearnRequest:
    kind: RequestKind
    target_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_points: Optional[InteractionSet] = None
    alpha_percent: Optional[float] = None
    seed: Optional[int] = None

    def expand(self, train: InteractionSet) -> InteractionSet:
        """The withdrawn interactions ``E`` as a subset of ``train``."""
        if self.kind is RequestKind.USER_WISE:
            bad = [int(u) for u in self.target_users
                   if u < 0 or u >= train.num_users or train.user_degree[u] == 0]
            if bad:
                raise ValueError(f"target users without training interactions: {bad[:10]}")
            return train.restrict_users(self.target_users)
        pts = self.target_points
        if pts is None:
            raise ValueError("sample-wise request without target points")
        missing = ~train.contains(pts)
        if missing.any():
            raise ValueError(f"{int(missing.sum())} target points are not in the training set")
        return train.take(np.isin(train.pairs(), pts.pairs()))

    def affected_users(self, train: InteractionSet) -> np.ndarray:
        if self.kind is RequestKind.USER_WISE:
            return np.unique(self.target_users)
        return np.unique(self.expand(train).users)

    def describe(self, train: Optional[InteractionSet] = None) -> dict:
        out = {"kind": self.kind.value, "alpha_percent": self.alpha_percent, "seed": self.seed,
               "num_target_users": int(len(self.target_users))}
        if train is not None:
            e = self.expand(train)
            out["num_points"] = len(e)
            out["fraction_of_train"] = len(e) / max(len(train), 1)
        return out


def user_request(users, seed=None) -> UnlearnRequest:
    return UnlearnRequest(RequestKind.USER_WISE, np.unique(np.asarray(list(users), dtype=np.int64)),
                          seed=seed)


def sample_request(points: InteractionSet) -> UnlearnRequest:
    return UnlearnRequest(RequestKind.SAMPLE_WISE, np.unique(points.users), target_points=points)


def make_rand_at(train: InteractionSet, alpha_percent: float, seed: int) -> UnlearnRequest:
    """rand@alpha: withdraw all training data of a uniform alpha% of the users."""
    if not 0 < alpha_percent <= 100:
        raise ValueError("alpha_percent must be in (0, 100]")
    users = train.active_users()
    n = int(np.floor(alpha_percent / 100.0 * len(users) + 0.5))
    if n == 0:
        raise ValueError(f"rand@{alpha_percent} selects no users out of {len(users)}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(users, size=n, replace=False))
    return UnlearnRequest(RequestKind.USER_WISE, chosen, alpha_percent=alpha_percent, seed=seed)


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.SCIF
    solver: SolverConfig = SolverConfig()
    retrain_hyper: Optional[ModelHyper] = None
    # "fresh": new seed derived from the original, "same": reuse it
    retrain_seed_mode: str = "fresh"

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.retrain_seed_mode not in ("fresh", "same"):
            raise ValueError("retrain_seed_mode must be 'fresh' or 'same'")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "solver": asdict(self.solver),
            "retrain_hyper": asdict(self.retrain_hyper) if self.retrain_hyper else None,
            "retrain_seed_mode": self.retrain_seed_mode,
        }


@dataclass(eq=False)
class UnlearnOutcome:
    params_after: ModelParams
    wall_time_seconds: float
    strategy: StrategyConfig
    request: UnlearnRequest
    num_points: int
    diagnostics: dict

    def report(self) -> dict:
        return {
            "strategy": self.strategy.strategy.value,
            "alpha_percent": self.request.alpha_percent,
            "num_target_users": int(len(self.request.target_users)),
            "num_points": self.num_points,
            "wall_time_seconds": self.wall_time_seconds,
            "config": self.strategy.to_dict(),
            "diagnostics": self.diagnostics,
        }


def retrain_hyper_for(model: ModelParams, cfg: StrategyConfig, request: UnlearnRequest) -> ModelHyper:
    hyper = cfg.retrain_hyper or model.hyper
    if cfg.retrain_seed_mode == "fresh":
        hyper = replace(hyper, seed=derive_seed(hyper.seed, "retrain", request.seed or 0) % (2 ** 32))
    return hyper


def unlearn(model: ModelParams, train: InteractionSet, request: UnlearnRequest,
            cfg: StrategyConfig) -> UnlearnOutcome:
    E = request.expand(train)
    rest = train.difference(E)
    if len(rest) == 0:
        raise ValueError("the request removes the entire training set")
    strategy = cfg.strategy

    if strategy is Strategy.RETRAIN:
        hyper = retrain_hyper_for(model, cfg, request)
        start = time.perf_counter()
        after = train_model(rest, hyper)
        elapsed = time.perf_counter() - start
        diagnostics = {"loss_history": [float(x) for x in after.loss_history], "seed": hyper.seed}
    else:
        scope = Scope.selected(request.affected_users(train)) if strategy.selective else Scope.full()
        start = time.perf_counter()
        if strategy.collaborative:
            surrogates = build_surrogates(train, E)
            est = influence_cif(model, train, E, surrogates, scope, cfg.solver)
        else:
            est = influence_if(model, train, E, scope, cfg.solver)
        after = apply_update(model, est)
        elapsed = time.perf_counter() - start
        diagnostics = est.report()
        if not after.is_finite():
            raise FloatingPointError(f"{strategy.value} produced non-finite parameters")
    logger.info("%s removed %d points in %.4fs", strategy.value, len(E), elapsed)
    return UnlearnOutcome(after, elapsed, cfg, request, len(E), diagnostics)

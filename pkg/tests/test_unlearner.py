import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recunlearn.dataset import from_triples
from recunlearn.model import ModelHyper, train
from recunlearn.seeding import derive_seed
from recunlearn.unlearner import (
    RequestKind,
    Strategy,
    StrategyConfig,
    make_rand_at,
    sample_request,
    unlearn,
    user_request,
)


def data():
    return from_triples([(u, i, float((u * 3 + i) % 5 + 1)) for u in range(12) for i in range(8) if (u + 2 * i) % 3])


@pytest.fixture(scope="module")
def model():
    return train(data(), ModelHyper(embed_dim=4, learning_rate=0.02, epochs=40, seed=3))


def test_derive_seed_frozen():
    assert derive_seed(0, "split") == 749576159230600040
    assert derive_seed(42, "model", 3) == 2471381656966560224
    assert derive_seed(0, "a") != derive_seed(1, "a")


def test_rand_at_rounding_and_determinism():
    tr = data()
    a = make_rand_at(tr, 10, seed=4)
    assert len(a.target_users) == 1  # 10% of 12 = 1.2
    assert len(make_rand_at(tr, 12.5, 0).target_users) == 2  # 1.5 rounds half up
    assert np.array_equal(a.target_users, make_rand_at(tr, 10, 4).target_users)
    with pytest.raises(ValueError):
        make_rand_at(tr, 1, 0)
    with pytest.raises(ValueError):
        make_rand_at(tr, 0, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(9, 100), st.integers(0, 10_000))
def test_rand_at_targets_are_active_and_sorted(alpha, seed):
    tr = data()
    req = make_rand_at(tr, alpha, seed)
    assert np.all(np.diff(req.target_users) > 0)
    assert np.all(tr.user_degree[req.target_users] > 0)
    E = req.expand(tr)
    assert set(E.users.tolist()) == set(req.target_users.tolist())
    assert len(E) == int(tr.user_degree[req.target_users].sum())


def test_expand_errors():
    tr = data()
    with pytest.raises(ValueError, match="without training"):
        user_request([99]).expand(tr)
    alien = from_triples([(0, 0, 1.0)], tr.num_users, tr.num_items)
    if tr.contains(alien).all():
        alien = from_triples([(0, 7, 1.0)], tr.num_users, tr.num_items)
    with pytest.raises(ValueError, match="not in the training set"):
        sample_request(alien).expand(tr)


def test_sample_request_expands_to_the_points():
    tr = data()
    pts = tr.take([0, 5])
    req = sample_request(pts)
    assert req.kind is RequestKind.SAMPLE_WISE
    assert sorted(req.expand(tr).pairs().tolist()) == sorted(pts.pairs().tolist())


@pytest.mark.parametrize("strategy", list(Strategy))
def test_every_strategy_runs_and_reports(model, strategy):
    tr = data()
    req = make_rand_at(tr, 20, seed=1)
    out = unlearn(model, tr, req, StrategyConfig(strategy))
    assert out.params_after.is_finite()
    assert out.wall_time_seconds > 0
    rep = out.report()
    assert rep["strategy"] == strategy.value and rep["num_points"] == len(req.expand(tr))


def test_selective_strategies_touch_only_target_rows(model):
    tr = data()
    req = make_rand_at(tr, 20, seed=1)
    for s in (Strategy.SIF, Strategy.SCIF):
        after = unlearn(model, tr, req, StrategyConfig(s)).params_after
        others = np.setdiff1d(np.arange(tr.num_users), req.target_users)
        assert np.array_equal(after.user_emb[others], model.user_emb[others])
        assert np.array_equal(after.item_emb, model.item_emb)


def test_original_model_is_not_mutated(model):
    before = model.copy()
    unlearn(model, data(), make_rand_at(data(), 20, 2), StrategyConfig("cif_full"))
    assert model.same_as(before)


def test_retrain_seed_modes(model):
    tr = data()
    req = make_rand_at(tr, 20, seed=1)
    fresh = unlearn(model, tr, req, StrategyConfig("retrain"))
    same = unlearn(model, tr, req, StrategyConfig("retrain", retrain_seed_mode="same"))
    assert same.diagnostics["seed"] == model.hyper.seed
    assert fresh.diagnostics["seed"] != model.hyper.seed
    again = unlearn(model, tr, req, StrategyConfig("retrain"))
    assert again.params_after.same_as(fresh.params_after)


def test_removing_everything_is_rejected(model):
    tr = data()
    with pytest.raises(ValueError):
        unlearn(model, tr, user_request(tr.active_users()), StrategyConfig("scif"))


def test_strategy_flags():
    assert Strategy.SCIF.selective and Strategy.SCIF.collaborative
    assert Strategy.SIF.selective and not Strategy.SIF.collaborative
    assert not Strategy.IF_FULL.selective and not Strategy.CIF_FULL.selective
    with pytest.raises(ValueError):
        StrategyConfig("nope")

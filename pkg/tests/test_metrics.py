import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recunlearn.dataset import from_triples
from recunlearn.metrics import (
    DegenerateBlock,
    block_rows,
    hr_at_k,
    linear_cka,
    ndcg_at_k,
    precision_at_k,
    rank_items,
    ranking_long_rows,
    ranking_report,
    recall_at_k,
    relative_cka,
)
from recunlearn.model import ModelHyper, ModelParams


def test_ndcg_hand_values():
    # hits at ranks 2 and 3 out of 2 relevant: (1/log2 3 + 1/2) / (1 + 1/log2 3)
    assert ndcg_at_k([3, 1, 2], {1, 2}, 3) == pytest.approx(0.6934264036172708, abs=1e-15)
    assert ndcg_at_k([1, 2, 3], {1, 2}, 3) == 1.0
    assert ndcg_at_k([7, 8], {1}, 2) == 0.0
    assert ndcg_at_k([1], set(), 1) == 0.0


def test_counting_metrics():
    ranked = [4, 0, 9, 2, 5]
    rel = {0, 5, 6}
    assert hr_at_k(ranked, rel, 1) == 0.0 and hr_at_k(ranked, rel, 2) == 1.0
    assert precision_at_k(ranked, rel, 5) == pytest.approx(0.4)
    assert recall_at_k(ranked, rel, 5) == pytest.approx(2 / 3)


@pytest.mark.parametrize("fn", [ndcg_at_k, hr_at_k, precision_at_k, recall_at_k])
def test_k_must_be_positive(fn):
    with pytest.raises(ValueError):
        fn([1, 2], {1}, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=20, unique=True),
       st.sets(st.integers(0, 30), min_size=1, max_size=10), st.integers(1, 20))
def test_metrics_are_bounded(ranked, rel, k):
    for fn in (ndcg_at_k, hr_at_k, precision_at_k, recall_at_k):
        assert 0.0 <= fn(ranked, rel, k) <= 1.0 + 1e-12


def test_rank_items_ties_and_train_exclusion():
    params = ModelParams(np.array([[1.0]]), np.array([[2.0], [1.0], [2.0], [3.0], [1.0]]), ModelHyper(embed_dim=1))
    train = from_triples([(0, 3, 5.0)], 1, 5)
    assert rank_items(params, train, 0, 5).tolist() == [0, 2, 1, 4]
    with pytest.raises(IndexError):
        rank_items(params, train, 1, 3)


def test_ranking_report_counts_only_users_with_test_items():
    params = ModelParams(np.eye(3)[:, :2], np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), ModelHyper(embed_dim=2))
    train = from_triples([(0, 2, 1.0), (1, 2, 1.0), (2, 0, 1.0)], 3, 3)
    test = from_triples([(0, 0, 1.0), (1, 0, 1.0)], 3, 3)
    rep = ranking_report(params, train, test, ks=(1, 2))
    assert rep["evaluated_user_count"] == 2
    # user 0 ranks item 0 first, user 1 ranks item 1 first
    assert rep["per_k"]["1"]["hr"] == 0.5
    assert rep["per_k"]["2"]["hr"] == 1.0
    assert len(ranking_long_rows(rep)) == 8


def rand(seed, n=12, d=4):
    return np.random.default_rng(seed).normal(size=(n, d))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_cka_invariances(seed, scale):
    X, Y = rand(seed), rand(seed + 1)
    Q, _ = np.linalg.qr(np.random.default_rng(seed + 2).normal(size=(4, 4)))
    base = linear_cka(X, Y)
    assert linear_cka(X @ Q, Y) == pytest.approx(base, abs=1e-10)
    assert linear_cka(scale * X, Y) == pytest.approx(base, abs=1e-10)
    assert linear_cka(X + 3.0, Y) == pytest.approx(base, abs=1e-10)
    assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= base <= 1.0 + 1e-12


def test_cka_errors_and_zero_block():
    with pytest.raises(ValueError):
        linear_cka(rand(0, 3), rand(0, 4))
    with pytest.raises(ValueError):
        linear_cka(rand(0, 1), rand(0, 1))
    assert linear_cka(np.ones((5, 2)), rand(1, 5)) == 0.0


def models(k, nu=10, ni=8, d=3):
    return [ModelParams(rand(s, nu, d), rand(s + 100, ni, d), ModelHyper(embed_dim=d)) for s in range(k)]


def test_relative_cka():
    orig = models(3)
    target = [1, 4]
    value, parts = relative_cka(orig, orig[0], "UE_remain", target, return_parts=True)
    assert parts["numerator_first"] == pytest.approx(1.0)
    assert value == pytest.approx(parts["numerator_mean"] / parts["denominator"])
    assert block_rows(orig[0], "UE_remain", target).shape == (8, 3)
    assert block_rows(orig[0], "UE_unlearn", target).shape == (2, 3)
    with pytest.raises(ValueError):
        relative_cka(orig[:1], orig[0], "item_emb", target)
    with pytest.raises(ValueError):
        block_rows(orig[0], "bias", target)


def test_relative_cka_degenerate_denominator():
    flat = [ModelParams(np.ones((4, 2)), np.ones((3, 2)), ModelHyper(embed_dim=2)) for _ in range(2)]
    with pytest.raises(DegenerateBlock):
        relative_cka(flat, flat[0], "item_emb", [0])

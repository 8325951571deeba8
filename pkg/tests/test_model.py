import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recunlearn.dataset import Interaction, from_triples
from recunlearn.model import (
    ModelHyper,
    ModelParams,
    TrainingDiverged,
    gradients,
    grad_point,
    init_params,
    load_params,
    save_params,
    point_loss,
    predict,
    total_loss,
    train,
    user_hessian_block,
)


def toy():
    return from_triples([(u, i, float((u * 7 + i) % 5 + 1)) for u in range(6) for i in range(5) if (u + i) % 3 != 0])


def test_init_frozen():
    p = init_params(3, 4, ModelHyper(embed_dim=2, seed=0))
    np.testing.assert_allclose(p.user_emb[0], [0.001257302210933933, -0.0013210486329130189], rtol=0, atol=1e-15)
    assert p.item_emb.shape == (4, 2)


def test_point_loss_hand_value():
    params = ModelParams(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), ModelHyper(embed_dim=2, reg_lambda=0.1))
    # prediction 1, error -3: 4.5 + 0.05 * (5 + 10)
    assert point_loss(params, Interaction(0, 0, 4.0)) == pytest.approx(5.25, abs=1e-14)
    gp, gq = grad_point(params, Interaction(0, 0, 4.0))
    np.testing.assert_allclose(gp, [-9 + 0.1, 3 + 0.2])
    np.testing.assert_allclose(gq, [-3 + 0.3, -6 - 0.1])


def test_predict_range():
    p = init_params(2, 2, ModelHyper(embed_dim=3))
    with pytest.raises(IndexError):
        predict(p, 2, 0)


def test_total_loss_empty_is_zero():
    p = init_params(2, 2, ModelHyper(embed_dim=3))
    assert total_loss(p, toy().take(np.zeros(0, dtype=int))) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_summed_gradients_equal_sum_of_point_gradients(seed, lam):
    rng = np.random.default_rng(seed)
    data = toy()
    params = ModelParams(rng.normal(size=(6, 3)), rng.normal(size=(5, 3)), ModelHyper(embed_dim=3, reg_lambda=lam))
    gu, gi = gradients(params, data)
    eu, ei = np.zeros_like(gu), np.zeros_like(gi)
    for z in data:
        a, b = grad_point(params, z)
        eu[z.user] += a
        ei[z.item] += b
    np.testing.assert_allclose(gu, eu, atol=1e-12)
    np.testing.assert_allclose(gi, ei, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_hessian_block_psd_and_bounded_below(seed):
    rng = np.random.default_rng(seed)
    data = toy()
    params = ModelParams(rng.normal(size=(6, 3)), rng.normal(size=(5, 3)), ModelHyper(embed_dim=3, reg_lambda=0.2))
    for u in range(6):
        H = user_hessian_block(params, data, u)
        np.testing.assert_allclose(H, H.T)
        assert np.linalg.eigvalsh(H)[0] >= 0.2 - 1e-12


def test_hessian_block_single_item():
    params = ModelParams(np.zeros((1, 2)), np.array([[1.0, 2.0]]), ModelHyper(embed_dim=2, reg_lambda=0.5))
    H = user_hessian_block(params, from_triples([(0, 0, 3.0)]), 0)
    np.testing.assert_allclose(H, [[1.5, 2.0], [2.0, 4.5]])


def test_training_frozen_loss_trace():
    m = train(toy(), ModelHyper(embed_dim=4, learning_rate=0.05, epochs=20, init_std=0.1, seed=1))
    assert len(m.loss_history) == 21
    assert m.loss_history[0] == pytest.approx(106.24408793059644, rel=1e-12)
    assert m.loss_history[-1] == pytest.approx(1.953395083632262, rel=1e-9)


def test_training_is_deterministic():
    h = ModelHyper(embed_dim=4, learning_rate=0.05, epochs=5, seed=9)
    a, b = train(toy(), h), train(toy(), h)
    assert np.array_equal(a.user_emb, b.user_emb) and np.array_equal(a.item_emb, b.item_emb)


def test_freeze_items():
    h = ModelHyper(embed_dim=4, learning_rate=0.05, epochs=3, seed=2)
    init = init_params(6, 5, h)
    out = train(toy(), h, init=init, freeze_items=True)
    assert np.array_equal(out.item_emb, init.item_emb)
    assert not np.array_equal(out.user_emb, init.user_emb)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_signalled():
    with pytest.raises(TrainingDiverged):
        train(toy(), ModelHyper(embed_dim=4, learning_rate=50.0, epochs=30, init_std=1.0))


def test_hyper_validation():
    with pytest.raises(ValueError):
        ModelHyper(embed_dim=0)
    with pytest.raises(ValueError):
        ModelHyper(reg_lambda=-1)


def test_checkpoint_round_trip(tmp_path):
    m = train(toy(), ModelHyper(embed_dim=3, learning_rate=0.05, epochs=2))
    save_params(m, tmp_path / "sub" / "m.npz")
    back = load_params(tmp_path / "sub" / "m.npz")
    assert back.same_as(m)
    assert back.hyper == m.hyper and back.loss_history == m.loss_history

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gres.numerics as nx
from gres.evaluation import evaluate
from gres.model import (History, TrainConfig, combine, combine_partial, gate_weights, init_mlp, mlp_logits,
                        sample_training_rows, score, train)
from gres.numerics import Params, grad_check_report
from gres.pipeline import build_model


# ---------------------------------------------------------------- fusion

def test_combine_saturated_gate():
    np.testing.assert_array_equal(combine([1, 0], [0, 1], [1, 1]), [1, 0])


def test_combine_half_gate():
    np.testing.assert_array_equal(combine([1, 0], [0, 1], [0.5, 0.5]), [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(0, 1)))
def test_combine_fixed_point(gate):
    np.testing.assert_allclose(combine([0.3, 0.7], [0.3, 0.7], gate), [0.3, 0.7], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_combine_is_between_its_inputs(seed):
    rng = np.random.default_rng(seed)
    a, b, g = rng.normal(size=6), rng.normal(size=6), rng.random(6)
    v = combine(a, b, g)
    assert np.all(v >= np.minimum(a, b) - 1e-12) and np.all(v <= np.maximum(a, b) + 1e-12)
    np.testing.assert_allclose(combine(nx.tensor(a), nx.tensor(b), nx.tensor(g)).data, v, atol=1e-15)


def test_combine_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        combine([1, 0, 0], [0, 1], [0.5, 0.5])


def test_combine_partial():
    np.testing.assert_array_equal(combine_partial([0.2, 0.4]), [0.2, 0.4])
    np.testing.assert_array_equal(combine_partial([1, 0], [0, 1], [0.5, 0.5]), [0.5, 0.5])
    with pytest.raises(ValueError, match="neither"):
        combine_partial(None)


def test_gate_is_strictly_inside_the_unit_interval(rng):
    p = Params(0)
    p.glorot("g.W", 8, 4)
    p.zeros("g.b", 4)
    w = gate_weights(rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), p, "g").data
    assert np.all(w > 0) and np.all(w < 1)


# ---------------------------------------------------------------- scoring

def mlp(in_dim, seed=0):
    p = Params(seed)
    init_mlp(p, in_dim)
    return p


def test_mlp_layer_sizes():
    p = mlp(12)
    assert [p[f"mlp.{k}.W"].shape for k in range(4)] == [(12, 128), (128, 64), (64, 32), (32, 1)]


def test_zero_weights_score_one_half(rng):
    p = mlp(6)
    for name in p:
        p[name].data[...] = 0
    np.testing.assert_array_equal(score(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), p), 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scores_are_probabilities_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    p = mlp(8, seed)
    u, i = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    s = score(u, i, p)
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_array_equal(s, score(u, i, p))


def test_bce_gradient_against_finite_differences(rng):
    p = mlp(6)
    x = rng.normal(size=(9, 6))
    y = (rng.random(9) < 0.4).astype(float)
    rep = grad_check_report(lambda: nx.bce_with_logits(mlp_logits(x, p), y), p.tensors(), h=1e-5)
    assert rep.checked > 0.9 * (rep.checked + rep.skipped)
    assert rep.max_error < 1e-5


def test_ranking_ignores_the_final_sigmoid(rng):
    p = mlp(6)
    x = rng.normal(size=(40, 6))
    with nx.no_grad():
        z = mlp_logits(x, p).data
    s = score(x[:, :3], x[:, 3:], p)
    np.testing.assert_array_equal(np.argsort(-z, kind="stable"), np.argsort(-s, kind="stable"))


# ---------------------------------------------------------------- the assembled model

@pytest.fixture(scope="module")
def model(micro_prep, micro_cfg):
    return build_model(micro_prep, micro_cfg)


def test_gate_used_only_for_common_users(model, micro_prep):
    ds = micro_prep.ds
    unique, common = ds.unique_users[0], ds.common_users[0]
    with nx.no_grad():
        model.logits([unique, unique], [0, 1])
        assert model.gated_rows == 0
        model.logits([common, unique, common], [0, 1, 2])
        assert model.gated_rows == 2


def test_unique_user_vector_is_its_node_embedding(model, micro_prep):
    u = micro_prep.ds.unique_users[0]
    vu, vis = model.user_vectors([u])
    np.testing.assert_array_equal(vu[0], model.u_hat[u])
    np.testing.assert_array_equal(vis[0], model.i_hat)


def test_items_outside_the_tree_keep_their_node_embedding(model, micro_prep):
    u = micro_prep.ds.common_users[0]
    vu, vis = model.user_vectors([u])
    in_tree = set(model.trees[u].items)
    assert not np.array_equal(vu[0], model.u_hat[u])
    for i in range(model.n_items):
        assert np.array_equal(vis[0][i], model.i_hat[i]) == (i not in in_tree)


def test_full_catalog_scores_match_pairwise_logits(model, micro_prep):
    users = [micro_prep.ds.common_users[0], micro_prep.ds.unique_users[0]]
    full = model.score_all(users)
    for r, u in enumerate(users):
        with nx.no_grad():
            z = model.logits([u] * model.n_items, np.arange(model.n_items)).data
        np.testing.assert_allclose(full[r], z, atol=1e-12)


def test_predictions_are_probabilities(model, micro_prep):
    p = model.predict([0, 1, 2], [0, 1, 2])
    assert np.all((p > 0) & (p < 1))


# ---------------------------------------------------------------- training

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def test_negatives_are_unobserved(micro_prep, rng):
    users, items, labels = sample_training_rows(micro_prep.split, micro_prep.ds.n_items, 4, rng)
    seen = {(x.user, x.target) for x in micro_prep.split.train}
    assert labels.sum() == len(micro_prep.split.train)
    assert (labels == 0).sum() == 4 * len(micro_prep.split.train)
    for u, i, y in zip(users, items, labels):
        assert ((u, i) in seen) == (y == 1)


def micro_train(micro_prep, micro_cfg, **kw):
    m = build_model(micro_prep, micro_cfg)
    cfg = dataclasses.replace(micro_cfg.train.build(0), max_epochs=11, patience=100, **kw)
    return m, train(m, micro_prep.split, cfg)


def test_loss_mostly_decreases(micro_prep, micro_cfg):
    _, hist = micro_train(micro_prep, micro_cfg)
    loss = hist.losses()
    assert sum(b <= a for a, b in zip(loss, loss[1:])) >= 8


def test_frozen_parameters_give_constant_loss(micro_prep, micro_cfg):
    m, hist = micro_train(micro_prep, micro_cfg, freeze=True, resample_negatives=False)
    before = build_model(micro_prep, micro_cfg).params.snapshot()
    # batches are reshuffled each epoch, so only the summation order changes
    loss = hist.losses()
    np.testing.assert_allclose(loss, loss[0], rtol=1e-12, atol=0)
    for k, v in m.params.snapshot().items():
        np.testing.assert_array_equal(v, before[k])


def test_same_seed_same_history(micro_prep, micro_cfg):
    _, a = micro_train(micro_prep, micro_cfg)
    _, b = micro_train(micro_prep, micro_cfg)
    assert a.epochs == b.epochs


def test_early_stopping_restores_the_best_epoch(micro_prep, micro_cfg):
    m = build_model(micro_prep, micro_cfg)
    hist = train(m, micro_prep.split, dataclasses.replace(micro_cfg.train.build(0), max_epochs=12, patience=2))
    best = max(e["val_hr"] for e in hist.epochs)
    assert hist.epochs[hist.best_epoch]["val_hr"] == best
    assert len(hist.epochs) <= hist.best_epoch + 3
    assert evaluate(m, micro_prep.split, "val", ks=(10,)).hr(10) == best


def test_non_finite_loss_aborts(micro_prep, micro_cfg):
    m = build_model(micro_prep, micro_cfg)
    m.params["mlp.3.b"].data[...] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite loss at epoch 0"):
        train(m, micro_prep.split, micro_cfg.train.build(0))


def test_history_csv(tmp_path):
    h = History([{"epoch": 0, "loss": 0.5, "val_hr": 0.25}], 0)
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,loss,val_hr@10\n0,0.5,0.25\n"

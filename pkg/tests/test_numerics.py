import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gres.numerics as nx
from gres.numerics import AdamState, Params, ShapeError, adam_step, grad_check, grad_check_report, tensor


def test_identity_matmul_is_identity(rng):
    x = rng.normal(size=(2, 5))
    np.testing.assert_array_equal(nx.matmul(np.eye(2), x).data, x)


def test_relu_forward_and_backward():
    x = tensor([-1.0, 2.0], requires_grad=True)
    y = nx.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 2.0])
    y.backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    x = tensor([0.0], requires_grad=True)
    nx.relu(x).backward(np.ones(1))
    assert x.grad[0] == 0.0


def test_softmax_gradient_against_central_differences(rng):
    x = tensor(rng.normal(size=5), requires_grad=True)
    w = rng.normal(size=5)
    err = grad_check(lambda: nx.tsum(nx.mul(nx.softmax(x), w)), [x], h=1e-6)
    assert err < 1e-6


# name -> (input shapes, op); every input is a trainable leaf
PRIMITIVES = {
    "matmul": ([(4, 3), (3, 2)], lambda a, b: nx.matmul(a, b)),
    "batched-matmul": ([(2, 4, 3), (2, 3, 2)], lambda a, b: nx.matmul(a, b)),
    "shared-weight-matmul": ([(2, 4, 3), (3, 2)], lambda a, b: nx.matmul(a, b)),
    "add-broadcast": ([(4, 3), (1, 3)], lambda a, b: nx.add(a, b)),
    "sub": ([(4, 3), (4, 3)], lambda a, b: nx.sub(a, b)),
    "mul-broadcast": ([(4, 3), (4, 1)], lambda a, b: nx.mul(a, b)),
    "relu": ([(4, 3)], nx.relu),
    "sigmoid": ([(4, 3)], nx.sigmoid),
    "tanh": ([(4, 3)], nx.tanh),
    "exp": ([(4, 3)], nx.exp),
    "log": ([(4, 3)], lambda a: nx.log(nx.add(nx.mul(a, a), 1.0))),
    "softplus": ([(4, 3)], nx.softplus),
    "softmax": ([(4, 3)], lambda a: nx.softmax(a, axis=0)),
    "concat": ([(4, 3), (4, 2)], lambda a, b: nx.concat([a, b], axis=1)),
    "sum-axis": ([(4, 3)], lambda a: nx.tsum(a, axis=0)),
    "mean": ([(4, 3)], lambda a: nx.mean(a, axis=1, keepdims=True)),
    "transpose": ([(2, 4, 3)], lambda a: nx.transpose(a, (1, 0, 2))),
    "reshape": ([(4, 3)], lambda a: nx.reshape(a, (2, 6))),
    "getitem": ([(4, 3)], lambda a: nx.getitem(a, (np.array([0, 2, 2]), slice(None)))),
    "embedding": ([(4, 3)], lambda a: nx.embedding(a, [[1, 1], [3, 0]])),
    "segment-sum": ([(4, 3)], lambda a: nx.segment_sum(a, [0, 1, 0, 1], 2)),
    "spmm": ([(4, 3)], lambda a: nx.spmm(sp.csr_matrix(np.arange(20.0).reshape(5, 4) % 3), a)),
    "layer-norm": ([(4, 3), (3,), (3,)], nx.layer_norm),
    "bce": ([(6,)], lambda a: nx.bce_with_logits(a, [1, 0, 1, 1, 0, 0])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_passes_grad_check(name):
    rng = np.random.default_rng(7)
    shapes, op = PRIMITIVES[name]
    # keep relu inputs away from the kink so central differences are valid
    inputs = [tensor(rng.normal(size=s) + 0.05 * np.sign(rng.normal(size=s)), requires_grad=True)
              for s in shapes]
    w = rng.normal(size=op(*inputs).shape)
    rep = grad_check_report(lambda: nx.tsum(nx.mul(op(*inputs), w)), inputs, h=1e-6)
    assert rep.skipped == 0
    assert rep.max_error < 1e-5


def test_shape_mismatch_names_operation_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul: incompatible shapes \(2, 3\) and \(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        nx.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ShapeError, match="concat"):
        nx.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_gradient_shapes_match_inputs(x):
    t = tensor(x, requires_grad=True)
    nx.tsum(nx.mul(nx.softmax(t), nx.sigmoid(t))).backward()
    assert t.grad.shape == t.shape
    assert np.all(np.isfinite(t.grad))


def test_gradients_accumulate_across_uses():
    x = tensor([3.0], requires_grad=True)
    nx.add(nx.mul(x, 2.0), nx.mul(x, x)).backward(np.ones(1))
    assert x.grad[0] == pytest.approx(2.0 + 6.0)


def test_no_grad_records_nothing():
    x = tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)
    np.testing.assert_array_equal(state.v["w"], 0.0)


def test_adam_first_step_moves_by_learning_rate():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=0.0015))
    assert abs((p["w"][0] - 0.5) + 0.0015) < 1e-6


def test_adam_two_steps():
    p = {"w": np.array([0.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([1.0])}, state)
    adam_step(p, {"w": np.array([1.0])}, state)
    assert state.step == 2
    assert state.m["w"][0] == pytest.approx(0.19, abs=1e-15)


def test_adam_missing_gradient_counts_as_zero():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": None}, AdamState())
    assert p["w"][0] == 1.0


def test_adam_rejects_non_finite_gradient_before_updating():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = AdamState()
    with pytest.raises(FloatingPointError, match="'b'"):
        adam_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state)
    assert p["a"][0] == 1.0 and state.step == 0


def test_adam_is_independent_of_parameter_order(rng):
    names = ["x", "y", "z"]
    init = {k: rng.normal(size=3) for k in names}
    grads = [{k: rng.normal(size=3) for k in names} for _ in range(3)]
    fwd = {k: init[k].copy() for k in names}
    rev = {k: init[k].copy() for k in reversed(names)}
    s1, s2 = AdamState(), AdamState()
    for g in grads:
        adam_step(fwd, g, s1)
        adam_step(rev, dict(reversed(list(g.items()))), s2)
    for k in names:
        np.testing.assert_array_equal(fwd[k], rev[k])


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic():
    x = tensor([1.0, 2.0], requires_grad=True)

    def loss():
        return nx.mul(nx.tsum(nx.mul(x, x)), 0.5)

    loss().backward()
    np.testing.assert_allclose(x.grad, [1.0, 2.0])
    x.zero_grad()
    assert grad_check(loss, [x]) < 1e-8


def test_grad_check_constant_loss():
    x = tensor([1.0, 2.0], requires_grad=True)
    rep = grad_check_report(lambda: nx.add(nx.tsum(nx.mul(x, 0.0)), 3.0), [x])
    assert rep.max_error == 0.0 and rep.checked == 2


def test_grad_check_samples_at_most_requested_coordinates(rng):
    x = tensor(rng.normal(size=500), requires_grad=True)
    rep = grad_check_report(lambda: nx.tsum(nx.mul(x, x)), [x], n_coords=200)
    assert rep.checked + rep.skipped == 200


def test_grad_check_detects_a_wrong_gradient():
    x = tensor([1.0, 2.0], requires_grad=True)

    def bad_square(t):
        def back(g):
            t._accumulate(g * 3.0 * t.data)  # should be 2x
        return nx._make(t.data ** 2, (t,), "bad", back)

    assert grad_check(lambda: nx.tsum(bad_square(x)), [x]) > 0.1


def test_grad_check_skips_coordinates_on_a_relu_kink():
    x = tensor([1e-7, 1.0], requires_grad=True)
    rep = grad_check_report(lambda: nx.tsum(nx.relu(x)), [x], h=1e-5)
    assert rep.skipped == 1 and rep.checked == 1 and rep.max_error < 1e-8
    assert grad_check_report(lambda: nx.tsum(nx.relu(x)), [x], h=1e-5, skip_kinks=False).max_error > 0.1


# ---------------------------------------------------------------- parameters and checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    arrays_in = {"enc.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,)), "s": np.array(2.5)}
    nx.save_tensors(tmp_path / "p.bin", arrays_in)
    back = nx.load_tensors(tmp_path / "p.bin")
    assert set(back) == set(arrays_in)
    for k in arrays_in:
        np.testing.assert_array_equal(back[k], arrays_in[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello")
    with pytest.raises(ValueError, match="not a named-tensor checkpoint"):
        nx.load_tensors(tmp_path / "x.bin")


def test_params_snapshot_and_restore():
    params = Params(seed=0)
    w = params.glorot("w", 3, 2)
    snap = params.snapshot()
    w.data += 1.0
    params.restore(snap)
    np.testing.assert_array_equal(w.data, snap["w"])
    with pytest.raises(KeyError, match="duplicate"):
        params.zeros("w", 2)
    with pytest.raises(ShapeError):
        params.restore({"w": np.zeros((2, 3))})

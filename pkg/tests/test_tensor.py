import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import ndtr

from cavl import tensor as T
from cavl.errors import IndexOutOfRange, NonScalarLoss, ShapeMismatch, TapeConsumed
from cavl.gradcheck import available_checks, run_gradchecks
from cavl.tensor import Tape, Tensor, backward, grad_check
from cavl.tensorio import (
    MAGIC, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes,
)
from cavl.errors import MalformedFile


def _ones(n):
    return Tensor(np.ones(n))


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_oracle():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients_follow_transpose_rule(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    g = rng.normal(size=(2, 4))
    with Tape() as tape:
        loss = T.tsum(T.mul(T.matmul(a, b), g))
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# ------------------------------------------------------------------ softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75],
                               atol=1e-12)


def test_softmax_large_inputs_do_not_overflow():
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_positive_and_sum_to_one(x):
    out = T.softmax(Tensor(x)).data
    assert (out > 0).all() or np.ptp(x) > 700  # exp underflow is the only way to reach 0
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ layer_norm

def test_layer_norm_constant_slice_maps_to_beta():
    out = T.layer_norm(Tensor([4.0, 4.0, 4.0]), _ones(3), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_closed_form():
    out = T.layer_norm(Tensor([1.0, 2.0, 3.0]), _ones(3), Tensor(np.zeros(3)), eps=0.0)
    s = math.sqrt(1.5)  # (x - 2) / sqrt(2/3)
    np.testing.assert_allclose(out.data, [-s, 0.0, s], atol=1e-4)
    np.testing.assert_allclose(out.data, [-1.22474, 0.0, 1.22474], atol=1e-4)


def test_layer_norm_zero_gamma_returns_beta():
    out = T.layer_norm(Tensor([1.0, -2.0, 7.0]), Tensor(np.zeros(3)), Tensor([5.0, 5.0, 5.0]))
    np.testing.assert_array_equal(out.data, [5.0, 5.0, 5.0])


# ------------------------------------------------------------------ gelu

def test_gelu_values():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert abs(T.gelu(Tensor(1.0)).item() - float(ndtr(1.0))) < 1e-12
    assert abs(T.gelu(Tensor(1.0)).item() - 0.84134) < 1e-4
    assert abs(T.gelu(Tensor(-10.0)).item()) < 1e-6


# ------------------------------------------------------------------ embedding_lookup

def test_embedding_lookup_gathers_rows():
    table = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.embedding_lookup(table, [1, 0]).data, [[3, 4], [1, 2]])


def test_embedding_lookup_accumulates_repeated_ids():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    g = np.array([[1.0, 2.0], [10.0, 20.0]])
    with Tape() as tape:
        loss = T.tsum(T.mul(T.embedding_lookup(table, [0, 0]), g))
    backward(tape, loss)
    np.testing.assert_array_equal(table.grad[0], [11.0, 22.0])
    np.testing.assert_array_equal(table.grad[1:], 0.0)


@pytest.mark.parametrize("bad", [3, -1])
def test_embedding_lookup_out_of_range(bad):
    with pytest.raises(IndexOutOfRange):
        T.embedding_lookup(Tensor(np.zeros((3, 2))), [0, bad])


# ------------------------------------------------------------------ backward

def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_power_rule():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    backward(tape, loss)
    assert x.grad == pytest.approx(6.0)


def test_backward_skips_tensors_without_requires_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    with Tape() as tape:
        loss = T.tsum(T.mul(x, c))
    backward(tape, loss)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(NonScalarLoss):
        backward(tape, y)


def test_backward_runs_once_per_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(x, x))
    backward(tape, loss)
    first = x.grad.copy()
    with pytest.raises(TapeConsumed):
        backward(tape, loss)
    np.testing.assert_array_equal(x.grad, first)


# ------------------------------------------------------------------ grad_check

def test_grad_check_exact_on_sum(rng):
    x = Tensor(rng.uniform(-2, 2, size=(4, 3)))
    assert grad_check(lambda t: T.tsum(t), x) < 1e-10


def test_grad_check_layer_norm_composite(rng):
    x = Tensor(rng.uniform(-2, 2, size=(3, 6)))
    g, b = Tensor(rng.uniform(-2, 2, size=6)), Tensor(rng.uniform(-2, 2, size=6))
    w = rng.normal(size=(3, 6))
    err = grad_check(lambda ts: T.tsum(T.mul(T.gelu(T.layer_norm(*ts)), w)), [x, g, b], h=1e-5)
    assert err < 1e-4


def test_grad_check_rejects_large_step():
    with pytest.raises(ValueError):
        grad_check(lambda t: T.tsum(t), Tensor([1.0]), h=0.1)


def test_grad_check_detects_a_wrong_gradient():
    x = Tensor([0.5, 1.5])

    def wrong_square(t):
        # forward is x^2 but the recorded gradient is 3x
        out = T._result(t.data ** 2, (t,), "bad", lambda g: (3.0 * t.data * g,))
        return T.tsum(out)
    assert grad_check(wrong_square, x) > 0.1


@pytest.mark.parametrize("name", [n for n in available_checks()
                                  if not n.startswith(("pretrain", "finetune"))])
def test_every_op_and_layer_passes_gradcheck(name):
    (res,) = run_gradchecks([name])
    assert res.max_rel_error < 1e-4, res


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-2, 2)))
def test_random_inputs_gradcheck_gelu_softmax(x):
    w = np.linspace(-1, 1, 10).reshape(2, 5)
    f = lambda t: T.tsum(T.mul(T.softmax(T.gelu(t)), w))  # noqa: E731
    assert grad_check(f, Tensor(x), h=1e-5) < 1e-4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-1e3, 1e3)))
def test_ops_stay_finite_on_bounded_inputs(x):
    t = Tensor(x)
    outs = [T.gelu(t), T.softmax(t), T.relu(t), T.l2_normalize(t, eps=1e-24),
            T.layer_norm(t, _ones(4), Tensor(np.zeros(4))),
            T.cross_entropy(t, np.array([0, 3]))]
    for o in outs:
        assert np.isfinite(o.data).all()


# ------------------------------------------------------------------ tensor records

@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.sampled_from([(), (3,), (2, 3), (1, 2, 2)]),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_record_round_trip_is_bit_exact(a):
    raw = tensor_to_bytes(a)
    assert raw[:8] == MAGIC
    back = tensor_from_bytes(raw)
    assert back.shape == a.shape
    assert back.tobytes() == np.ascontiguousarray(a).tobytes()


def test_tensor_record_file_round_trip(tmp_path, rng):
    a = rng.normal(size=(4, 5))
    save_tensor(tmp_path / "a.bin", a)
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.bin"), a)


def test_tensor_record_rejects_truncation_and_bad_magic():
    raw = tensor_to_bytes(np.arange(6.0).reshape(2, 3))
    with pytest.raises(MalformedFile):
        tensor_from_bytes(raw[:-3])
    with pytest.raises(MalformedFile):
        tensor_from_bytes(b"XXXXXXXX" + raw[8:])

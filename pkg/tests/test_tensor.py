"""Tensor core: taped backward, primitives, straight-through gate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charnmt import tensor as T
from charnmt.gradcheck import check_gradients, run_point_suite, uniform_tensors
from charnmt.tensor import ContractViolation, Tape, Tensor, backward


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_backward_sum_is_ones():
    x = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x], np.ones(3, dtype=np.float32))


def test_backward_square():
    x = Tensor(np.array([2.0, -1.0], dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x)
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [4.0, -2.0])


def test_backward_rejects_nonscalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractViolation):
        backward(tape, y)


def test_gradients_sum_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x + x)  # dx = 2x + 1
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 5)).astype(np.float32), requires_grad=True)
    W = Tensor(rng.normal(size=(5, 3)).astype(np.float32), requires_grad=True)

    def run():
        with Tape() as tape:
            loss = T.tsum(T.tanh(x @ W))
        backward(tape, loss)
        return x.grad.copy(), W.grad.copy()

    gx1, gW1 = run()
    gx2, gW2 = run()
    assert np.array_equal(gx1, gx2) and np.array_equal(gW1, gW2)


def test_two_layer_recurrent_net_matches_finite_differences():
    # random 2-layer recurrent net on a length-3 sequence, 64-bit mode
    rng = np.random.default_rng(7)
    d, h = 3, 4
    xs = [f64(rng.normal(size=(1, d))) for _ in range(3)]
    p = uniform_tensors(rng, [(d, h), (h, h), (h,), (h, h), (h, h), (h,)], 0.5)

    def net(*params):
        W1x, W1h, b1, W2x, W2h, b2 = params
        h1 = f64(np.zeros((1, h)))
        h2 = f64(np.zeros((1, h)))
        for x in xs:
            h1 = T.tanh(x @ W1x + h1 @ W1h + b1)
            h2 = T.tanh(h1 @ W2x + h2 @ W2h + b2)
        return T.tsum(h2 * h2)

    ok, err = check_gradients(net, p, rtol=1e-6)
    assert ok, f"worst relative error {err}"


def test_layer_norm_trivial_values():
    x = f64([[1.0, 3.0]])
    gain = f64([1.0, 1.0])
    bias = f64([0.0, 0.0])
    out = T.layer_norm(x, gain, bias, eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])


def test_layer_norm_constant_vector_is_zero():
    x = f64([[5.0, 5.0, 5.0]])
    out = T.layer_norm(x, f64([1.0, 1.0, 1.0]), f64([0.0, 0.0, 0.0]), eps=1e-6)
    np.testing.assert_allclose(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_zero_mean_property():
    rng = np.random.default_rng(3)
    x = f64(rng.normal(size=(10, 8)) * 4.0)
    ones = f64(np.ones(8))
    zeros = f64(np.zeros(8))
    out = T.layer_norm(x, ones, zeros, eps=1e-6)
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-5


def test_layer_norm_gradient():
    def make(rng):
        x, gain, bias = uniform_tensors(rng, [(2, 5), (5,), (5,)], 1.0)

        def fn(x, g, b):
            y = T.layer_norm(x, g, b, 1e-6)
            return T.tsum(y * y)

        return fn, [x, gain, bias]

    fails, worst = run_point_suite(make, n_points=20, seed=11, rtol=1e-6)
    assert fails == 0, f"worst {worst}"


@pytest.mark.parametrize(
    "a,slope,expected",
    [(0.0, 1.0, 0.5), (1.0, 1.0, 1.0), (0.4, 1.0, 0.7), (-3.0, 1.0, 0.0)],
)
def test_hard_sigmoid_values(a, slope, expected):
    out = T.hard_sigmoid(f64([a]), slope)
    np.testing.assert_allclose(out.data, [expected], atol=1e-12)


def test_straight_through_forward_and_local_derivative():
    a = Tensor(np.array([0.4, -3.0], dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        z = T.straight_through_step(a, 1.0)
        loss = T.tsum(z)
    np.testing.assert_array_equal(z.data, [1.0, 0.0])
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, [0.5, 0.0])


def test_straight_through_tie_at_zero_emits_zero():
    z = T.straight_through_step(f64([0.0]), 1.0)
    assert z.data[0] == 0.0


def test_straight_through_output_exactly_binary():
    rng = np.random.default_rng(1)
    z = T.straight_through_step(f64(rng.normal(size=1000)), 1.3)
    assert set(np.unique(z.data)) <= {0.0, 1.0}


def test_straight_through_backward_equals_surrogate_backward():
    rng = np.random.default_rng(5)
    vals = rng.normal(size=50)
    a1 = Tensor(vals.copy(), requires_grad=True)
    a2 = Tensor(vals.copy(), requires_grad=True)
    with Tape() as tape1:
        l1 = T.tsum(T.straight_through_step(a1, 2.0))
    backward(tape1, l1)
    with Tape() as tape2:
        l2 = T.tsum(T.hard_sigmoid(a2, 2.0))
    backward(tape2, l2)
    np.testing.assert_array_equal(a1.grad, a2.grad)


def test_dropout_identity_cases():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((4, 4), dtype=np.float32))
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.3, False, rng) is x
    with pytest.raises(ContractViolation):
        T.dropout(x, 1.0, True, rng)


def test_dropout_monte_carlo():
    rng = np.random.default_rng(123)
    x = Tensor(np.full(100_000, 2.0, dtype=np.float32))
    out = T.dropout(x, 0.5, True, rng)
    surviving = np.count_nonzero(out.data) / out.data.size
    assert abs(surviving - 0.5) < 0.01
    assert abs(out.data.mean() - x.data.mean()) < 0.05


PRIMITIVE_CASES = {
    "add": lambda rng: (lambda a, b: T.tsum(T.tanh(a + b)),
                        uniform_tensors(rng, [(3, 4), (3, 4)])),
    "add_broadcast": lambda rng: (lambda a, b: T.tsum(T.tanh(a + b)),
                                  uniform_tensors(rng, [(3, 4), (4,)])),
    "mul": lambda rng: (lambda a, b: T.tsum(T.tanh(a * b)),
                        uniform_tensors(rng, [(3, 4), (3, 4)])),
    "div": lambda rng: (lambda a, b: T.tsum(a / (b + 3.0)),
                        uniform_tensors(rng, [(3, 4), (3, 4)])),
    "matmul": lambda rng: (lambda a, b: T.tsum(T.tanh(a @ b)),
                           uniform_tensors(rng, [(3, 4), (4, 2)])),
    "matmul_batched": lambda rng: (lambda a, b: T.tsum(T.tanh(a @ b)),
                                   uniform_tensors(rng, [(2, 3, 4), (4, 2)])),
    "tanh": lambda rng: (lambda a: T.tsum(T.tanh(a)), uniform_tensors(rng, [(5,)])),
    "sigmoid": lambda rng: (lambda a: T.tsum(T.sigmoid(a)),
                            uniform_tensors(rng, [(5,)])),
    "exp": lambda rng: (lambda a: T.tsum(T.exp(a)), uniform_tensors(rng, [(5,)])),
    "log": lambda rng: (lambda a: T.tsum(T.log(a + 2.0)),
                        uniform_tensors(rng, [(5,)])),
    "softmax": lambda rng: (lambda a: T.tsum(T.softmax(a, axis=-1) *
                                             T.softmax(a, axis=-1)),
                            uniform_tensors(rng, [(3, 5)])),
    "log_softmax": lambda rng: (lambda a: T.tsum(T.exp(T.log_softmax(a, axis=0))),
                                uniform_tensors(rng, [(4, 2)])),
    "concat": lambda rng: (lambda a, b: T.tsum(T.tanh(T.concat([a, b], axis=-1))),
                           uniform_tensors(rng, [(2, 3), (2, 2)])),
    "stack_getitem": lambda rng: (
        lambda a, b: T.tsum(T.stack([a, b], axis=0)[0] * T.stack([a, b], axis=0)[1]),
        uniform_tensors(rng, [(2, 3), (2, 3)])),
    "sum_axis": lambda rng: (lambda a: T.tsum(T.tanh(T.tsum(a, axis=1))),
                             uniform_tensors(rng, [(3, 4)])),
    "mean": lambda rng: (lambda a: T.tsum(T.tanh(T.tmean(a, axis=0))),
                         uniform_tensors(rng, [(3, 4)])),
    "reshape": lambda rng: (lambda a: T.tsum(T.tanh(T.reshape(a, (6,)))),
                            uniform_tensors(rng, [(2, 3)])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    make = PRIMITIVE_CASES[name]
    fails, worst = run_point_suite(lambda rng: make(rng), n_points=20, seed=42,
                                   rtol=1e-6)
    assert fails == 0, f"{name}: worst relative error {worst}"


def test_gather_and_pick_gradients():
    rng = np.random.default_rng(9)
    ids = np.array([0, 2, 2, 1])

    def make(rng):
        (table,) = uniform_tensors(rng, [(3, 4)])
        return (lambda t: T.tsum(T.tanh(T.gather_rows(t, ids))), [table])

    fails, _ = run_point_suite(make, n_points=10, seed=2, rtol=1e-6)
    assert fails == 0

    cols = np.array([1, 0, 3])

    def make_pick(rng):
        (x,) = uniform_tensors(rng, [(3, 4)])
        return (lambda x: T.tsum(T.tanh(T.pick(x, cols))), [x])

    fails, _ = run_point_suite(make_pick, n_points=10, seed=3, rtol=1e-6)
    assert fails == 0


def test_gather_time_gradient():
    idx = np.array([[0, 1], [2, 2], [1, 0]])  # [T'=3, B=2]

    def make(rng):
        (seq,) = uniform_tensors(rng, [(4, 2, 3)])
        return (lambda s: T.tsum(T.tanh(T.gather_time(s, idx))), [seq])

    fails, _ = run_point_suite(make, n_points=10, seed=4, rtol=1e-6)
    assert fails == 0


def test_maximum_gradient_with_kink_guard():
    def make(rng):
        a, b = uniform_tensors(rng, [(3, 3), (3, 3)])
        if np.any(np.abs(a.data - b.data) < 1e-3):
            return None
        return (lambda a, b: T.tsum(T.maximum(a, b)), [a, b])

    fails, _ = run_point_suite(make, n_points=20, seed=5, rtol=1e-6)
    assert fails == 0


def test_hard_sigmoid_gradient_with_kink_guard():
    slope = 1.7

    def make(rng):
        (a,) = uniform_tensors(rng, [(8,)], scale=1.5)
        if np.any(np.abs(np.abs(slope * a.data) - 1.0) < 1e-3):
            return None
        return (lambda a: T.tsum(T.hard_sigmoid(a, slope)), [a])

    fails, _ = run_point_suite(make, n_points=20, seed=6, rtol=1e-6)
    assert fails == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_straight_through_binary_property(vals):
    z = T.straight_through_step(f64(vals), 1.0)
    assert set(np.unique(z.data)) <= {0.0, 1.0}
    expect = (np.asarray(vals) > 0).astype(float)
    np.testing.assert_array_equal(z.data, expect)

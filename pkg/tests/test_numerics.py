import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from multidistill import numerics as nx
from multidistill import oracles
from multidistill.gradcheck import check_gradients, max_rel_error
from multidistill.numerics import Tensor


def test_matmul_identity():
    out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loop(a, b), atol=1e-6)


def test_batched_matmul(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 5))
    np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-5)


def test_matmul_shape_mismatch():
    with pytest.raises(nx.DimensionError, match="matmul"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_implicit_broadcast():
    with pytest.raises(nx.DimensionError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(nx.softmax(Tensor([1.0, 2.0, 3.0])).data, oracles.softmax_direct([1, 2, 3]), atol=1e-6)


@given(c=st.floats(-50, 50), delta=st.floats(-5, 5))
def test_softmax_shift_invariance(c, delta):
    base = nx.softmax(Tensor([0.0, delta, 2 * delta])).data
    shifted = nx.softmax(Tensor([c, c + delta, c + 2 * delta])).data
    np.testing.assert_allclose(base, shifted, atol=1e-5)


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(z):
    y = nx.softmax(Tensor(z)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-5)


def test_softmax_rejects_nan():
    with pytest.raises(nx.NumericError):
        nx.softmax(Tensor([0.0, np.nan]))


def test_mse_examples(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    assert float(nx.mse(a, a).data) == 0.0
    assert float(nx.mse(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).data) == 1.0
    x = rng.standard_normal((4, 6)).astype(np.float32)
    y = rng.standard_normal((4, 6)).astype(np.float32)
    assert abs(float(nx.mse(Tensor(x), Tensor(y)).data) - oracles.mse_loop(x, y)) <= 1e-6


def test_non_finite_forward_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(nx.NumericError, match="exp"):
        nx.exp(Tensor([1000.0]))


def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nx.ContractError):
        nx.backward(nx.scale(x, 2.0))


def test_gradients_accumulate_over_reuse():
    x = Tensor([2.0, 3.0], requires_grad=True)
    nx.backward(nx.sum(nx.mul(x, x)))
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_unreached_leaf_gets_zero_grad():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    nx.backward(nx.sum(x), leaves=[x, y])
    np.testing.assert_array_equal(y.grad, [0.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with nx.no_grad():
        y = nx.sum(nx.mul(x, x))
    assert y.is_leaf and not y.requires_grad


def test_tape_order_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = nx.scale(x, 2.0)
    b = nx.mul(a, x)
    loss = nx.sum(b)
    tape = nx.ComputationTape.from_output(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert pos[id(x)] < pos[id(a)] < pos[id(b)] < pos[id(loss)]
    assert all(max(r.inputs) < r.output for r in tape.records)


def test_precision_context():
    assert Tensor([1.0]).dtype == np.float32
    with nx.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def _gc(fn, params, count=30):
    return max_rel_error(check_gradients(fn, params, count=count))


def test_fd_mse_of_matmul(f64, rng):
    w, x, y = (Tensor(rng.standard_normal((3, 3))) for _ in range(3))
    assert _gc(lambda: nx.mse(nx.matmul(w, x), y), {"w": w, "x": x}) <= 1e-4


def test_fd_softmax_then_dot(f64, rng):
    z = Tensor(rng.standard_normal((2, 5)))
    v = Tensor(rng.standard_normal((5, 3)))
    target = Tensor(rng.standard_normal((2, 3)))
    assert _gc(lambda: nx.sum(nx.mul(nx.matmul(nx.softmax(z), v), target)), {"z": z, "v": v}) <= 1e-4


def test_fd_layer_norm_gelu_bias(f64, rng):
    x = Tensor(rng.standard_normal((4, 6)))
    g = Tensor(rng.standard_normal(6))
    b = Tensor(rng.standard_normal(6))
    c = Tensor(rng.standard_normal(6))
    t = Tensor(rng.standard_normal((4, 6)))
    fn = lambda: nx.sum(nx.mul(nx.gelu(nx.add_bias(nx.layer_norm(x, g, b), c)), t))  # noqa: E731
    assert _gc(fn, {"x": x, "g": g, "b": b, "c": c}, count=40) <= 1e-4


def test_fd_shape_ops(f64, rng):
    x = Tensor(rng.standard_normal((2, 3, 4)))
    y = Tensor(rng.standard_normal((3, 4)))
    rows = np.array([2, 0])

    def fn():
        a = nx.transpose(nx.reshape(x, (6, 4)), (1, 0))
        b = nx.concat([nx.index(y, rows), nx.place_rows(nx.index(y, np.array([1])), np.array([0]), 1)], axis=0)
        e = nx.expand(nx.mean(b, axis=0), 2)
        return nx.add(nx.sum(nx.exp(nx.scale(a, 0.3))), nx.sum(nx.mul(e, e)))

    assert _gc(fn, {"x": x, "y": y}) <= 1e-4


def test_fd_cross_entropy(f64, rng):
    z = Tensor(rng.standard_normal((5, 4)))
    labels = np.array([0, 3, 1, 1, 2])
    assert _gc(lambda: nx.cross_entropy(z, labels), {"z": z}) <= 1e-4


def test_cross_entropy_value(rng):
    z = rng.standard_normal((3, 4))
    labels = np.array([1, 0, 3])
    want = np.mean([-np.log(oracles.softmax_direct(z[i])[labels[i]]) for i in range(3)])
    assert abs(float(nx.cross_entropy(Tensor(z), labels).data) - want) <= 1e-5


def test_argmax_ties_pick_lowest_index():
    np.testing.assert_array_equal(nx.argmax(np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]])), [1, 0])


def test_forward_and_backward_are_deterministic(rng):
    w = rng.standard_normal((8, 8))
    x = rng.standard_normal((4, 8))

    def once():
        wt = Tensor(w, requires_grad=True)
        loss = nx.sum(nx.gelu(nx.matmul(Tensor(x), wt)))
        nx.backward(loss)
        return loss.data.tobytes(), wt.grad.tobytes()

    assert once() == once()

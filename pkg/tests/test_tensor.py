import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixseg import tensor as T
from fixseg.checkpoint import CheckpointError, load_arrays, save_arrays
from fixseg.gradcheck import check_op
from fixseg.tensor import Tape, Tensor

rng = np.random.default_rng(7)


def r(*shape):
    return rng.standard_normal(shape)


def pos(*shape):
    return rng.uniform(0.5, 2.0, shape)


def away_from_zero(*shape):
    x = rng.uniform(0.2, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def distinct(*shape):
    return rng.permutation(np.arange(np.prod(shape), dtype=float)).reshape(shape) * 0.1 + r(*shape) * 0.01


TAKE_INDEX = np.array([[0, 2, 2], [1, 0, 3], [3, 3, 3]])

PRIMITIVES = {
    "add": (T.add, [r(3, 4), r(3, 4)]),
    "add_suffix": (T.add, [r(2, 3, 4), r(4)]),
    "add_scalar": (T.add, [r(3, 4), r()]),
    "sub": (T.sub, [r(2, 3), r(3)]),
    "mul": (T.mul, [r(3, 4), r(3, 4)]),
    "mul_suffix": (T.mul, [r(5, 3), r(3)]),
    "div": (T.div, [r(3, 4), away_from_zero(3, 4)]),
    "div_eps": (lambda a, b: T.div(a, b, eps=0.1), [r(3), pos(3)]),
    "neg": (T.neg, [r(4)]),
    "exp": (T.exp, [r(3, 2)]),
    "log": (T.log, [pos(3, 2)]),
    "square": (T.square, [r(5)]),
    "sqrt": (T.sqrt, [pos(5)]),
    "tanh": (T.tanh, [r(4, 2)]),
    "sigmoid": (T.sigmoid, [r(4, 2)]),
    "relu": (T.relu, [away_from_zero(4, 3)]),
    "matmul": (T.matmul, [r(3, 4), r(4, 2)]),
    "matmul_weight_left": (T.matmul, [r(5, 4), r(6, 4, 3)]),
    "matmul_weight_right": (T.matmul, [r(2, 6, 4), r(4, 3)]),
    "batched_matmul": (T.batched_matmul, [r(2, 3, 4), r(2, 4, 5)]),
    "cross": (T.cross, [r(4, 3), r(4, 3)]),
    "sum_all": (T.sum_, [r(3, 4)]),
    "sum_axis": (lambda a: T.sum_(a, axis=1, keepdims=True), [r(3, 4, 2)]),
    "mean": (lambda a: T.mean(a, axis=(0, 2)), [r(3, 4, 2)]),
    "max_all": (T.max_reduce, [distinct(3, 4)]),
    "max_axis": (lambda a: T.max_reduce(a, axis=0), [distinct(3, 4)]),
    "softmax": (lambda a: T.softmax(a, axis=1), [r(4, 3)]),
    "l2_norm": (lambda a: T.l2_norm(a, axis=-1), [r(5, 3)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [r(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
    "expand": (lambda a: T.expand(a, (2, 3, 4)), [r(3, 1)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 5)]),
    "slice": (lambda a: T.slice_(a, (slice(1, 3), slice(None, None, 2))), [r(4, 5)]),
    "slice_fancy": (lambda a: T.slice_(a, np.array([0, 2, 0])), [r(3, 2)]),
    "take": (lambda a: T.take(a, TAKE_INDEX), [r(4, 2, 3)]),
    "stack": (lambda a, b: T.stack([a, b], axis=1), [r(3, 2), r(3, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_central_differences(name):
    fn, inputs = PRIMITIVES[name]
    assert check_op(fn, inputs) < 1e-5


def test_composite_graph_with_reuse():
    def fn(a, b):
        h = T.tanh(T.matmul(a, b))
        return T.sum_(h * h, axis=0) + T.l2_norm(h, axis=0)

    assert check_op(fn, [r(3, 4), r(4, 2)]) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_backward_is_linear_in_the_loss(alpha, beta, seed):
    g = np.random.default_rng(seed)
    x0 = g.standard_normal((3, 2))

    def grad_of(loss_fn):
        x = Tensor(x0, requires_grad=True)
        with Tape():
            T.backward(loss_fn(x))
        return x.grad

    f = lambda x: T.sum_(T.sigmoid(x) * x)
    h = lambda x: T.sum_(T.exp(x * 0.3))
    combo = grad_of(lambda x: f(x) * alpha + h(x) * beta)
    np.testing.assert_allclose(combo, alpha * grad_of(f) + beta * grad_of(h), atol=1e-12)


def test_gradients_accumulate_across_tapes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape():
            T.backward(T.sum_(x * x))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_max_gradient_goes_to_first_maximum():
    x = Tensor(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    with Tape():
        T.backward(T.max_reduce(x))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_l2_norm_has_zero_subgradient_at_origin():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape():
        T.backward(T.sum_(T.l2_norm(x)))
    np.testing.assert_array_equal(x.grad, 0.0)


def test_incompatible_broadcast_raises():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))))


def test_division_by_zero_needs_eps():
    with pytest.raises(T.NumericalError):
        T.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))
    out = T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.5)
    np.testing.assert_allclose(out.data, [2.0, 2.0])


def test_backward_rejects_non_scalar_and_detached_inputs():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(T.ShapeError):
            T.backward(x * 2.0)
    y = x * 2.0  # recorded on no tape
    with Tape():
        loss = T.sum_(y * y)
        with pytest.raises(T.DetachedTensorError):
            T.backward(loss)


def test_tape_cannot_be_replayed():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x * 3.0)
        T.backward(loss)
        assert tape.consumed
        with pytest.raises(RuntimeError):
            T.backward(loss)


def test_no_nodes_without_grad_or_tape():
    with Tape() as tape:
        T.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert tape.nodes == []
    out = Tensor(np.ones(2), requires_grad=True) * 2.0
    assert out.tape_node is None


def test_float32_gradients_stay_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with Tape():
        T.backward(T.sum_(T.exp(x)))
    assert x.grad.dtype == np.float32


# -- checkpoint container --------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    arrays = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32),
              "step": np.array([7], dtype=np.int64), "empty": np.zeros((0, 3))}
    meta = {"net": {"width": 8}, "epoch": 3}
    path = tmp_path / "model.ckpt"
    save_arrays(path, arrays, meta)
    back, meta2 = load_arrays(path)
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        load_arrays(path)
    save_arrays(path, {"w": np.ones(4)}, {})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_arrays(path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixseg import tensor as T
from fixseg.geometry import random_rotation
from fixseg.gradcheck import check_op, check_params
from fixseg.layers import MLP, Linear, VNInvariant, VNLinear, VNReLU, vn_invariant, vn_linear, vn_nonlinearity
from fixseg.tensor import Tensor

seeds = st.integers(0, 2**32 - 1)


def features(rng, N=6, C=4):
    return rng.standard_normal((N, C, 3))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_vn_linear_commutes_with_rotation(seed):
    rng = np.random.default_rng(seed)
    V, W, R = features(rng), rng.standard_normal((5, 4)), random_rotation(rng)
    lhs = vn_linear(Tensor(V @ R), Tensor(W)).data
    np.testing.assert_allclose(lhs, vn_linear(Tensor(V), Tensor(W)).data @ R, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_vn_nonlinearity_commutes_with_rotation(seed):
    rng = np.random.default_rng(seed)
    V, U, R = features(rng), rng.standard_normal((4, 4)), random_rotation(rng)
    lhs = vn_nonlinearity(Tensor(V @ R), Tensor(U)).data
    np.testing.assert_allclose(lhs, vn_nonlinearity(Tensor(V), Tensor(U)).data @ R, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_vn_invariant_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    V, Wz, R = features(rng), rng.standard_normal((2, 4)), random_rotation(rng)
    out = vn_invariant(Tensor(V), Tensor(Wz)).data
    assert out.shape == (6, 4 + 4 * 2)
    np.testing.assert_allclose(vn_invariant(Tensor(V @ R), Tensor(Wz)).data, out, atol=1e-12)


def test_vn_nonlinearity_half_spaces():
    V = np.array([[[1.0, 0.0, 0.0]], [[-1.0, 1.0, 0.0]]])
    U = np.array([[1.0]])  # direction equals the vector itself: always passes
    np.testing.assert_array_equal(vn_nonlinearity(Tensor(V), Tensor(U)).data, V)
    U = np.array([[-1.0]])  # opposite direction: component along d removed entirely
    out = vn_nonlinearity(Tensor(V), Tensor(U)).data
    np.testing.assert_allclose(out, 0.0, atol=1e-7)


def test_vn_nonlinearity_blocked_output_is_orthogonal_to_direction():
    rng = np.random.default_rng(1)
    V, U = features(rng, 20, 3), rng.standard_normal((3, 3))
    d = np.einsum("ij,njk->nik", U, V)
    out = vn_nonlinearity(Tensor(V), Tensor(U)).data
    blocked = (V * d).sum(-1) < 0
    dots = (out * d).sum(-1)
    assert blocked.any()
    np.testing.assert_allclose(dots[blocked], 0.0, atol=1e-6)
    np.testing.assert_array_equal(out[~blocked], V[~blocked])


def test_vn_linear_shape_errors():
    with pytest.raises(T.ShapeError):
        vn_linear(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(T.ShapeError):
        vn_linear(Tensor(np.ones((2, 3, 2))), Tensor(np.ones((4, 3))))


@pytest.mark.parametrize("which", ["linear", "relu", "invariant"])
def test_vn_gradients(which):
    rng = np.random.default_rng(2)
    V = features(rng, 3, 3)
    if which == "linear":
        assert check_op(vn_linear, [V, rng.standard_normal((2, 3))]) < 1e-5
    elif which == "relu":
        # keep every channel's gate decision away from the switching boundary
        U = rng.standard_normal((3, 3))
        dots = (V * np.einsum("ij,njk->nik", U, V)).sum(-1)
        assert np.abs(dots).min() > 1e-3
        assert check_op(vn_nonlinearity, [V, U]) < 1e-5
    else:
        assert check_op(vn_invariant, [V, rng.standard_normal((2, 3))]) < 1e-5


def test_modules_expose_dotted_parameter_names():
    rng = np.random.default_rng(3)
    mlp = MLP([4, 5, 2], rng)
    assert [n for n, _ in mlp.named_parameters()] == ["fc0.W", "fc0.b", "fc1.W", "fc1.b"]
    state = mlp.state_dict()
    other = MLP([4, 5, 2], np.random.default_rng(99))
    other.load_state_dict(state)
    x = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(other(x).data, mlp(x).data)
    with pytest.raises(KeyError):
        other.load_state_dict({"fc0.W": state["fc0.W"]})


def test_module_parameter_gradients():
    rng = np.random.default_rng(4)
    lin, relu, inv = VNLinear(3, 4, rng), VNReLU(4, rng), VNInvariant(4, 2, rng)
    head = Linear(inv.out_dim, 1, rng)
    V = Tensor(features(rng, 5, 3))
    params = lin.parameters() + relu.parameters() + inv.parameters() + head.parameters()
    loss = lambda: T.sum_(T.tanh(head(inv(relu(lin(V))))))
    assert check_params(loss, params) < 1e-5


def test_astype_casts_parameters():
    mlp = MLP([2, 3], np.random.default_rng(5)).astype(np.float32)
    assert all(p.dtype == np.float32 for p in mlp.parameters())

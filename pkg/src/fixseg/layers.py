"""Vector-neuron layers on features shaped ``(..., C, 3)``.

Channel mixing never touches the trailing spatial axis, so every op here
commutes with a right-multiplication of that axis by a rotation (or, for the
invariant readout, is unchanged by it).
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

DIRECTION_EPS = 1e-8


def vn_linear(V: Tensor, W: Tensor) -> Tensor:
    """``W @ V_n`` for every point: mixes channels, leaves coordinates alone."""
    if W.ndim != 2 or V.ndim < 2 or V.shape[-1] != 3 or W.shape[1] != V.shape[-2]:
        raise T.ShapeError(f"vn_linear: weight {W.shape} does not fit feature {V.shape}")
    return T.matmul(W, V)


def vn_nonlinearity(V: Tensor, U: Tensor, eps: float = DIRECTION_EPS) -> Tensor:
    """Direction-gated ReLU.

    For each channel a learned direction ``d = (U V)_c`` is predicted; vectors in
    the half-space ``<v, d> >= 0`` pass unchanged, the others lose their
    component along ``d``.
    """
    d = vn_linear(V, U)
    dot = T.sum_(V * d, axis=-1, keepdims=True)
    dd = T.sum_(d * d, axis=-1, keepdims=True)
    blocked = Tensor((dot.data < 0).astype(V.dtype), dtype=V.dtype)
    coef = T.div(dot * blocked, dd, eps=eps)
    return V - T.expand(coef, V.shape) * d


def vn_invariant(V: Tensor, Wz: Tensor) -> Tensor:
    """Per-point rotation invariants: channel norms and inner products against
    the learned channel mixture ``Z = Wz V``. Output shape ``(..., C + C*Cz)``."""
    Z = vn_linear(V, Wz)
    norms = T.l2_norm(V, axis=-1)
    axes = tuple(range(Z.ndim - 2)) + (Z.ndim - 1, Z.ndim - 2)
    inner = T.matmul(V, T.transpose(Z, axes))
    flat = T.reshape(inner, inner.shape[:-2] + (inner.shape[-2] * inner.shape[-1],))
    return T.concat([norms, flat], axis=-1)


# -- parameter containers ----------------------------------------------------
class Module:
    """Holds named parameters and child modules; names nest with dots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _init(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)).astype(dtype)


class VNLinear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.W = self.param("W", _init(rng, c_out, c_in, dtype))

    def __call__(self, V: Tensor) -> Tensor:
        return vn_linear(V, self.W)


class VNReLU(Module):
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.U = self.param("U", _init(rng, channels, channels, dtype))

    def __call__(self, V: Tensor) -> Tensor:
        return vn_nonlinearity(V, self.U)


class VNInvariant(Module):
    def __init__(self, channels: int, mix: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.out_dim = channels + channels * mix
        self.Wz = self.param("Wz", _init(rng, mix, channels, dtype))

    def __call__(self, V: Tensor) -> Tensor:
        return vn_invariant(V, self.Wz)


class Linear(Module):
    """Affine map on the trailing axis of scalar features."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        super().__init__()
        self.W = self.param("W", _init(rng, d_out, d_in, dtype).T.copy())
        self.b = self.param("b", np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.W)
        return out + self.b if self.b is not None else out


class MLP(Module):
    def __init__(self, dims, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.layers = [self.child(f"fc{i}", Linear(a, b, rng, dtype)) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

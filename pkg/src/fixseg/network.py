"""Segmentation-conditioned equivariant network ``f(X, y; theta) -> y'``.

Pipeline for one cloud:

1. lift: per-edge VN features from relative coordinates ``x_m - x_n`` and their
   y-weighted local mean, aggregated with same-part weights ``p_nm = y_n . y_m``;
2. ``eq_layers`` weighted message-passing layers;
3. ``mixed_layers`` weighted message-passing layers, each followed by a
   per-point invariant readout, a global mean pool and a gate that feeds the
   (per-point, global) invariants back into the vector channels;
4. invariant readout ``S_n``, part codes ``Q_p`` and a pairwise score MLP,
   softmax over parts.

All vector features are translation-free and rotate with the part they belong
to, so for a binary ``y`` the output is unchanged by any per-part rigid motion.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import MLP, Linear, Module, VNInvariant, VNLinear, VNReLU
from .tensor import Tensor

log = logging.getLogger(__name__)

RADIUS_RTOL = 1e-9
WEIGHT_FLOOR = 1e-8


@dataclass
class NetConfig:
    P: int = 2
    width: int = 32
    mix: int = 3
    eq_layers: int = 2
    mixed_layers: int = 4
    r: float = 0.3
    k: int = 64
    code_dim: int = 32
    head_hidden: int = 32
    mode: str = "semantic"
    semantic_groups: Optional[list] = None
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("semantic", "instance"):
            raise ValueError(f"mode must be 'semantic' or 'instance', got {self.mode!r}")
        if self.P < 1 or self.width < 1 or self.k < 1 or self.r <= 0:
            raise ValueError("P, width, k must be positive and r > 0")
        if self.semantic_groups is not None:
            flat = sorted(p for g in self.semantic_groups for p in g)
            if flat != list(range(self.P)):
                raise ValueError(f"semantic_groups {self.semantic_groups} do not partition {self.P} parts")
            self.semantic_groups = [list(g) for g in self.semantic_groups]

    @classmethod
    def paper_scale(cls, **kw) -> "NetConfig":
        return cls(width=128, code_dim=128, head_hidden=128, r=0.3, k=40, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NeighborhoodIndex:
    """Padded neighbour table: ``idx[n, 0] == n``; padded slots have ``mask == 0``."""

    idx: np.ndarray
    mask: np.ndarray
    counts: np.ndarray

    def lists(self) -> list[list[int]]:
        return [self.idx[n, : self.counts[n]].tolist() for n in range(self.idx.shape[0])]


def ball_query(X, r: float, k: int) -> NeighborhoodIndex:
    """Brute-force radius search keeping at most ``k`` nearest (ties by index)."""
    if r <= 0 or k < 1:
        raise ValueError("ball_query needs r > 0 and k >= 1")
    pts = X.points if hasattr(X, "points") else np.asarray(X, dtype=np.float64)
    N = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    D = np.sqrt((diff * diff).sum(-1))
    D[np.arange(N), np.arange(N)] = -1.0
    order = np.argsort(D, axis=1, kind="stable")
    sorted_d = np.take_along_axis(D, order, axis=1)
    within = sorted_d <= r * (1.0 + RADIUS_RTOL)
    counts = np.minimum(within.sum(1), k)
    K = int(counts.max()) if N else 0
    idx = order[:, :K].copy()
    slot = np.arange(K)[None, :]
    valid = slot < counts[:, None]
    idx = np.where(valid, idx, np.arange(N)[:, None])
    return NeighborhoodIndex(idx=idx, mask=valid.astype(np.float64), counts=counts)


def neighbor_weights(y: Tensor, nbr: NeighborhoodIndex, diagnostics: Optional[list] = None) -> Tensor:
    """Normalised same-part weights ``p_nm / sum_m p_nm`` over each neighbourhood.

    A neighbourhood whose total weight is below 1e-8 falls back to a pure
    self-message.
    """
    N, K = nbr.idx.shape
    y_m = T.take(y, nbr.idx)
    y_n = T.expand(T.reshape(y, (N, 1, y.shape[1])), (N, K, y.shape[1]))
    mask = Tensor(nbr.mask, dtype=y.dtype)
    p = T.sum_(y_m * y_n, axis=-1) * mask
    den = T.sum_(p, axis=1, keepdims=True)
    bad = den.data[:, 0] < WEIGHT_FLOOR
    if bad.any():
        msg = f"degenerate same-part weight at {int(bad.sum())} point(s); using self-messages"
        log.debug(msg)
        if diagnostics is not None:
            diagnostics.append(msg)
        keep = Tensor(np.where(bad, 0.0, 1.0)[:, None], dtype=y.dtype)
        selfmsg = np.zeros((N, K), dtype=y.dtype)
        selfmsg[bad, 0] = 1.0
        p = p * T.expand(keep, (N, K)) + Tensor(selfmsg, dtype=y.dtype)
        den = T.sum_(p, axis=1, keepdims=True)
    return T.div(p, T.expand(den, (N, K)))


def _aggregate(w: Tensor, msg: Tensor) -> Tensor:
    """``sum_m w[n, m] * msg[n, m]`` for edge tensors shaped ``(N, K, ...)``."""
    extra = msg.ndim - 2
    wx = T.expand(T.reshape(w, w.shape + (1,) * extra), msg.shape)
    return T.sum_(wx * msg, axis=1)


class EdgeNet(Module):
    """Edge function ``phi(V_m - V_n, V_n) = ReLU_U(W_a (V_m - V_n) + W_b V_n)``."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float64):
        super().__init__()
        self.lin_rel = self.child("lin_rel", VNLinear(c_in, c_out, rng, dtype))
        self.lin_self = self.child("lin_self", VNLinear(c_in, c_out, rng, dtype))
        self.act = self.child("act", VNReLU(c_out, rng, dtype))

    def messages(self, V: Tensor, idx: np.ndarray) -> Tensor:
        N, K = idx.shape
        A = self.lin_rel(V)
        base = self.lin_self(V) - A
        C = A.shape[1]
        pre = T.take(A, idx) + T.expand(T.reshape(base, (N, 1, C, 3)), (N, K, C, 3))
        return self.act(pre)

    def __call__(self, dV: Tensor, Vn: Tensor) -> Tensor:
        return self.act(self.lin_rel(dV) + self.lin_self(Vn))


def weighted_message_pass(V: Tensor, y: Tensor, nbr: NeighborhoodIndex, phi: EdgeNet,
                          diagnostics: Optional[list] = None, weights: Optional[Tensor] = None) -> Tensor:
    """``V'_n = sum_m p_nm phi(V_m - V_n, V_n) / sum_m p_nm`` over the ball neighbourhood."""
    w = neighbor_weights(y, nbr, diagnostics) if weights is None else weights
    return _aggregate(w, phi.messages(V, nbr.idx))


class Lift(Module):
    """First VN features from relative coordinates inside the same-part neighbourhood."""

    def __init__(self, width: int, rng, dtype=np.float64):
        super().__init__()
        self.lin = self.child("vn_linear", VNLinear(3, width, rng, dtype))
        self.act = self.child("vn_relu", VNReLU(width, rng, dtype))
        self.out = self.child("vn_out", VNLinear(width, width, rng, dtype))

    def __call__(self, X: np.ndarray, w: Tensor, nbr: NeighborhoodIndex) -> Tensor:
        N, K = nbr.idx.shape
        rel = Tensor(X[nbr.idx] - X[:, None, :], dtype=w.dtype)
        centroid = _aggregate(w, rel)
        c_edge = T.expand(T.reshape(centroid, (N, 1, 3)), (N, K, 3))
        twist = T.cross(rel, c_edge)
        edge = T.stack([rel, c_edge, twist], axis=2)
        msg = self.act(self.lin(edge))
        return self.out(_aggregate(w, msg))


class MessageLayer(Module):
    def __init__(self, width: int, rng, dtype=np.float64, mix: int = 3, gated: bool = False):
        super().__init__()
        self.phi = self.child("phi", EdgeNet(width, width, rng, dtype))
        self.post = self.child("vn_linear", VNLinear(width, width, rng, dtype))
        self.gated = gated
        if gated:
            self.inv = self.child("invariant", VNInvariant(width, mix, rng, dtype))
            self.gate = self.child("gate", Linear(2 * self.inv.out_dim, width, rng, dtype))
            self.mix = self.child("gate_mix", VNLinear(width, width, rng, dtype))

    def __call__(self, V: Tensor, w: Tensor, nbr: NeighborhoodIndex) -> Tensor:
        V = V + self.post(weighted_message_pass(V, None, nbr, self.phi, weights=w))
        if not self.gated:
            return V
        N, C = V.shape[0], V.shape[1]
        S = self.inv(V)
        g = T.expand(T.mean(S, axis=0, keepdims=True), S.shape)
        gate = T.sigmoid(self.gate(T.concat([S, g], axis=1)))
        gx = T.expand(T.reshape(gate, (N, C, 1)), V.shape)
        return V + self.mix(V * gx)


class PartAwareNet(Module):
    def __init__(self, config: NetConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        dt = np.dtype(config.dtype)
        C, E = config.width, config.code_dim
        self.lift = self.child("lift", Lift(C, rng, dt))
        self.eq = [self.child(f"eq{i}", MessageLayer(C, rng, dt)) for i in range(config.eq_layers)]
        self.mixed = [self.child(f"mixed{i}", MessageLayer(C, rng, dt, config.mix, gated=True))
                      for i in range(config.mixed_layers)]
        self.readout = self.child("readout", VNInvariant(C, config.mix, rng, dt))
        self.embed = self.child("embed", Linear(self.readout.out_dim, E, rng, dt))
        if config.mode == "semantic":
            self.codes = self.child("part_codes", Linear(E, config.P * E, rng, dt))
        self.head = self.child("score", MLP([3 * E, config.head_hidden, config.head_hidden, 1], rng, dt))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def neighborhoods(self, X) -> NeighborhoodIndex:
        return ball_query(X, self.config.r, self.config.k)

    def _inputs(self, X, y, nbr):
        pts = X.points if hasattr(X, "points") else np.asarray(X, dtype=np.float64)
        ya = y if isinstance(y, Tensor) else Tensor(getattr(y, "assign", y), dtype=self.dtype)
        if ya.ndim != 2 or ya.shape[0] != pts.shape[0]:
            raise ValueError(f"segmentation shape {ya.shape} does not match {pts.shape[0]} points")
        if nbr is None:
            nbr = self.neighborhoods(pts)
        return pts.astype(self.dtype), ya, nbr

    @staticmethod
    def _check(name: str, t: Tensor) -> Tensor:
        if not np.all(np.isfinite(t.data)):
            raise T.NumericalError(f"non-finite values after layer '{name}'")
        return t

    def local_features(self, X, y, nbr=None, diagnostics=None) -> Tensor:
        """Equivariant features after the lift and the purely local layers."""
        pts, ya, nbr = self._inputs(X, y, nbr)
        w = neighbor_weights(ya, nbr, diagnostics)
        V = self._check("lift", self.lift(pts, w, nbr))
        for i, layer in enumerate(self.eq):
            V = self._check(f"eq{i}", layer(V, w, nbr))
        return V

    def point_invariants(self, X, y, nbr=None, diagnostics=None) -> Tensor:
        pts, ya, nbr = self._inputs(X, y, nbr)
        w = neighbor_weights(ya, nbr, diagnostics)
        V = self._check("lift", self.lift(pts, w, nbr))
        for i, layer in enumerate(self.eq):
            V = self._check(f"eq{i}", layer(V, w, nbr))
        for i, layer in enumerate(self.mixed):
            V = self._check(f"mixed{i}", layer(V, w, nbr))
        return self._check("embed", T.relu(self.embed(self.readout(V))))

    def part_codes(self, S: Tensor, y: Tensor, diagnostics=None) -> Tensor:
        return part_codes(S, y, self.config.mode, self.codes if self.config.mode == "semantic" else None,
                          self.config.P, diagnostics)

    def forward(self, X, y, nbr=None, diagnostics=None) -> Tensor:
        tape = T.active_tape()
        if tape is not None:
            tape.mark("forward")
        pts, ya, nbr = self._inputs(X, y, nbr)
        # instance codes come from y itself, so any part count works there
        if self.config.mode == "semantic" and ya.shape[1] != self.config.P:
            raise ValueError(f"network expects P={self.config.P} parts, segmentation has {ya.shape[1]}")
        S = self.point_invariants(pts, ya, nbr, diagnostics)
        Q = self._check("part_codes", self.part_codes(S, ya, diagnostics))
        scores = self._check("score", pair_scores(self.head, S, Q))
        return T.softmax(scores, axis=1)

    __call__ = forward

    def predict(self, X, y, nbr=None) -> np.ndarray:
        return self.forward(X, y, nbr).data.copy()


def part_codes(S: Tensor, y: Tensor, mode: str, proj: Optional[Linear] = None, P: Optional[int] = None,
               diagnostics: Optional[list] = None) -> Tensor:
    """Per-part codes ``(P, E)``.

    semantic: the mean-pooled shape code through P parallel projections;
    instance: the y-weighted mean of point invariants for each part.
    """
    N, E = S.shape
    if mode == "semantic":
        G = T.mean(S, axis=0, keepdims=True)
        return T.reshape(proj(G), (P, E))
    if mode != "instance":
        raise ValueError(f"unknown part-code mode {mode!r}")
    yt = T.transpose(y, (1, 0))
    num = T.matmul(yt, S)
    mass = T.sum_(y, axis=0, keepdims=True)
    empty = mass.data[0] < WEIGHT_FLOOR
    if empty.any():
        msg = f"empty part column(s) {np.flatnonzero(empty).tolist()}; codes set to zero"
        log.debug(msg)
        if diagnostics is not None:
            diagnostics.append(msg)
        mass = mass + Tensor(empty[None, :].astype(S.dtype), dtype=S.dtype)
    Pn = y.shape[1]
    return T.div(num, T.expand(T.reshape(mass, (Pn, 1)), (Pn, E)))


def pair_scores(head: MLP, S: Tensor, Q: Tensor) -> Tensor:
    """Score every (point, part) pair from ``[S_n, Q_p, S_n * Q_p]``."""
    N, E = S.shape
    P = Q.shape[0]
    Sx = T.expand(T.reshape(S, (N, 1, E)), (N, P, E))
    Qx = T.expand(T.reshape(Q, (1, P, E)), (N, P, E))
    feats = T.concat([Sx, Qx, Sx * Qx], axis=2)
    out = head(T.reshape(feats, (N * P, 3 * E)))
    return T.reshape(out, (N, P))

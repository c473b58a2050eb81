"""One-step fixed-point training, Banach inference, and contraction diagnostics."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .geometry import Pointcloud, act, sample_random
from .network import NetConfig, NeighborhoodIndex, PartAwareNet
from .segmentation import SoftSegmentation, matched_iou, noisy_init, quotient_distance
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITERS = 20
DEGENERATE_PAIR = 1e-10
DIVERGE_RUN = 3

ArrayMap = Callable[[np.ndarray], np.ndarray]


def _arr(y) -> np.ndarray:
    return y.assign if isinstance(y, SoftSegmentation) else np.asarray(y, dtype=np.float64)


# -- training ----------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = False
    augment_t_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.augment_t_max < 0:
            raise ValueError("augment_t_max must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["adam.t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=self.params[i].dtype)
            self.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=self.params[i].dtype)


def fixpoint_loss(net, X, y_gt, nbr: Optional[NeighborhoodIndex] = None) -> Tensor:
    """``||f(X, y_gt) - y_gt||_F / sqrt(N)``, with a single forward pass."""
    y = _arr(y_gt)
    out = net(X, y, nbr)
    diff = out - Tensor(y, dtype=out.dtype)
    return T.l2_norm(T.reshape(diff, (diff.size,)), axis=0) * (1.0 / np.sqrt(y.shape[0]))


def _abort_on_nan(loss: Tensor, diagnostics: list) -> None:
    if not np.isfinite(loss.data).all():
        detail = "; ".join(diagnostics) if diagnostics else "no layer diagnostics"
        raise T.NumericalError(f"non-finite training loss ({detail})")


def train_step(net, X, y_gt, opt: Adam, nbr: Optional[NeighborhoodIndex] = None) -> float:
    """Forward at ``y = y_gt``, backward, one optimizer update. Returns the loss."""
    opt.zero_grad()
    with Tape():
        loss = fixpoint_loss(net, X, y_gt, nbr)
        _abort_on_nan(loss, [])
        T.backward(loss)
    opt.step()
    return float(loss.data)


def train_batch_step(net, batch: Sequence, opt: Adam) -> float:
    """Mean of per-sample losses over ``(X, y_gt, nbr)`` triples; one forward each."""
    opt.zero_grad()
    with Tape():
        losses = [fixpoint_loss(net, X, y, nbr) for X, y, nbr in batch]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss = total * (1.0 / len(losses))
        _abort_on_nan(loss, [])
        T.backward(loss)
    opt.step()
    return float(loss.data)


def make_optimizer(net: PartAwareNet, cfg: TrainConfig) -> Adam:
    return Adam(net.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def train(net: PartAwareNet, samples: Sequence, cfg: TrainConfig, opt: Optional[Adam] = None,
          start_epoch: int = 0, on_epoch: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Run ``cfg.epochs`` epochs over ``(X, y_gt)`` pairs; returns the per-epoch mean loss.

    An epoch visits every sample once in a seeded random order. Epoch ``e`` uses
    ``default_rng([seed, e])`` so resumed runs reproduce an uninterrupted one.
    """
    opt = opt or make_optimizer(net, cfg)
    data = [(Pointcloud(X.points if hasattr(X, "points") else X), _arr(y)) for X, y in samples]
    cached = [net.neighborhoods(X) for X, _ in data] if not cfg.augment else None
    curve = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for i in order[start:start + cfg.batch_size]:
                X, y = data[i]
                if cfg.augment:
                    A = sample_random(y.shape[1], rng, cfg.augment_t_max)
                    X = act(A, X, y)
                    batch.append((X, y, net.neighborhoods(X)))
                else:
                    batch.append((X, y, cached[i]))
            losses.append(train_batch_step(net, batch, opt))
        mean = float(np.mean(losses))
        curve.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        log.debug("epoch %d loss %.6f", epoch, mean)
    return curve


# -- checkpoints -------------------------------------------------------------------
def save_model(path, net: PartAwareNet, opt: Optional[Adam] = None, epoch: int = 0, extra: Optional[dict] = None) -> None:
    arrays = {f"param.{k}": v for k, v in net.state_dict().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {"net": asdict(net.config), "epoch": int(epoch), "has_optimizer": opt is not None}
    if extra:
        meta["extra"] = extra
    save_arrays(path, arrays, meta)


def load_model(path) -> tuple[PartAwareNet, dict, dict]:
    """Returns ``(net, arrays, meta)``; pass ``arrays`` to ``Adam.load_state_arrays`` to resume."""
    arrays, meta = load_arrays(path)
    net = PartAwareNet(NetConfig.from_dict(meta["net"]))
    net.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return net, arrays, meta


# -- Banach iteration ------------------------------------------------------------------
@dataclass
class FixpointReport:
    iterates: list
    converged: bool
    steps: int
    final_y: object
    estimated_L: Optional[float] = None
    bound: Optional[float] = None
    diverged: bool = False
    beta: float = 1.0
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    history: list = field(default_factory=list, repr=False)

    @property
    def rms_residuals(self) -> list:
        n = _arr(self.final_y).shape[0]
        return [r / np.sqrt(n) for r in self.iterates]

    def to_dict(self, include_y: bool = False) -> dict:
        d = {
            "residuals": [float(r) for r in self.iterates],
            "rms_residuals": [float(r) for r in self.rms_residuals],
            "converged": bool(self.converged),
            "diverged": bool(self.diverged),
            "steps": int(self.steps),
            "beta": float(self.beta),
            "tol": float(self.tol),
            "max_iters": int(self.max_iters),
            "estimated_L": None if self.estimated_L is None else float(self.estimated_L),
            "bound": None if self.bound is None else float(self.bound),
        }
        if include_y:
            d["final_y"] = _arr(self.final_y).tolist()
        return d


def _check_iteration_args(tol, max_iters, beta):
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if not 0 < beta <= 1:
        raise ValueError("damping beta must lie in (0, 1]")


def banach_iterate(fmap: ArrayMap, y0, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                   beta: float = 1.0, keep_history: bool = False) -> FixpointReport:
    """``y <- (1 - beta) y + beta f(y)`` until the RMS step falls below ``tol``.

    Residuals are Frobenius norms of each step; the stopping test divides by
    sqrt(N). The run stops early, flagged diverged, once the residual has risen
    for three consecutive steps while staying above its first value.
    """
    _check_iteration_args(tol, max_iters, beta)
    y = np.array(_arr(y0), dtype=np.float64)
    scale = np.sqrt(y.shape[0])
    residuals, history = [], [y.copy()] if keep_history else []
    converged = diverged = False
    rises = 0
    for _ in range(max_iters):
        fy = np.asarray(fmap(y), dtype=np.float64)
        if fy.shape != y.shape:
            raise T.ShapeError(f"map returned shape {fy.shape} for input {y.shape}")
        if not np.all(np.isfinite(fy)):
            raise T.NumericalError(f"non-finite iterate at step {len(residuals) + 1}")
        y_next = fy if beta == 1.0 else (1.0 - beta) * y + beta * fy
        r = float(np.linalg.norm(y_next - y))
        rises = rises + 1 if residuals and r > residuals[-1] and r > residuals[0] else 0
        residuals.append(r)
        y = y_next
        if keep_history:
            history.append(y.copy())
        if r / scale < tol:
            converged = True
            break
        if rises >= DIVERGE_RUN:
            diverged = True
            break
    return FixpointReport(residuals, converged, len(residuals), y, diverged=diverged, beta=beta, tol=tol,
                          max_iters=max_iters, history=history)


def net_map(net, X, nbr: Optional[NeighborhoodIndex] = None) -> ArrayMap:
    """``y -> f(X, y)`` with neighbourhoods computed once from ``X``."""
    if not isinstance(net, PartAwareNet):
        return net
    nbr = net.neighborhoods(X) if nbr is None else nbr
    return lambda y: net.predict(X, y, nbr)


def banach_infer(net, X, y0, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS, beta: float = 1.0,
                 nbr: Optional[NeighborhoodIndex] = None, keep_history: bool = False) -> FixpointReport:
    report = banach_iterate(net_map(net, X, nbr), y0, tol, max_iters, beta, keep_history)
    y = report.final_y
    if np.all(np.isfinite(y)) and np.abs(y.sum(axis=1) - 1).max() < 1e-6:
        report.final_y = SoftSegmentation(y)
    return report


# -- contraction diagnostics ---------------------------------------------------------
@dataclass
class LipschitzEstimate:
    L: float
    pairs: int
    skipped: int
    ratios: list = field(repr=False, default_factory=list)


def _random_simplex(shape, rng) -> np.ndarray:
    y = rng.exponential(size=shape)
    return y / y.sum(axis=1, keepdims=True)


def estimate_lipschitz(net, X, samples: int, rng, y_ref=None, perturb: float = 1e-3,
                       nbr: Optional[NeighborhoodIndex] = None, shape: Optional[tuple] = None) -> LipschitzEstimate:
    """Largest sampled ratio ``||f(y1) - f(y2)|| / ||y1 - y2||``: a lower bound on L.

    Each sample draws one pair of independent simplex points and one small
    perturbation pair around a random point (or around ``y_ref`` when given,
    alternating with the random centre).
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    fmap = net_map(net, X, nbr)
    if shape is None:
        if y_ref is not None:
            shape = _arr(y_ref).shape
        elif isinstance(net, PartAwareNet):
            pts = X.points if hasattr(X, "points") else np.asarray(X)
            shape = (pts.shape[0], net.config.P)
        else:
            raise ValueError("shape is required for a plain map without y_ref")
    ratios, skipped = [], 0
    for i in range(samples):
        pairs = [(_random_simplex(shape, rng), _random_simplex(shape, rng))]
        centre = _arr(y_ref) if (y_ref is not None and i % 2 == 0) else _random_simplex(shape, rng)
        moved = np.clip(centre + perturb * rng.standard_normal(shape), 1e-12, None)
        pairs.append((centre, moved / moved.sum(axis=1, keepdims=True)))
        for y1, y2 in pairs:
            d = float(np.linalg.norm(y1 - y2))
            if d < DEGENERATE_PAIR:
                skipped += 1
                continue
            ratios.append(float(np.linalg.norm(fmap(y1) - fmap(y2))) / d)
    L = max(ratios) if ratios else float("nan")
    return LipschitzEstimate(L, len(ratios), skipped, ratios)


@dataclass
class BoundReport:
    L: float
    eps: float
    bound: Optional[float]
    distance: float
    holds: Optional[bool]

    def to_dict(self) -> dict:
        return asdict(self)


def error_bound(fmap: ArrayMap, y_gt, y_star, L: float, slack: float = 1e-6, quotient: bool = False) -> BoundReport:
    """Check ``||y* - y_gt|| <= eps / (1 - L)`` with ``eps = ||f(y_gt) - y_gt||``.

    The bound is only meaningful for ``L < 1``; otherwise ``bound`` and ``holds`` are None.
    """
    g, s = _arr(y_gt), _arr(y_star)
    eps = float(np.linalg.norm(np.asarray(fmap(g)) - g))
    dist = quotient_distance(s, g)[0] if quotient else float(np.linalg.norm(s - g))
    if not L < 1:
        return BoundReport(float(L), eps, None, dist, None)
    bound = eps / (1.0 - L)
    return BoundReport(float(L), eps, bound, dist, bool(dist <= bound + slack))


# -- audits and sweeps -------------------------------------------------------------
@dataclass
class AuditReport:
    max_residual: float
    residuals: list
    banach_distances: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"max_residual": float(self.max_residual), "residuals": [float(r) for r in self.residuals],
                "banach_distances": [float(d) for d in self.banach_distances],
                "max_banach_distance": float(max(self.banach_distances)) if self.banach_distances else None}


def equivariance_audit(net: PartAwareNet, X, y, trials: int, rng, t_max: float = 1.0, banach_y0=None,
                       tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS, beta: float = 1.0) -> AuditReport:
    """Max-abs change of one forward pass when each part is moved by a random rigid motion.

    With ``banach_y0`` the full iteration is also run on both inputs, and the
    quotient distance between the two converged segmentations is recorded.
    """
    g = _arr(y)
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("equivariance audit needs a binary segmentation")
    base = net.predict(X, g)
    base_star = banach_infer(net, X, banach_y0, tol, max_iters, beta).final_y if banach_y0 is not None else None
    residuals, dists = [], []
    for _ in range(trials):
        A = sample_random(g.shape[1], rng, t_max)
        Xa = act(A, X, g)
        residuals.append(float(np.abs(net.predict(Xa, g) - base).max()))
        if base_star is not None:
            star = banach_infer(net, Xa, banach_y0, tol, max_iters, beta).final_y
            dists.append(quotient_distance(_arr(star), _arr(base_star))[0])
    return AuditReport(max(residuals) if residuals else 0.0, residuals, dists)


@dataclass
class SweepRow:
    alpha: float
    mean_iou: float
    std_iou: float
    converged_frac: float
    trials: int


def noise_basin_sweep(net, X, y_gt, alphas: Sequence[float], trials: int, rng, tol: float = DEFAULT_TOL,
                      max_iters: int = DEFAULT_MAX_ITERS, beta: float = 1.0, groups=None,
                      csv_path=None) -> list[SweepRow]:
    """Matched IoU of converged iterates started from ``noisy_init(y_gt, alpha)``.

    ``X`` and ``y_gt`` may also be equal-length lists of shapes; every trial
    then visits every shape.
    """
    if any(not 0 <= a <= 1 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    cases = list(zip(X, y_gt)) if isinstance(X, (list, tuple)) else [(X, y_gt)]
    maps = [net_map(net, Xi) for Xi, _ in cases]
    rows = []
    for alpha in alphas:
        ious, conv = [], []
        for _ in range(trials):
            for fmap, (_, g) in zip(maps, cases):
                rep = banach_iterate(fmap, noisy_init(g, alpha, rng), tol, max_iters, beta)
                ious.append(matched_iou(rep.final_y, g, groups))
                conv.append(rep.converged)
        rows.append(SweepRow(float(alpha), float(np.mean(ious)), float(np.std(ious)), float(np.mean(conv)), len(ious)))
    if csv_path is not None:
        write_sweep_csv(csv_path, rows)
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "mean_iou", "std_iou", "converged_frac", "trials"])
        for r in rows:
            w.writerow([repr(r.alpha), repr(r.mean_iou), repr(r.std_iou), repr(r.converged_frac), r.trials])

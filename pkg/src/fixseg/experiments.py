"""Train on rest states, then segment unseen articulations from a random start."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .fixpoint import DEFAULT_MAX_ITERS, DEFAULT_TOL, TrainConfig, banach_infer, make_optimizer, noise_basin_sweep, train
from .network import NetConfig, PartAwareNet
from .segmentation import matched_iou, uniform_random_init
from .synth import DatasetEntry, SplitSpec, build_template, sample_dataset


@dataclass
class ArticulationConfig:
    template: str = "lamp"
    n_train: int = 8
    n_test: int = 32
    n_points: int = 128
    target_loss: float = 0.05
    max_epochs: int = 150
    lr: float = 3e-4
    seed: int = 0
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    beta: float = 1.0
    net: dict = field(default_factory=dict)

    def net_config(self) -> NetConfig:
        tpl = build_template(self.template)
        base = {"P": tpl.P, "k": self.n_points, "seed": self.seed, "semantic_groups": tpl.groups()}
        return NetConfig.from_dict({**base, **self.net})


@dataclass
class CaseResult:
    index: int
    instance: int
    angles: list
    iou: float
    converged: bool
    steps: int


@dataclass
class ArticulationResult:
    config: ArticulationConfig
    epochs: int
    losses: list
    cases: list
    net: Optional[PartAwareNet] = field(default=None, repr=False)
    entries: list = field(default_factory=list, repr=False)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def mean_iou(self) -> float:
        return float(np.mean([c.iou for c in self.cases]))

    @property
    def converged_frac(self) -> float:
        return float(np.mean([c.converged for c in self.cases]))

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "epochs": self.epochs, "final_loss": self.final_loss,
                "mean_iou": self.mean_iou, "converged_frac": self.converged_frac,
                "cases": [asdict(c) for c in self.cases]}


def split_entries(cfg: ArticulationConfig) -> tuple[list[DatasetEntry], list[DatasetEntry]]:
    entries = sample_dataset([cfg.template], cfg.n_train, cfg.seed, cfg.n_points, SplitSpec(n_test_states=cfg.n_test))
    return [e for e in entries if e.split == "train"], [e for e in entries if e.split == "test_states"]


def train_to_target(net: PartAwareNet, entries: list[DatasetEntry], cfg: ArticulationConfig) -> list[float]:
    """Epochs until the mean loss drops below ``cfg.target_loss`` or ``cfg.max_epochs`` run out."""
    tcfg = TrainConfig(lr=cfg.lr, epochs=1, seed=cfg.seed)
    opt = make_optimizer(net, tcfg)
    samples = [(e.sample.X, e.sample.y_gt) for e in entries]
    losses = []
    for epoch in range(cfg.max_epochs):
        losses.append(train(net, samples, tcfg, opt=opt, start_epoch=epoch)[0])
        if losses[-1] < cfg.target_loss:
            break
    return losses


def evaluate(net: PartAwareNet, entries: list[DatasetEntry], cfg: ArticulationConfig) -> list[CaseResult]:
    groups = net.config.semantic_groups
    out = []
    for e in entries:
        inst = e.sample
        y0 = uniform_random_init(inst.X.N, net.config.P, np.random.default_rng([cfg.seed, 1, e.index]))
        rep = banach_infer(net, inst.X, y0, cfg.tol, cfg.max_iters, cfg.beta)
        out.append(CaseResult(e.index, e.instance, [float(a) for a in inst.angles],
                              matched_iou(rep.final_y, inst.y_gt, groups), rep.converged, rep.steps))
    return out


def run_articulation(cfg: ArticulationConfig) -> ArticulationResult:
    train_set, test_set = split_entries(cfg)
    net = PartAwareNet(cfg.net_config())
    losses = train_to_target(net, train_set, cfg)
    return ArticulationResult(cfg, len(losses), losses, evaluate(net, test_set, cfg), net, train_set + test_set)


def noise_sweep(result: ArticulationResult, alphas=(0.0, 0.25, 0.5, 0.75, 1.0), trials: int = 10,
                split: str = "test_states", csv_path=None):
    """(alpha, IoU) rows for the trained model over one split of its dataset."""
    cfg = result.config
    shapes = [e.sample for e in result.entries if e.split == split]
    return noise_basin_sweep(result.net, [s.X for s in shapes], [s.y_gt for s in shapes], list(alphas), trials,
                             np.random.default_rng([cfg.seed, 2]), cfg.tol, cfg.max_iters, cfg.beta,
                             result.net.config.semantic_groups, csv_path)

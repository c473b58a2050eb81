"""``fixseg`` command line: dataset generation, training, inference and diagnostics.

Option values resolve as built-in defaults, then a JSON ``--config`` file whose
keys mirror the flag names, then explicit flags. The resolved values are written
into every report so a run can be repeated exactly.

Exit codes: 0 ok, 2 configuration or usage error, 3 numerical failure,
4 divergence of the fixed-point iteration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .fixpoint import (
    DEFAULT_MAX_ITERS, DEFAULT_TOL, TrainConfig, banach_infer, equivariance_audit, error_bound, estimate_lipschitz,
    load_model, make_optimizer, net_map, noise_basin_sweep, save_model, train,
)
from .geometry import GeometryError, Pointcloud, read_pointcloud, write_pointcloud
from .network import NetConfig, PartAwareNet
from .segmentation import SegmentationError, SoftSegmentation, matched_iou, noisy_init, uniform_random_init
from .synth import SplitSpec, TemplateError, make_dataset, read_manifest
from .tensor import NumericalError, ShapeError

log = logging.getLogger("fixseg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4
SEED_ENV = "BANANA_SEED"
NET_FLAGS = ("width", "k", "r", "eq_layers", "mixed_layers", "code_dim", "head_hidden", "mode")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    command: str
    seed: int
    dtype: str
    threads: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""
    required: bool = False
    flag: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


EVAL_OPTS = [
    Opt("tol", float, DEFAULT_TOL, "RMS residual stopping tolerance"),
    Opt("max-iters", int, DEFAULT_MAX_ITERS, "iteration cap"),
    Opt("beta", float, 1.0, "damping factor in (0, 1]; 1 is the plain iteration"),
]
DATA_OPTS = [
    Opt("ckpt", str, None, "trained checkpoint", required=True),
    Opt("data", str, None, "dataset directory", required=True),
    Opt("split", str, "test_states", "manifest split to evaluate"),
    Opt("templates", str, None, "comma-separated template filter"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen": [
        Opt("templates", str, "oven", "comma-separated template names"),
        Opt("out", str, None, "output directory", required=True),
        Opt("n", int, 8, "training instances per template"),
        Opt("n-points", int, 128, "points per shape"),
        Opt("test-states", int, 32, "articulations of training instances"),
        Opt("test-instances", int, 0, "articulations of held-out jittered instances"),
        Opt("jitter", float, 0.2, "relative template scale jitter"),
    ],
    "train": [
        Opt("data", str, None, "dataset directory", required=True),
        Opt("out-ckpt", str, None, "checkpoint to write", required=True),
        Opt("templates", str, None, "comma-separated template filter"),
        Opt("epochs", int, 300, "epochs to run"),
        Opt("lr", float, 1e-3, "Adam learning rate"),
        Opt("batch-size", int, 1, "shapes per update"),
        Opt("target-loss", float, None, "stop once an epoch's mean loss falls below this"),
        Opt("augment", bool, False, "apply random per-part motions to training pairs", flag=True),
        Opt("resume", str, None, "checkpoint to continue from"),
        Opt("losses", str, None, "loss curve CSV (default: next to the checkpoint)"),
        Opt("width", int, None, "network width"),
        Opt("k", int, None, "ball-query cap (default: points per shape)"),
        Opt("r", float, None, "ball-query radius"),
        Opt("eq-layers", int, None, "equivariant message-passing layers"),
        Opt("mixed-layers", int, None, "message-passing layers with global concat"),
        Opt("code-dim", int, None, "part code width"),
        Opt("head-hidden", int, None, "score head hidden width"),
        Opt("mode", str, None, "semantic or instance"),
        Opt("net", json.loads, None, "JSON object of network config overrides"),
    ],
    "infer": [
        Opt("ckpt", str, None, "trained checkpoint", required=True),
        Opt("input", str, None, "pointcloud text file", required=True),
        Opt("out", str, None, "labelled pointcloud to write", required=True),
        Opt("report", str, None, "FixpointReport JSON (default: <out>.json)"),
        Opt("init", str, "uniform", "uniform or noisy:<alpha> (noisy needs input labels)"),
        Opt("allow-diverged", bool, False, "exit 0 even if the iteration diverged", flag=True),
        *EVAL_OPTS,
    ],
    "eval": [*DATA_OPTS, Opt("out", str, None, "per-instance CSV", required=True),
             Opt("report", str, None, "summary JSON (default: <out>.json)"), *EVAL_OPTS],
    "audit-equiv": [*DATA_OPTS[:2], Opt("split", str, "train", "manifest split"), DATA_OPTS[3],
                    Opt("out", str, None, "report JSON", required=True),
                    Opt("trials", int, 50, "random per-part motions per shape"),
                    Opt("t-max", float, 1.0, "translation range"),
                    Opt("banach", bool, False, "also compare full iterations from a uniform start", flag=True),
                    *EVAL_OPTS],
    "lipschitz": [*DATA_OPTS[:2], Opt("split", str, "train", "manifest split"), DATA_OPTS[3],
                  Opt("out", str, None, "report JSON", required=True),
                  Opt("samples", int, 20, "sampled pairs per shape"),
                  Opt("perturb", float, 1e-3, "size of the local perturbation pairs"),
                  *EVAL_OPTS],
    "sweep-noise": [*DATA_OPTS, Opt("out", str, None, "(alpha, IoU) CSV", required=True),
                    Opt("report", str, None, "summary JSON (default: <out>.json)"),
                    Opt("alphas", str, "0,0.25,0.5,0.75,1", "comma-separated noise levels"),
                    Opt("trials", int, 10, "seeds per noise level"),
                    *EVAL_OPTS],
}


# -- argument handling -------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fixseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fixseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file whose keys mirror the flag names")
        p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
        p.add_argument("--dtype", choices=["float64", "float32"], default=None)
        p.add_argument("--threads", type=int, default=None, help="worker threads for per-shape work (default 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        for o in opts:
            if o.flag:
                p.add_argument(f"--{o.name}", dest=o.dest, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(f"--{o.name}", dest=o.dest, type=o.type, default=None, help=o.help)
    return parser


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV}={raw!r} is not an integer") from None


def resolve(args: argparse.Namespace) -> RunConfig:
    opts = COMMANDS[args.command]
    values = {o.dest: o.default for o in opts}
    common = {"seed": _default_seed(), "dtype": "float64", "threads": 1}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise CliError("config file must hold a JSON object")
        for key, val in cfg.items():
            dest = key.replace("-", "_")
            if dest in common:
                common[dest] = val
            elif dest in values:
                values[dest] = val
            else:
                raise CliError(f"unknown config key {key!r} for command {args.command}")
    for dest in common:
        if getattr(args, dest) is not None:
            common[dest] = getattr(args, dest)
    for o in opts:
        if getattr(args, o.dest) is not None:
            values[o.dest] = getattr(args, o.dest)
    missing = [f"--{o.name}" for o in opts if o.required and values[o.dest] is None]
    if missing:
        raise CliError(f"{args.command}: missing required option(s) {', '.join(missing)}")
    if common["dtype"] not in ("float64", "float32"):
        raise CliError(f"unsupported dtype {common['dtype']!r}")
    if int(common["threads"]) < 1:
        raise CliError("--threads must be at least 1")
    return RunConfig(args.command, int(common["seed"]), common["dtype"], int(common["threads"]), values)


def _report_header(run: RunConfig) -> dict:
    return {"version": __version__, "run_config": run.to_dict()}


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split_names(s: Optional[str]) -> Optional[list]:
    if s is None:
        return None
    names = [t.strip() for t in s.split(",") if t.strip()]
    if not names:
        raise CliError("empty template list")
    return names


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    # results are keyed by position, so thread count never changes the output
    if threads <= 1 or len(items) < 2:
        return [fn(i, it) for i, it in enumerate(items)]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, range(len(items)), items))


# -- data access -----------------------------------------------------------------
@dataclass
class Shape:
    file: str
    template: str
    X: Pointcloud
    y: SoftSegmentation


def load_split(data: str, split: str, templates: Optional[list] = None) -> tuple[list[Shape], dict]:
    try:
        manifest = read_manifest(data)
    except FileNotFoundError:
        raise CliError(f"no manifest.json under {data}") from None
    except Exception as exc:  # json or schema errors
        raise CliError(f"invalid manifest in {data}: {exc}") from None
    known = manifest["templates"]
    if templates:
        unknown = sorted(set(templates) - set(known))
        if unknown:
            raise CliError(f"templates not in dataset: {', '.join(unknown)}")
    shapes = []
    for e in manifest["entries"]:
        if e["split"] != split or (templates and e["template"] not in templates):
            continue
        X, labels = read_pointcloud(Path(data) / e["file"])
        if labels is None:
            raise CliError(f"{e['file']} has no label column")
        shapes.append(Shape(e["file"], e["template"], X, SoftSegmentation.from_labels(labels, known[e["template"]]["P"])))
    if not shapes:
        raise CliError(f"split {split!r} of {data} holds no shapes")
    Ps = {s.y.P for s in shapes}
    if len(Ps) > 1:
        raise CliError(f"selected shapes mix part counts {sorted(Ps)}; filter with --templates")
    return shapes, manifest


def _load_net(path: str) -> tuple[PartAwareNet, dict, dict]:
    try:
        return load_model(path)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None


def _check_P(net: PartAwareNet, P: int) -> None:
    if net.config.P != P:
        raise CliError(f"checkpoint expects P={net.config.P} parts but the data has P={P}")


def _groups(net: PartAwareNet):
    return net.config.semantic_groups


# -- commands ----------------------------------------------------------------------
def cmd_gen(run: RunConfig) -> int:
    p = run.params
    names = _split_names(p["templates"])
    split = SplitSpec(n_test_states=p["test_states"], n_test_instances=p["test_instances"], jitter=p["jitter"])
    make_dataset(names, p["n"], p["out"], seed=run.seed, n_points=p["n_points"], split=split)
    log.info("wrote %s", p["out"])
    return EXIT_OK


def _net_config(run: RunConfig, shapes: list[Shape], manifest: dict) -> NetConfig:
    p = run.params
    groups = manifest["templates"][shapes[0].template]["semantic_groups"]
    overrides = {"P": shapes[0].y.P, "k": manifest["n_points"], "seed": run.seed, "dtype": run.dtype}
    if groups is not None and len({s.template for s in shapes}) == 1:
        overrides["semantic_groups"] = groups
    overrides.update(p["net"] or {})
    overrides.update({k: p[k] for k in NET_FLAGS if p[k] is not None})
    return NetConfig.from_dict(overrides)


def cmd_train(run: RunConfig) -> int:
    p = run.params
    shapes, manifest = load_split(p["data"], "train", _split_names(p["templates"]))
    tcfg = TrainConfig(lr=p["lr"], epochs=1, batch_size=p["batch_size"], augment=bool(p["augment"]), seed=run.seed)
    losses_path = Path(p["losses"]) if p["losses"] else Path(p["out_ckpt"]).with_suffix(".losses.csv")
    if p["resume"]:
        net, arrays, meta = _load_net(p["resume"])
        _check_P(net, shapes[0].y.P)
        opt = make_optimizer(net, tcfg)
        if meta.get("has_optimizer"):
            opt.load_state_arrays(arrays)
        start = int(meta["epoch"])
        rows = losses_path.read_text().splitlines()[1:] if losses_path.exists() else []
        rows = [r for r in rows if r and int(r.split(",")[0]) < start]
    else:
        net = PartAwareNet(_net_config(run, shapes, manifest))
        opt = make_optimizer(net, tcfg)
        start, rows = 0, []
    samples = [(s.X, s.y) for s in shapes]
    epoch, loss = start, float("nan")
    for epoch in range(start, start + p["epochs"]):
        loss = train(net, samples, tcfg, opt=opt, start_epoch=epoch)[0]
        rows.append(f"{epoch},{loss!r}")
        log.info("epoch %d loss %.6f", epoch, loss)
        if p["target_loss"] is not None and loss < p["target_loss"]:
            break
    done = epoch + 1 if p["epochs"] > 0 else start
    losses_path.parent.mkdir(parents=True, exist_ok=True)
    losses_path.write_text("epoch,loss\n" + "".join(r + "\n" for r in rows))
    header = _report_header(run)
    save_model(p["out_ckpt"], net, opt, epoch=done, extra=header)
    _write_json(Path(p["out_ckpt"]).with_suffix(".train.json"),
                {**header, "net": asdict(net.config), "epochs_done": done, "final_loss": loss,
                 "shapes": [s.file for s in shapes], "losses": str(losses_path)})
    return EXIT_OK


def _parse_init(spec: str):
    if spec == "uniform":
        return None
    kind, _, val = spec.partition(":")
    if kind != "noisy" or not val:
        raise CliError(f"--init must be 'uniform' or 'noisy:<alpha>', got {spec!r}")
    try:
        alpha = float(val)
    except ValueError:
        raise CliError(f"bad noise level in --init {spec!r}") from None
    if not 0 <= alpha <= 1:
        raise CliError("noise level must lie in [0, 1]")
    return alpha


def cmd_infer(run: RunConfig) -> int:
    p = run.params
    alpha = _parse_init(p["init"])
    net, _, _ = _load_net(p["ckpt"])
    X, labels = read_pointcloud(p["input"])
    P = net.config.P
    rng = np.random.default_rng(run.seed)
    gt = None
    if labels is not None:
        if labels.max(initial=0) >= P:
            raise CliError(f"input labels exceed the checkpoint's P={P}")
        gt = SoftSegmentation.from_labels(labels, P)
    if alpha is None:
        y0 = uniform_random_init(X.N, P, rng)
    elif gt is None:
        raise CliError("noisy init needs a label column in the input")
    else:
        y0 = noisy_init(gt, alpha, rng)
    rep = banach_infer(net, X, y0, p["tol"], p["max_iters"], p["beta"])
    pred = np.asarray(getattr(rep.final_y, "assign", rep.final_y)).argmax(axis=1)
    write_pointcloud(p["out"], X, pred)
    out = {**_report_header(run), "report": rep.to_dict(), "input": p["input"]}
    if gt is not None:
        out["matched_iou"] = matched_iou(rep.final_y, gt, _groups(net))
    _write_json(p["report"] or p["out"] + ".json", out)
    if rep.diverged and not p["allow_diverged"]:
        print(f"fixseg: iteration diverged after {rep.steps} steps", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _prepare(run: RunConfig, split: Optional[str] = None):
    p = run.params
    net, _, _ = _load_net(p["ckpt"])
    shapes, _ = load_split(p["data"], split or p["split"], _split_names(p["templates"]))
    _check_P(net, shapes[0].y.P)
    return net, shapes


def cmd_eval(run: RunConfig) -> int:
    p = run.params
    net, shapes = _prepare(run)

    def one(i, s: Shape):
        y0 = uniform_random_init(s.X.N, s.y.P, np.random.default_rng([run.seed, i]))
        rep = banach_infer(net, s.X, y0, p["tol"], p["max_iters"], p["beta"])
        return {"file": s.file, "template": s.template, "iou": matched_iou(rep.final_y, s.y, _groups(net)),
                "converged": rep.converged, "diverged": rep.diverged, "steps": rep.steps,
                "final_rms_residual": rep.rms_residuals[-1]}

    rows = _pmap(one, shapes, run.threads)
    Path(p["out"]).parent.mkdir(parents=True, exist_ok=True)
    with open(p["out"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = {**_report_header(run), "mean_iou": float(np.mean([r["iou"] for r in rows])),
               "converged_frac": float(np.mean([r["converged"] for r in rows])), "n": len(rows), "instances": rows}
    _write_json(p["report"] or p["out"] + ".json", summary)
    print(f"mean matched IoU {summary['mean_iou']:.4f} over {len(rows)} shapes, converged {summary['converged_frac']:.2%}")
    return EXIT_OK


def cmd_audit(run: RunConfig) -> int:
    p = run.params
    net, shapes = _prepare(run)

    def one(i, s: Shape):
        rng = np.random.default_rng([run.seed, i])
        y0 = uniform_random_init(s.X.N, s.y.P, rng) if p["banach"] else None
        rep = equivariance_audit(net, s.X, s.y, p["trials"], rng, p["t_max"], y0, p["tol"], p["max_iters"], p["beta"])
        return {"file": s.file, **rep.to_dict()}

    rows = _pmap(one, shapes, run.threads)
    out = {**_report_header(run), "max_residual": max(r["max_residual"] for r in rows), "instances": rows}
    _write_json(p["out"], out)
    print(f"max per-part invariance residual {out['max_residual']:.3e}")
    return EXIT_OK


def cmd_lipschitz(run: RunConfig) -> int:
    p = run.params
    net, shapes = _prepare(run)

    def one(i, s: Shape):
        rng = np.random.default_rng([run.seed, i])
        nbr = net.neighborhoods(s.X)
        est = estimate_lipschitz(net, s.X, p["samples"], rng, y_ref=s.y, perturb=p["perturb"], nbr=nbr)
        # start at y_gt so the first step is exactly the bound's eps
        rep = banach_infer(net, s.X, s.y, p["tol"], p["max_iters"], p["beta"], nbr=nbr)
        bound = error_bound(net_map(net, s.X, nbr), s.y, rep.final_y, est.L)
        return {"file": s.file, "L_hat": est.L, "pairs": est.pairs, "skipped": est.skipped,
                "converged": rep.converged, **{k: v for k, v in bound.to_dict().items() if k != "L"}}

    rows = _pmap(one, shapes, run.threads)
    checked = [r["holds"] for r in rows if r["holds"] is not None]
    out = {**_report_header(run), "max_L_hat": max(r["L_hat"] for r in rows),
           "bound_checked": len(checked), "bound_holds_all": all(checked) if checked else None, "instances": rows}
    _write_json(p["out"], out)
    print(f"max sampled L {out['max_L_hat']:.4f}; bound holds on {sum(checked)}/{len(checked)} contractive shapes")
    return EXIT_OK


def cmd_sweep(run: RunConfig) -> int:
    p = run.params
    net, shapes = _prepare(run)
    try:
        alphas = [float(a) for a in p["alphas"].split(",")]
    except ValueError:
        raise CliError(f"bad --alphas {p['alphas']!r}") from None
    rows = noise_basin_sweep(net, [s.X for s in shapes], [s.y for s in shapes], alphas, p["trials"],
                             np.random.default_rng(run.seed), p["tol"], p["max_iters"], p["beta"], _groups(net),
                             csv_path=p["out"])
    out = {**_report_header(run), "rows": [asdict(r) for r in rows]}
    _write_json(p["report"] or p["out"] + ".json", out)
    for r in rows:
        print(f"alpha {r.alpha:.2f}  IoU {r.mean_iou:.4f}  converged {r.converged_frac:.2%}")
    return EXIT_OK


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "audit-equiv": cmd_audit, "lipschitz": cmd_lipschitz, "sweep-noise": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        run = resolve(args)
        return HANDLERS[run.command](run)
    except CliError as exc:
        if exc.code == EXIT_CONFIG:
            parser.print_usage(sys.stderr)
        print(f"fixseg: error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"fixseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TemplateError, GeometryError, SegmentationError, ShapeError, ValueError, OSError) as exc:
        print(f"fixseg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Noise-level sweep of the starting segmentation on a model trained at rest.

Writes the (alpha, IoU) curve as CSV.

    python3 scripts/noise_basin.py --template lamp --out results/noise_lamp.csv
"""
import argparse
from pathlib import Path

from fixseg.experiments import ArticulationConfig, noise_sweep, run_articulation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--template", default="lamp")
    ap.add_argument("--alphas", default="0,0.1,0.25,0.5,0.75,0.9,1")
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--split", default="test_states", choices=["train", "test_states"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("noise_basin.csv"))
    args = ap.parse_args()

    res = run_articulation(ArticulationConfig(template=args.template, seed=args.seed))
    print(f"trained {res.epochs} epochs to loss {res.final_loss:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    rows = noise_sweep(res, [float(a) for a in args.alphas.split(",")], args.trials, args.split, args.out)
    for r in rows:
        print(f"alpha {r.alpha:4.2f}  IoU {r.mean_iou:.3f} +- {r.std_iou:.3f}  converged {r.converged_frac:.0%}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

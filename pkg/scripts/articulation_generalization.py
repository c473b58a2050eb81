"""Train on rest states of each template, then segment unseen articulations from a random start.

    python3 scripts/articulation_generalization.py --templates lamp,bracket,oven --out results/articulation.json
"""
import argparse
import json
import time
from pathlib import Path

from fixseg.experiments import ArticulationConfig, run_articulation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--templates", default="lamp,bracket,oven,cabinet")
    ap.add_argument("--n-train", type=int, default=8)
    ap.add_argument("--n-test", type=int, default=32)
    ap.add_argument("--n-points", type=int, default=128)
    ap.add_argument("--target-loss", type=float, default=0.05)
    ap.add_argument("--max-epochs", type=int, default=150)
    ap.add_argument("--beta", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--net", type=json.loads, default={}, help="JSON network overrides, e.g. '{\"r\": 0.2}'")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    results = []
    print(f"{'template':<10} {'epochs':>6} {'loss':>7} {'conv':>6} {'IoU':>6} {'cpu s':>7}")
    for name in args.templates.split(","):
        cfg = ArticulationConfig(template=name, n_train=args.n_train, n_test=args.n_test, n_points=args.n_points,
                                 target_loss=args.target_loss, max_epochs=args.max_epochs, beta=args.beta,
                                 seed=args.seed, net=args.net)
        t0 = time.process_time()
        res = run_articulation(cfg)
        cpu = time.process_time() - t0
        print(f"{name:<10} {res.epochs:>6} {res.final_loss:>7.4f} {res.converged_frac:>6.0%} {res.mean_iou:>6.3f} {cpu:>7.0f}",
              flush=True)
        results.append({**res.to_dict(), "cpu_seconds": cpu})
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()

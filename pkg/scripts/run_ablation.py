"""Epsilon sweep plus single-arm runs, written as CSV and a median table.

Same cells as ``afsrl ablate`` but without the CLI; handy for quick budgets:

    python scripts/run_ablation.py --epochs 20 --out /tmp/abl20.csv
"""
import argparse
import csv
import dataclasses

from afsrl.experiments import ablation_cells, median_by, run_ablation
from afsrl.pointcloud import synthetic_dataset
from afsrl.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epsilons", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0, 2.0, 5.0])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()

    base = dataclasses.replace(TrainConfig(), epochs=args.epochs)
    cells = ablation_cells(args.epsilons, args.seeds, arms=("fused", "da_only", "fa_only"), arm_epsilon=base.epsilon)
    results = run_ablation(synthetic_dataset(), base, cells, workers=args.workers)

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "epsilon", "seed", "test_accuracy", "status", "steps"])
        for c, r in zip(cells, results):
            w.writerow([c.arm, c.epsilon, c.seed, f"{r.test_accuracy:.6f}", r.status, r.steps])
    for (arm, eps), m in sorted(median_by(cells, results, lambda c: (c.arm, c.epsilon)).items()):
        print(f"{arm:8s} eps={eps:<5g} median test acc {m:.4f}")


if __name__ == "__main__":
    main()

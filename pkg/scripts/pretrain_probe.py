"""Pre-train once with the given settings and report probe accuracy.

    python scripts/pretrain_probe.py --epochs 20 --epsilon 0.5
"""
import argparse
import dataclasses
import logging
import time

from afsrl.experiments import pretrain_and_probe, untrained_probe
from afsrl.pointcloud import synthetic_dataset
from afsrl.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--epsilon", type=float, default=1.0)
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--beta", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", action="store_true")
    args = ap.parse_args()
    if args.v:
        logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = dataclasses.replace(TrainConfig(), epochs=args.epochs, epsilon=args.epsilon,
                              alpha=args.alpha, beta=args.beta, seed=args.seed)
    ds = synthetic_dataset()
    t0 = time.perf_counter()
    res = pretrain_and_probe(ds, cfg)
    base = untrained_probe(ds, cfg)
    print(f"trained   test {res.test_accuracy:.4f}  class-mean {res.test_class_mean_accuracy:.4f}  "
          f"status {res.status} after {res.steps} steps ({time.perf_counter() - t0:.0f}s)")
    print(f"untrained test {base.test_accuracy:.4f}")


if __name__ == "__main__":
    main()

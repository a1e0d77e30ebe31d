"""Linear-probe accuracy of randomly initialised encoders, one line per seed."""
import argparse
import dataclasses

import numpy as np

from afsrl.experiments import untrained_probe
from afsrl.pointcloud import synthetic_dataset
from afsrl.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    ds = synthetic_dataset(seed=args.data_seed)
    accs = []
    for s in args.seeds:
        r = untrained_probe(ds, dataclasses.replace(TrainConfig(), seed=s))
        accs.append(r.test_accuracy)
        print(f"seed {s}: train {r.train_accuracy:.4f}  test {r.test_accuracy:.4f}")
    print(f"median test accuracy {np.median(accs):.4f}")


if __name__ == "__main__":
    main()

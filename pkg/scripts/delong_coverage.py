"""Monte-Carlo coverage of DeLong intervals for binormal scores with a known AUROC."""

import argparse
import math
from statistics import NormalDist

import numpy as np

from busdensity.evaluation import delong_ci


def coverage(true_auc: float, n: int, reps: int, seed: int) -> float:
    shift = math.sqrt(2) * NormalDist().inv_cdf(true_auc)
    rng = np.random.default_rng(seed)
    labels = np.r_[np.ones(n), np.zeros(n)]
    hits = 0
    for _ in range(reps):
        ci = delong_ci(np.r_[rng.normal(shift, 1, n), rng.normal(0, 1, n)], labels)
        hits += ci.lower <= true_auc <= ci.upper
    return hits / reps


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--auc", type=float, nargs="+", default=[0.6, 0.75, 0.9])
    ap.add_argument("--n", type=int, nargs="+", default=[50, 200, 1000])
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print("auc     n  coverage")
    for auc in args.auc:
        for n in args.n:
            print(f"{auc:.2f} {n:5d}  {coverage(auc, n, args.reps, args.seed):.4f}")

"""Fit SpMM-time coefficients to synthetic timings and report holdout R^2."""

import argparse

import numpy as np

from plexuskit import perf_model as pm
from plexuskit.grid import enumerate_configs


def synthetic_timings(n, noise, seed):
    rng = np.random.default_rng(seed)
    truth = np.array(pm.DEFAULT_COEFFICIENTS)
    feats = []
    for _ in range(n):
        N = int(rng.integers(10_000, 3_000_000))
        stats = pm.DatasetStats(N, int(N * rng.uniform(5, 60)), [128, 128, 128, 40])
        configs = enumerate_configs(int(rng.choice([8, 16, 32, 64])))
        feats.append(pm.comp_features(stats, configs[rng.integers(len(configs))]))
    X = np.array(feats)
    return X, X @ truth * (1 + noise * rng.normal(size=n))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=67)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write fitted coefficients as JSON")
    args = ap.parse_args()
    X, y = synthetic_timings(args.samples, args.noise, args.seed)
    fit = pm.fit_regression(X, y)
    rep = pm.holdout_evaluate(X, y, seed=args.seed)
    print("coefficients", " ".join(f"{c:.4e}" for c in fit.c))
    print(f"train R2 {fit.r2:.4f}  holdout train R2 {rep.train_r2:.4f}  test R2 {rep.test_r2:.4f}")
    if args.out:
        fit.save(args.out)


if __name__ == "__main__":
    main()

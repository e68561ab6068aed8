"""Rank grid configurations for an ogbn-products sized workload."""

import argparse

from plexuskit import perf_model as pm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gpus", type=int, default=64)
    ap.add_argument("--top", type=int, default=10)
    args = ap.parse_args()
    stats = pm.DatasetStats(2_449_029, 126_167_053, [100, 128, 128, 47])
    ranked = pm.rank_configs(args.gpus, stats, pm.MachineParams(), pm.PerfCoefficients())
    print(f"{'grid':>10} {'spmm_s':>10} {'comm_s':>10} {'total_s':>10}")
    for p in ranked[:args.top]:
        print(f"{','.join(map(str, p.config)):>10} {p.spmm:10.3f} {p.comm_total:10.3f} {p.total:10.3f}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Mean Flock rounds to convergence against n, with CI-driven trial counts.

Writes a CSV with n, trials, mean_k, ci_halfwidth and prints k(n_max)/k(n_min).
"""
import argparse

from fogmq.flock import FlockConfig
from fogmq.latency import RegularizationParams
from fogmq.simgen import convergence_campaign, ensure_parent, write_convergence_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", default="8,16,32,64")
    ap.add_argument("--m", type=int, default=37)
    ap.add_argument("--a", type=float, default=9.0)
    ap.add_argument("--eta", type=float, default=0.9)
    ap.add_argument("--rel-error", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="results/convergence.csv")
    args = ap.parse_args()
    ns = [int(v) for v in args.n.split(",")]
    cfg = FlockConfig(params=RegularizationParams(args.a), eta=args.eta)
    res = convergence_campaign(ns, args.m, cfg, target_rel_error=args.rel_error, master_seed=args.seed)
    write_convergence_csv(res, ensure_parent(args.out))
    for row in res.rows():
        print(f"n={row['n']:>4}  trials={row['trials']:>4}  k={row['mean_k']:.2f} +- {row['ci_halfwidth']:.2f}")
    print(f"k({ns[-1]})/k({ns[0]}) = {res.summary[ns[-1]][1] / res.summary[ns[0]][1]:.2f}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Loopback broker scenarios: forced migrations under traffic, then
co-location of a split chatty pair over many seeds. Prints JSON."""
import argparse
import asyncio
import json

from fogmq.broker.scenarios import colocation_trial, transparency_scenario


async def run(args) -> dict:
    t = await transparency_scenario(args.servers, args.devices, args.migrations, seed=args.seed)
    out = {"transparency": {**t.audit.to_dict(), "migrations": [m.status for m in t.migrations],
                            "uniqueness_samples": t.uniqueness_samples,
                            "uniqueness_violations": t.uniqueness_violations,
                            "elapsed_s": round(t.elapsed_s, 2)}}
    runs = [await colocation_trial(s, link_ms=args.link_ms, max_ticks=args.max_ticks)
            for s in range(args.seed, args.seed + args.colocation_runs)]
    out["colocation"] = {"runs": len(runs), "colocated": sum(r.colocated for r in runs),
                         "ticks": [r.ticks for r in runs], "migrations": [r.migrations for r in runs]}
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--servers", type=int, default=3)
    ap.add_argument("--devices", type=int, default=20)
    ap.add_argument("--migrations", type=int, default=10)
    ap.add_argument("--colocation-runs", type=int, default=20)
    ap.add_argument("--link-ms", type=float, default=20.0)
    ap.add_argument("--max-ticks", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    print(json.dumps(asyncio.run(run(ap.parse_args())), indent=2))


if __name__ == "__main__":
    main()

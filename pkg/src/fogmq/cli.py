"""``fogmq`` command line.

Exit codes: 0 success, 2 bad flags, 3 runtime failure, 4 a checked
threshold was violated.
"""
from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import math
import os
import signal
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 2, 3, 4

log = logging.getLogger("fogmq")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if not 0 < lo <= hi:
        raise argparse.ArgumentTypeError("need 0 < lo <= hi")
    return lo, hi


def _graph(text: str) -> float:
    kind, _, p = text.partition(":")
    try:
        p = float(p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected binomial:p, got {text!r}") from None
    if kind != "binomial" or not 0 <= p <= 1:
        raise argparse.ArgumentTypeError(f"expected binomial:p with p in [0, 1], got {text!r}")
    return p


# -- simulate / poa / check-smoothness -------------------------------------------

def cmd_simulate(args) -> int:
    from .flock import FlockConfig, Mode
    from .latency import RegularizationParams
    from .simgen import convergence_campaign, ensure_parent, write_convergence_csv

    if args.m < 1 or any(n < 0 for n in args.n):
        raise UsageError("--n values must be >= 0 and --m >= 1")
    try:
        cfg = FlockConfig(params=RegularizationParams(args.a), eta=args.eta, mode=Mode(args.mode),
                          max_rounds=args.max_rounds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = convergence_campaign(args.n, args.m, cfg, target_rel_error=args.rel_error,
                               master_seed=args.seed, max_trials=args.trials)
    write_convergence_csv(res, ensure_parent(args.out))
    for row in res.rows():
        print(f"n={row['n']:<4} trials={row['trials']:<5} mean_k={row['mean_k']:.3f} "
              f"ci_halfwidth={row['ci_halfwidth']:.3f}")
    stuck = sum(not r.converged for r in res.records)
    if stuck:
        print(f"{stuck} trial(s) hit --max-rounds without converging", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_poa(args) -> int:
    from .oracle import CSV_HEADER
    from .simgen import ensure_parent, poa_campaign, write_poa_csv

    if not all(0 < e <= 1 for e in args.eta_list) or args.trials < 1 or args.a <= 0:
        raise UsageError("need eta in (0, 1], --trials >= 1 and --a > 0")
    records = [] if args.records else None
    rows = poa_campaign(args.eta_list, args.trials, n=args.n, m=args.m, a=args.a, master_seed=args.seed,
                        initials_per_instance=args.initials, records=records)
    write_poa_csv(rows, ensure_parent(args.out))
    if records is not None:
        with open(ensure_parent(args.records), "w", newline="") as fh:
            cols = CSV_HEADER.split(",")
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in records:
                w.writerow({k: r[k] for k in cols})
    worst = 0.0
    for r in rows:
        print(f"eta={r.eta:g} trials={r.trials} max_poa={r.max_poa:.4f} mean_poa={r.mean_poa:.4f} "
              f"min_poa={r.min_poa:.4f} converged={r.converged}")
        worst = max(worst, r.max_poa)
    if args.max_poa is not None and worst > args.max_poa:
        print(f"max PoA {worst:.4f} exceeds threshold {args.max_poa}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_check_smoothness(args) -> int:
    from .latency import RegularizationParams, check_smoothness, find_smoothness_pair

    if args.grid_max <= 0 or args.step <= 0:
        raise UsageError("--grid-max and --step must be positive")
    if (args.lam is None) != (args.eps is None):
        raise UsageError("give both --lambda and --eps, or neither to search")
    grid = np.arange(1, int(round(args.grid_max / args.step)) + 1) * args.step
    params = RegularizationParams(args.a)
    if args.lam is None:
        res = find_smoothness_pair(params, grid)
    else:
        try:
            res = check_smoothness(params, args.lam, args.eps, grid)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    print(json.dumps({"passed": bool(res.passed), "lambda": res.lam, "eps": res.eps, "bound": res.bound,
                      "worst_w": res.worst[0], "worst_w_star": res.worst[1],
                      "worst_margin": res.worst_margin}))
    if not res.passed or (args.max_bound is not None and res.bound > args.max_bound):
        return EXIT_THRESHOLD
    return EXIT_OK


# -- broker / device-sim ---------------------------------------------------------

async def _run_broker(config) -> None:
    from .broker.server import FogMQServer

    server = await FogMQServer(config).start()
    print(json.dumps({"server_id": server.id, "endpoint": server.endpoint}), flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    try:
        await stop.wait()
    finally:
        await server.stop()


def cmd_broker(args) -> int:
    from .broker.server import ServerConfig

    try:
        config = ServerConfig.load(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    asyncio.run(_run_broker(config))
    return EXIT_OK


def peer_graph(n: int, p: float, rng: np.random.Generator) -> dict[int, list[int]]:
    peers = {i: [] for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                peers[i].append(j)
                peers[j].append(i)
    return peers


async def _device_sim(args) -> dict:
    from .broker.device import DeviceEmulator, audit_delivery
    from .broker.registry import RemoteRegistry

    rng = np.random.default_rng(args.seed)
    graph = peer_graph(args.devices, args.graph, rng)
    lo, hi = args.rate_range
    names = [f"{args.prefix}{i}" for i in range(args.devices)]
    servers = args.servers or [args.registry]
    registry = RemoteRegistry(args.registry)
    devices = []
    try:
        for i, name in enumerate(names):
            rate = 1.0 / rng.uniform(lo, hi)
            d = await DeviceEmulator(name, [names[j] for j in graph[i]], rate=rate,
                                     seed=int(rng.integers(2**31))).start()
            devices.append(d)
        for i, d in enumerate(devices):
            await d.register(servers[i % len(servers)])
        await asyncio.sleep(args.settle)
        for d in devices:
            d.start_publishing()
        await asyncio.sleep(args.duration)
        for d in devices:
            await d.stop_publishing()
        await asyncio.sleep(args.settle)
        history = await registry.get_history()
        windows: dict[str, list] = {}
        for h in history:
            if h["event"] == "switch":
                windows.setdefault(h["device_id"], []).append((h["t"] - args.cutover_margin,
                                                               h["t"] + args.cutover_margin))
        rep = audit_delivery(devices, windows)
        out = rep.to_dict()
        out["migrations"] = sum(len(v) for v in windows.values())
        out["published"] = sum(len(d.published) for d in devices)
        return out
    finally:
        for d in devices:
            try:
                await d.deregister(registry)
            except Exception as exc:
                log.debug("deregister %s failed: %s", d.device_id, exc)
            await d.stop()
        await registry.close()


def cmd_device_sim(args) -> int:
    if args.devices < 1 or args.duration <= 0:
        raise UsageError("--devices must be >= 1 and --duration > 0")
    out = asyncio.run(_device_sim(args))
    print(json.dumps(out))
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    return EXIT_OK if out["ok"] else EXIT_THRESHOLD


# -- report ----------------------------------------------------------------------

def _read_csv(path: str) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return list(r.fieldnames or []), list(r)


def cmd_report(args) -> int:
    from .simgen import ensure_parent

    out_rows = []
    lines = []
    for path in args.inputs:
        try:
            cols, rows = _read_csv(path)
        except FileNotFoundError:
            raise UsageError(f"no such file: {path}") from None
        name = Path(path).name
        if {"n", "mean_k"} <= set(cols):
            pts = sorted((int(r["n"]), float(r["mean_k"]), float(r["ci_halfwidth"])) for r in rows)
            base = pts[0][1] if pts else 0.0
            for n, k, hw in pts:
                ratio = k / base if base > 0 else math.nan
                out_rows.append({"source": name, "kind": "convergence", "x": n, "y": k, "err": hw, "extra": ratio})
                lines.append(f"{name}: n={n} mean_k={k:.3f} +/- {hw:.3f} (x{ratio:.2f} vs smallest n)")
            usable = [(n, k) for n, k, _ in pts if n > 0 and k > 0]
            if len(usable) >= 2:
                slope = float(np.polyfit(np.log([p[0] for p in usable]), np.log([p[1] for p in usable]), 1)[0])
                lines.append(f"{name}: log-log growth exponent of mean_k in n = {slope:.3f}")
        elif {"eta", "max_poa"} <= set(cols):
            for r in sorted(rows, key=lambda r: float(r["eta"])):
                out_rows.append({"source": name, "kind": "poa", "x": float(r["eta"]), "y": float(r["max_poa"]),
                                 "err": "", "extra": float(r["mean_poa"])})
                lines.append(f"{name}: eta={r['eta']} max_poa={float(r['max_poa']):.4f} "
                             f"mean_poa={float(r['mean_poa']):.4f}")
        else:
            raise UsageError(f"{path}: not a convergence or poa CSV (columns {cols})")
    with open(ensure_parent(args.out), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "kind", "x", "y", "err", "extra"])
        w.writeheader()
        w.writerows(out_rows)
    print("\n".join(lines))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fogmq", description="Clone placement simulation, oracles and a runnable broker.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="convergence campaign, writes convergence.csv")
    s.add_argument("--n", type=_int_list, required=True, help="comma-separated clone counts")
    s.add_argument("--m", type=int, required=True, help="number of clouds")
    s.add_argument("--eta", type=float, default=0.9)
    s.add_argument("--a", type=float, default=9.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=["sequential", "parallel"], default="sequential")
    s.add_argument("--trials", type=int, default=1000, help="trial cap per n")
    s.add_argument("--rel-error", type=float, default=0.1, help="target CI half-width relative to the mean")
    s.add_argument("--max-rounds", type=int, default=10_000)
    s.add_argument("--out", default="convergence.csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("poa", help="PoA campaign against the brute-force optimum, writes poa.csv")
    s.add_argument("--eta-list", type=_float_list, default=[0.5, 0.7, 0.9, 0.99])
    s.add_argument("--trials", type=int, default=300, help="instances per eta")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--m", type=int, default=5)
    s.add_argument("--a", type=float, default=9.0)
    s.add_argument("--initials", type=int, default=1, help="initial placements per instance")
    s.add_argument("--max-poa", type=float, default=None, help="exit 4 if any eta exceeds this")
    s.add_argument("--records", default=None, help="also write per-run rows to this CSV")
    s.add_argument("--out", default="poa.csv")
    s.set_defaults(func=cmd_poa)

    s = sub.add_parser("check-smoothness", help="check or search (lambda, eps) on a grid")
    s.add_argument("--a", type=float, default=9.0)
    s.add_argument("--grid-max", type=float, default=100.0)
    s.add_argument("--step", type=float, default=0.1)
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--max-bound", type=float, default=None, help="exit 4 if lambda/(1-eps) exceeds this")
    s.set_defaults(func=cmd_check_smoothness)

    s = sub.add_parser("broker", help="run one server until SIGINT/SIGTERM")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_broker)

    s = sub.add_parser("device-sim", help="emulate Poisson-publishing devices and audit delivery")
    s.add_argument("--registry", required=True, help="host:port of the server hosting the registry")
    s.add_argument("--devices", type=int, default=10)
    s.add_argument("--graph", type=_graph, default=0.3, help="binomial:p peer graph")
    s.add_argument("--rate-range", type=_range, default=(1.0, 30.0),
                   help="lo:hi seconds; each device's mean inter-arrival is uniform in it")
    s.add_argument("--duration", type=float, default=60.0, help="publishing time in seconds")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--servers", type=lambda t: [x for x in t.split(",") if x], default=None,
                   help="servers to register devices at, round-robin (default: the registry host)")
    s.add_argument("--prefix", default="dev", help="device id prefix")
    s.add_argument("--settle", type=float, default=1.0, help="seconds to wait before and after publishing")
    s.add_argument("--cutover-margin", type=float, default=1.0,
                   help="seconds around each registry switch in which gaps are excused")
    s.add_argument("--out", default=None, help="write the audit JSON here")
    s.set_defaults(func=cmd_device_sim)

    s = sub.add_parser("report", help="summarize campaign CSVs into a plot-ready table")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out", default="summary.csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FOGMQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fogmq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # surface as a runtime failure, not a traceback
        log.debug("command failed", exc_info=True)
        print(f"fogmq {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

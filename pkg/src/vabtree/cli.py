"""Command line interface.

``vabtree bench`` runs the throughput harness and writes CSV to stdout or a
file. ``vabtree verify`` runs the correctness tooling: ``invariants``
stresses a map and checks its quiescent structure, ``lincheck`` records
small concurrent histories and checks each for linearizability, ``races``
drives the scripted interleavings. Verification subcommands exit nonzero on
any failure so they can anchor scripts and CI jobs.
"""

import argparse
import sys

from . import bench
from .tree import ABTreeMap
from .verify import (check_invariants, check_linearizable, record_history,
                     run_race_scenarios)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vabtree",
        description="Concurrent ordered map: benchmark and verification tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run the throughput benchmark")
    b.add_argument("--threads", type=int, default=80)
    b.add_argument("--scan-threads", type=int, default=None,
                   help="threads doing range scans (default: preset or 0)")
    b.add_argument("--duration", type=float, default=10.0,
                   help="seconds per repetition")
    b.add_argument("--key-range", type=int, default=100_000)
    b.add_argument("--insert", type=float, default=0.0,
                   help="insert percentage for point-op threads")
    b.add_argument("--delete", type=float, default=0.0,
                   help="delete percentage for point-op threads")
    b.add_argument("--scan-span", type=int, default=1000,
                   help="keys covered by each range scan")
    b.add_argument("--a", type=int, default=2, dest="min_node",
                   help="minimum node size")
    b.add_argument("--b", type=int, default=256, dest="max_node",
                   help="maximum node size")
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--preset", choices=sorted(bench.PRESETS),
                   help="named workload shape; overrides the mix flags")
    b.add_argument("--baseline", action="store_true",
                   help="run the coarse-lock reference map instead")
    b.add_argument("--out", help="write CSV here instead of stdout")

    v = sub.add_parser("verify", help="run correctness checks")
    vsub = v.add_subparsers(dest="check", required=True)

    vi = vsub.add_parser("invariants",
                         help="stress a map, then audit its structure")
    vi.add_argument("--threads", type=int, default=8)
    vi.add_argument("--ops", type=int, default=20_000,
                    help="operations per thread")
    vi.add_argument("--key-range", type=int, default=512)
    vi.add_argument("--a", type=int, default=2, dest="min_node")
    vi.add_argument("--b", type=int, default=8, dest="max_node")
    vi.add_argument("--seed", type=int, default=1)

    vl = vsub.add_parser("lincheck",
                         help="record small histories and check each one")
    vl.add_argument("--histories", type=int, default=50)
    vl.add_argument("--threads", type=int, default=3)
    vl.add_argument("--ops", type=int, default=6, help="operations per thread")
    vl.add_argument("--seed", type=int, default=1)

    vr = vsub.add_parser("races", help="run the scripted race scenarios")
    vr.add_argument("--schedules", type=int, default=24)
    return parser


def cmd_bench(args) -> int:
    kwargs = dict(threads=args.threads, scan_threads=args.scan_threads,
                  duration_s=args.duration, key_range=args.key_range,
                  insert_pct=args.insert, delete_pct=args.delete,
                  scan_span=args.scan_span, min_node_size=args.min_node,
                  max_node_size=args.max_node, seed=args.seed,
                  reps=args.reps, baseline=args.baseline)
    try:
        if args.preset:
            spec = bench.WorkloadSpec.from_preset(args.preset, **kwargs)
        else:
            if kwargs["scan_threads"] is None:
                kwargs["scan_threads"] = 0
            spec = bench.WorkloadSpec(**kwargs)
    except ValueError as e:
        print("invalid workload: %s" % e, file=sys.stderr)
        return 2
    reports = bench.run_experiment(spec)
    if args.out:
        try:
            with open(args.out, "w", newline="") as f:
                bench.emit_report(reports, f)
        except OSError as e:
            print("cannot write %s: %s" % (args.out, e), file=sys.stderr)
            return 2
    else:
        bench.emit_report(reports)
    return 0


def cmd_invariants(args) -> int:
    import random
    import threading

    tree = ABTreeMap(args.min_node, args.max_node, track_nodes=True)

    def worker(tid: int) -> None:
        rng = random.Random("%s:%s" % (args.seed, tid))
        for _ in range(args.ops):
            key = rng.randint(1, args.key_range)
            r = rng.random()
            if r < 0.4:
                tree.insert(key, key)
            elif r < 0.7:
                tree.delete(key)
            elif r < 0.9:
                tree.find(key)
            else:
                tree.scan(key, min(args.key_range, key + 10))

    threads = [threading.Thread(target=worker, args=(t,))
               for t in range(args.threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    report = check_invariants(tree)
    for line in report.violations:
        print("violation: %s" % line)
    print("stats: %s" % report.stats)
    print("invariants: %s" % ("OK" if report.ok else "FAILED"))
    return 0 if report.ok else 1


def cmd_lincheck(args) -> int:
    for n in range(args.histories):
        history = record_history(threads=args.threads,
                                 ops_per_thread=args.ops,
                                 seed=(args.seed, n))
        ok, info = check_linearizable(history)
        if not ok:
            print("history %d NOT linearizable: %s" % (n, info))
            for op in sorted(history, key=lambda o: o.invoke):
                print("  %s  [%d, %d]" % (op.describe(), op.invoke, op.ret))
            return 1
    print("%d histories linearizable" % args.histories)
    return 0


def cmd_races(args) -> int:
    failures = run_race_scenarios(args.schedules)
    for line in failures:
        print("failure: %s" % line)
    print("race scenarios: %s" % ("OK" if not failures else "FAILED"))
    return 0 if not failures else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        return cmd_bench(args)
    if args.check == "invariants":
        return cmd_invariants(args)
    if args.check == "lincheck":
        return cmd_lincheck(args)
    return cmd_races(args)


if __name__ == "__main__":
    sys.exit(main())

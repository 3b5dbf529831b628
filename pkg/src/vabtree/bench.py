"""Throughput benchmark harness.

A workload runs ``threads`` worker threads against one shared map for a
fixed duration: the first ``scan_threads`` of them issue range scans of
``scan_span`` keys, the rest issue point operations drawn from the
insert/delete/find percentages. Keys are uniform over [1, key_range] and
the map is preseeded with a random half of the key space so updates hit a
roughly steady-state population. Each repetition reports its own counters;
the CSV includes a trailing mean row.
"""

import csv
import random
import sys
import threading
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

from .baseline import GlobalLockSortedMap
from .tree import ABTreeMap

CSV_COLUMNS = ("rep", "threads", "scan_threads", "duration_s", "inserts",
               "deletes", "finds", "scans", "scan_keys_collected",
               "update_ops_per_s", "scan_keys_per_s")

# named workload shapes; percentages apply to the non-scanning threads
PRESETS: Dict[str, dict] = {
    "a": dict(scan_fraction=1.0, insert_pct=0, delete_pct=0),
    "b": dict(scan_fraction=0.5, insert_pct=50, delete_pct=50),
    "c": dict(scan_fraction=0.0, insert_pct=0, delete_pct=0),
    "d": dict(scan_fraction=0.0, insert_pct=80, delete_pct=20),
    "e": dict(scan_fraction=0.0, insert_pct=100, delete_pct=0),
    "f": dict(scan_fraction=0.0, insert_pct=9, delete_pct=1),
}


@dataclass
class WorkloadSpec:
    """Benchmark parameters; ``find`` gets whatever percentage remains."""

    threads: int = 80
    scan_threads: int = 0
    duration_s: float = 10.0
    key_range: int = 100_000
    insert_pct: float = 0.0
    delete_pct: float = 0.0
    scan_span: int = 1000
    min_node_size: int = 2
    max_node_size: int = 256
    seed: int = 1
    reps: int = 10
    baseline: bool = False

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if not 0 <= self.scan_threads <= self.threads:
            raise ValueError("scan_threads must be within [0, threads]")
        if self.insert_pct < 0 or self.delete_pct < 0 \
                or self.insert_pct + self.delete_pct > 100:
            raise ValueError("insert and delete percentages must be "
                             "non-negative and sum to at most 100")
        if self.key_range < 2:
            raise ValueError("key_range must be at least 2")
        if not 1 <= self.scan_span <= self.key_range:
            raise ValueError("scan_span must be within [1, key_range]")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.reps < 1:
            raise ValueError("reps must be positive")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "WorkloadSpec":
        shape = PRESETS[name]
        spec = cls(**{k: v for k, v in overrides.items()
                      if k not in ("scan_threads",) and v is not None})
        scan_threads = overrides.get("scan_threads")
        if scan_threads is None:
            scan_threads = round(spec.threads * shape["scan_fraction"])
        return replace(spec, scan_threads=scan_threads,
                       insert_pct=shape["insert_pct"],
                       delete_pct=shape["delete_pct"])


@dataclass
class RunReport:
    """Counters for one repetition, plus the derived rates."""

    rep: int
    threads: int
    scan_threads: int
    duration_s: float
    inserts: int = 0
    deletes: int = 0
    finds: int = 0
    scans: int = 0
    scan_keys_collected: int = 0

    @property
    def update_ops_per_s(self) -> float:
        return (self.inserts + self.deletes + self.finds) / self.duration_s

    @property
    def scan_keys_per_s(self) -> float:
        return self.scan_keys_collected / self.duration_s

    def row(self) -> list:
        return [self.rep, self.threads, self.scan_threads,
                round(self.duration_s, 6), self.inserts, self.deletes,
                self.finds, self.scans, self.scan_keys_collected,
                round(self.update_ops_per_s, 3), round(self.scan_keys_per_s, 3)]


def make_structure(spec: WorkloadSpec):
    if spec.baseline:
        return GlobalLockSortedMap()
    return ABTreeMap(spec.min_node_size, spec.max_node_size)


def seed_structure(structure, spec: WorkloadSpec, rep: int) -> None:
    """Insert a deterministic random half of the key space."""
    rng = random.Random("%s:%s:seed" % (spec.seed, rep))
    for key in rng.sample(range(1, spec.key_range + 1), spec.key_range // 2):
        structure.insert(key, key)


def _update_worker(structure, spec, rep, tid, stop, counters) -> None:
    rng = random.Random("%s:%s:%s" % (spec.seed, rep, tid))
    ins_cut = spec.insert_pct / 100.0
    del_cut = ins_cut + spec.delete_pct / 100.0
    key_range = spec.key_range
    inserts = deletes = finds = 0
    while not stop.is_set():
        key = rng.randint(1, key_range)
        r = rng.random()
        if r < ins_cut:
            structure.insert(key, key)
            inserts += 1
        elif r < del_cut:
            structure.delete(key)
            deletes += 1
        else:
            structure.find(key)
            finds += 1
    counters[tid] = dict(inserts=inserts, deletes=deletes, finds=finds)


def _scan_worker(structure, spec, rep, tid, stop, counters) -> None:
    rng = random.Random("%s:%s:%s" % (spec.seed, rep, tid))
    span = spec.scan_span
    top = spec.key_range - span + 1
    scans = keys = 0
    while not stop.is_set():
        low = rng.randint(1, top)
        keys += len(structure.scan(low, low + span - 1))
        scans += 1
    counters[tid] = dict(scans=scans, scan_keys_collected=keys)


def run_repetition(spec: WorkloadSpec, rep: int) -> RunReport:
    structure = make_structure(spec)
    seed_structure(structure, spec, rep)
    stop = threading.Event()
    barrier = threading.Barrier(spec.threads + 1)
    counters: List[Optional[dict]] = [None] * spec.threads

    def with_barrier(worker, tid):
        def run():
            barrier.wait()
            worker(structure, spec, rep, tid, stop, counters)
        return run

    workers = []
    for tid in range(spec.threads):
        body = _scan_worker if tid < spec.scan_threads else _update_worker
        workers.append(threading.Thread(target=with_barrier(body, tid),
                                        daemon=True))
    for w in workers:
        w.start()
    barrier.wait()
    start = time.monotonic()
    time.sleep(spec.duration_s)
    stop.set()
    elapsed = time.monotonic() - start
    for w in workers:
        w.join()

    report = RunReport(rep=rep, threads=spec.threads,
                       scan_threads=spec.scan_threads, duration_s=elapsed)
    for c in counters:
        for name, n in (c or {}).items():
            setattr(report, name, getattr(report, name) + n)
    return report


def run_experiment(spec: WorkloadSpec) -> List[RunReport]:
    return [run_repetition(spec, rep) for rep in range(1, spec.reps + 1)]


def emit_report(reports: List[RunReport], out=None) -> None:
    """Write the CSV (one row per repetition plus a mean row) to ``out``."""
    writer = csv.writer(out if out is not None else sys.stdout)
    writer.writerow(CSV_COLUMNS)
    rows = [r.row() for r in reports]
    for row in rows:
        writer.writerow(row)
    mean = ["mean"]
    for col in range(1, len(CSV_COLUMNS)):
        vals = [row[col] for row in rows]
        mean.append(round(sum(vals) / len(vals), 3))
    writer.writerow(mean)

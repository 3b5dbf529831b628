"""Verification tools: sequential oracle, invariant checker, linearizability
checker, and scripted race scenarios.

The invariant checker and the iteration helpers assume a quiescent structure
(no operation in flight). The linearizability checker works on small
recorded histories and is exhaustive, so it proves or refutes; the race
scenarios use the instrumentation pause sites to force the specific
interleavings the helping protocols exist for, which random stress is
unlikely to hit.
"""

import gc
import sys
import threading
import time
from bisect import bisect_left, bisect_right, insort
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from random import Random
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import instrument
from .core import EMPTY
from .rebalance import clean_obsolete_keys
from .tree import ABTreeMap


class SequentialModel:
    """Reference map semantics; what every operation must return in isolation.

    A dict plus a sorted key list, so scan is a slice instead of a full
    sort (the oracle must keep up with millions of randomized operations).
    """

    def __init__(self) -> None:
        self.data: Dict[Any, Any] = {}
        self._sorted: List[Any] = []

    def find(self, key):
        return self.data.get(key)

    def insert(self, key, value):
        existing = self.data.get(key)
        if existing is not None:
            return existing
        self.data[key] = value
        insort(self._sorted, key)
        return None

    def delete(self, key):
        value = self.data.pop(key, None)
        if value is not None:
            del self._sorted[bisect_left(self._sorted, key)]
        return value

    def scan(self, low, high):
        i = bisect_left(self._sorted, low)
        j = bisect_right(self._sorted, high)
        return [self.data[k] for k in self._sorted[i:j]]

    def items(self):
        return [(k, self.data[k]) for k in self._sorted]


def apply_op(target, op: str, args: tuple):
    if op == "insert":
        return target.insert(*args)
    if op == "delete":
        return target.delete(*args)
    if op == "find":
        return target.find(*args)
    if op == "scan":
        return target.scan(*args)
    raise ValueError("unknown operation %r" % op)


# ---------------------------------------------------------------------------
# structural invariants


@dataclass
class InvariantReport:
    violations: List[str] = field(default_factory=list)
    stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_invariants(tree: ABTreeMap) -> InvariantReport:
    """Validate the quiescent structure; returns violations plus statistics.

    Checked: node shape (size bounds, array consistency, sorted router
    keys), key-range containment along every path, uniform leaf depth
    (tagged routers count as zero height), key uniqueness, leaf-list
    connectivity and ordering, reachable nodes unmarked (and, when the tree
    tracks nodes, unmarked nodes reachable, unlinked leaves' links frozen,
    and no unlinked leaf chaining into its replacements), and per-cell
    version history monotonicity. Underfull or tagged nodes are legal
    relaxed states and are reported in stats, not as violations.
    """
    rep = InvariantReport()
    bad = rep.violations.append
    a, b = tree.min_node_size, tree.max_node_size
    root = tree.entry.children[0]

    reachable = set()
    leaves_in_tree = []
    tagged_count = 0
    underfull = 0
    live_count = 0
    # (node, low, high, logical depth); bounds are half-open [low, high)
    stack = [(root, None, None, 0)]
    while stack:
        node, low, high, depth = stack.pop()
        if id(node) in reachable:
            bad("node %r reachable twice" % node)
            continue
        reachable.add(id(node))
        if node.marked:
            bad("reachable node is marked: %r" % node)
        if node.is_leaf:
            leaves_in_tree.append((node, low, high, depth))
            live = sum(1 for k in node.keys if k is not EMPTY)
            if live != node.size:
                bad("leaf size %d != occupied slots %d in %r"
                    % (node.size, live, node))
            if node.size > b:
                bad("leaf over capacity: %r" % node)
            if node is not root and node.size < a:
                underfull += 1
            for i, k in enumerate(node.keys):
                cell = node.values[i]
                if k is EMPTY:
                    if cell is not None:
                        bad("vacant slot %d of %r holds a cell" % (i, node))
                    continue
                if low is not None and k < low:
                    bad("key %r below range of %r" % (k, node))
                if high is not None and k >= high:
                    bad("key %r above range of %r" % (k, node))
                if cell is None:
                    bad("occupied slot %d of %r has no cell" % (i, node))
                    continue
                if cell.key != k:
                    bad("cell key %r != slot key %r in %r" % (cell.key, k, node))
                if cell.latest_value is not None:
                    live_count += 1
                hv = cell.hist_versions
                if any(hv[j] >= hv[j + 1] for j in range(len(hv) - 1)):
                    bad("history versions not increasing for key %r" % k)
                if cell.latest_version == 0:
                    bad("pending version stamp at quiescence for key %r" % k)
                elif hv and hv[-1] > cell.latest_version:
                    bad("archived version above latest for key %r" % k)
            continue
        # internal node
        if node.size != len(node.children) or node.size != len(node.keys) + 1:
            bad("router arrays inconsistent: %r" % node)
        if node.size > b:
            bad("router over capacity: %r" % node)
        if node.tagged:
            tagged_count += 1
            if node.size != 2:
                bad("tagged router without exactly two children: %r" % node)
        elif node is not root and node.size < a:
            underfull += 1
        if node is root and node.size < 2:
            bad("root router with a single child")
        ks = node.keys
        for j in range(len(ks) - 1):
            if ks[j] >= ks[j + 1]:
                bad("router keys not strictly increasing: %r" % node)
        for j, k in enumerate(ks):
            if low is not None and k < low:
                bad("router key %r below range of %r" % (k, node))
            if high is not None and k >= high:
                bad("router key %r above range of %r" % (k, node))
        child_depth = depth if node.tagged else depth + 1
        for j, child in enumerate(node.children):
            c_low = ks[j - 1] if j > 0 else low
            c_high = ks[j] if j < len(ks) else high
            stack.append((child, c_low, c_high, child_depth))

    depths = {d for (_, _, _, d) in leaves_in_tree}
    if len(depths) > 1:
        bad("leaves at unequal logical depths: %r" % sorted(depths))

    counts = Counter()
    for leaf, _, _, _ in leaves_in_tree:
        for k in leaf.keys:
            if k is not EMPTY:
                counts[k] += 1
    for k, n in counts.items():
        if n > 1:
            bad("key %r present in %d slots" % (k, n))

    # leaf list: walk right from the leftmost tree leaf
    node = root
    while not node.is_leaf:
        node = node.children[0]
    listed = []
    seen = set()
    while node is not None:
        if id(node) in seen:
            bad("leaf list cycles at %r" % node)
            break
        seen.add(id(node))
        listed.append(node)
        nxt = node.right
        if nxt is not None and nxt.left is not node:
            bad("list link asymmetry between %r and %r" % (node, nxt))
        node = nxt
    tree_leaf_ids = {id(l) for (l, _, _, _) in leaves_in_tree}
    if {id(l) for l in listed} != tree_leaf_ids:
        bad("leaf list does not cover exactly the tree's leaves")
    if listed and listed[0].left is not None:
        bad("leftmost leaf has a left link")
    prev_max = None
    for leaf in listed:
        ks = [k for k in leaf.keys if k is not EMPTY]
        if not ks:
            continue
        if prev_max is not None and min(ks) <= prev_max:
            bad("leaf list keys not increasing across %r" % leaf)
        prev_max = max(ks)

    registry = tree._registry
    if registry is not None:
        gc.collect()
        for n in list(registry):
            if n is tree.entry:
                continue
            if not n.marked and id(n) not in reachable and id(n) not in seen:
                bad("unmarked node unreachable: %r" % n)
            if n.marked and n.is_leaf and n.frozen_links is not None:
                if (n.left, n.right) != n.frozen_links:
                    bad("unlinked leaf's links changed: %r" % n)
                walker, hops = n.right, 0
                replaced_by = set(map(id, n.replaced_by or ()))
                while walker is not None and hops < len(seen) + len(registry):
                    if id(walker) in replaced_by:
                        bad("unlinked leaf %r chains into its replacement" % n)
                        break
                    walker = walker.right
                    hops += 1

    rep.stats.update(
        leaves=len(leaves_in_tree), tagged_nodes=tagged_count,
        underfull_nodes=underfull, keys=sum(counts.values()),
        depth=max(depths) if depths else 0, live_keys=live_count)
    return rep


# ---------------------------------------------------------------------------
# histories and linearizability


@dataclass
class Operation:
    thread: int
    op: str
    args: tuple
    result: Any
    invoke: int
    ret: int

    def describe(self) -> str:
        return "T%d %s%r -> %r" % (self.thread, self.op, self.args, self.result)


def record_history(structure=None, threads: int = 3, ops_per_thread: int = 6,
                   key_range: Tuple[int, int] = (1, 4), seed: int = 0,
                   mix=(0.3, 0.25, 0.25, 0.2)) -> List[Operation]:
    """Run a small concurrent workload and record a timestamped history.

    ``mix`` gives insert/delete/find/scan weights. Values are unique per
    operation so the checker can tell every write apart. The switch interval
    is lowered for the duration to widen the interleavings a single core
    produces.
    """
    tree = structure if structure is not None else ABTreeMap(2, 4)
    lo_key, hi_key = key_range
    ops: List[List[Operation]] = [[] for _ in range(threads)]
    barrier = threading.Barrier(threads)

    def worker(tid: int) -> None:
        rng = Random("%s:%s" % (seed, tid))
        recorded = ops[tid]
        barrier.wait()
        for i in range(ops_per_thread):
            r = rng.random()
            key = rng.randint(lo_key, hi_key)
            if r < mix[0]:
                name, args = "insert", (key, tid * 1000 + i)
            elif r < mix[0] + mix[1]:
                name, args = "delete", (key,)
            elif r < mix[0] + mix[1] + mix[2]:
                name, args = "find", (key,)
            else:
                other = rng.randint(lo_key, hi_key)
                name, args = "scan", (min(key, other), max(key, other))
            t0 = time.monotonic_ns()
            result = apply_op(tree, name, args)
            t1 = time.monotonic_ns()
            if name == "scan":
                result = tuple(result)
            recorded.append(Operation(tid, name, args, result, t0, t1))

    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(1e-5)
    try:
        workers = [threading.Thread(target=worker, args=(t,)) for t in range(threads)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
    finally:
        sys.setswitchinterval(old_interval)
    return [o for per_thread in ops for o in per_thread]


def check_linearizable(history: List[Operation],
                       max_ops: int = 40) -> Tuple[bool, Any]:
    """Exhaustively search for a legal sequential order of ``history``.

    Implements the classic permutation search: repeatedly pick a minimal
    operation (one no unscheduled operation returned before), apply it to
    the reference model, and backtrack on result mismatch. Memoizes on
    (per-thread progress, model state). Returns (True, witness order) or
    (False, explanation). Histories above ``max_ops`` are rejected up front
    (the search is worst-case exponential).
    """
    if len(history) > max_ops:
        raise ValueError("history of %d ops exceeds the %d-op bound"
                         % (len(history), max_ops))
    per_thread: Dict[int, List[Operation]] = defaultdict(list)
    for o in sorted(history, key=lambda o: o.invoke):
        per_thread[o.thread].append(o)
    seqs = list(per_thread.values())
    nseq = len(seqs)
    heads = [0] * nseq
    total = len(history)
    memo = set()
    model = SequentialModel()
    witness: List[Operation] = []

    def results_match(o: Operation) -> Tuple[bool, Any]:
        if o.op == "insert":
            got = model.insert(*o.args)
            return got == o.result, ("ins", o.args[0], got)
        if o.op == "delete":
            got = model.delete(*o.args)
            return got == o.result, ("del", o.args[0], got)
        if o.op == "find":
            return model.find(*o.args) == o.result, None
        got = tuple(model.scan(*o.args))
        return got == o.result, None

    def undo(token) -> None:
        # each mutation has an exact inverse through the public interface
        if token is None:
            return
        kind, key, old = token
        if kind == "ins":
            if old is None:
                model.delete(key)
        else:
            if old is not None:
                model.insert(key, old)

    def dfs(done: int) -> bool:
        if done == total:
            return True
        state = (tuple(heads), frozenset(model.data.items()))
        if state in memo:
            return False
        # the two smallest return stamps among unscheduled ops, for the
        # minimality test with the candidate itself excluded
        m1 = m2 = None
        for ti in range(nseq):
            for o in seqs[ti][heads[ti]:]:
                r = o.ret
                if m1 is None or r < m1:
                    m1, m2 = r, m1
                elif m2 is None or r < m2:
                    m2 = r
        for ti in range(nseq):
            h = heads[ti]
            if h == len(seqs[ti]):
                continue
            o = seqs[ti][h]
            bound = m2 if o.ret == m1 else m1
            if bound is not None and bound < o.invoke:
                continue
            matched, token = results_match(o)
            if matched:
                heads[ti] = h + 1
                witness.append(o)
                if dfs(done + 1):
                    return True
                witness.pop()
                heads[ti] = h
            undo(token)
        memo.add(state)
        return False

    if dfs(0):
        return True, list(witness)
    return False, "no sequential order matches all %d results" % total


# ---------------------------------------------------------------------------
# scripted race scenarios


class _PauseController:
    """Blocks one designated thread at one pause site until released."""

    def __init__(self, site: str) -> None:
        self.site = site
        self.target: Optional[int] = None
        self.arrived = threading.Event()
        self.release = threading.Event()
        instrument.set_hook(site, self._hook)

    def _hook(self, _site: str) -> None:
        if threading.get_ident() == self.target:
            self.arrived.set()
            self.release.wait()

    def arm(self, ident: int) -> None:
        self.target = ident

    def wait_arrived(self, timeout: float = 10.0) -> None:
        if not self.arrived.wait(timeout):
            raise AssertionError("thread never reached pause site %r" % self.site)

    def resume(self) -> None:
        self.release.set()


class _OpThread(threading.Thread):
    """Runs one map operation once released, recording result or exception.

    The operation starts only after :meth:`start_armed` or :meth:`start_free`
    returns, so controllers are always armed with this thread's ident before
    the operation can reach a pause site.
    """

    def __init__(self, fn: Callable[[], Any]) -> None:
        super().__init__()
        self.fn = fn
        self.result: Any = None
        self.error: Optional[BaseException] = None
        self.go = threading.Event()

    def run(self) -> None:
        self.go.wait()
        try:
            self.result = self.fn()
        except BaseException as e:  # propagated by join_checked
            self.error = e

    def start_armed(self, *controllers: _PauseController) -> None:
        self.start()
        for c in controllers:
            c.arm(self.ident)
        self.go.set()

    def start_free(self) -> None:
        self.start()
        self.go.set()

    def join_checked(self, timeout: float = 10.0) -> Any:
        self.join(timeout)
        if self.is_alive():
            raise AssertionError("operation thread stuck")
        if self.error is not None:
            raise self.error
        return self.result


def _cell_of(tree: ABTreeMap, key):
    from .core import search
    leaf = search(tree.entry, key).node
    for i, k in enumerate(leaf.keys):
        if k == key:
            return leaf.values[i]
    return None


def race_update_vs_scan(schedule: int) -> None:
    """One update stalled between its version read and its version CAS,
    racing one scan that covers the key.

    Schedule bits select the key's prior state (fresh insert, delete of a
    live key, revival of a deleted key), how full the leaf is, and whether
    the update's stamp or the scan's help lands first. Asserts that exactly
    one stamp wins and that the scan's result equals one of the two legal
    sequential orders, as decided by the final version against the scan's.
    """
    prelude = schedule % 3
    crowded = (schedule // 3) % 2
    order = (schedule // 6) % 4
    key = 50
    tree = ABTreeMap(2, 8)
    if crowded:
        for k in (10, 20, 30, 40):
            tree.insert(k, "filler")
    if prelude == 1:
        tree.insert(key, "old")
    elif prelude == 2:
        tree.insert(key, "older")
        tree.delete(key)

    stamp_gate = _PauseController("update_stamp")
    version_gate = _PauseController("scan_version")
    walk_gate = _PauseController("scan_traverse")
    try:
        if prelude == 1:
            updater = _OpThread(lambda: tree.delete(key))
        else:
            updater = _OpThread(lambda: tree.insert(key, "new"))
        updater.start_armed(stamp_gate)
        stamp_gate.wait_arrived()

        scanner = _OpThread(lambda: tree.scan(1, 99))
        if order == 0:
            # scan runs to completion (helping the pending stamp), then the
            # update's own CAS arrives late and must lose
            scanner.start_free()
            scan_result = scanner.join_checked()
            stamp_gate.resume()
            updater.join_checked()
        elif order == 1:
            # scan announced but unversioned while the update stamps
            scanner.start_armed(version_gate)
            version_gate.wait_arrived()
            stamp_gate.resume()
            updater.join_checked()
            version_gate.resume()
            scan_result = scanner.join_checked()
        elif order == 2:
            # scan acquires its version, then the update publishes its
            # (earlier) read: update linearizes before the scan's traversal
            scanner.start_armed(walk_gate)
            walk_gate.wait_arrived()
            stamp_gate.resume()
            updater.join_checked()
            walk_gate.resume()
            scan_result = scanner.join_checked()
        else:
            # update publishes before the scan starts at all
            stamp_gate.resume()
            updater.join_checked()
            scan_result = scanner.fn()
    finally:
        instrument.clear_hooks()

    cell = _cell_of(tree, key)
    assert cell is not None, "updated key lost its slot"
    final_version = cell.latest_version
    assert final_version != 0, "no version stamp won"
    # the scan's announcement is retired by now; recover its version from the
    # global counter: the scan took exactly one fetch-and-increment and
    # nothing else bumped the counter, so it held the pre-bump value
    scan_version = tree.gv.read() - 1

    if prelude == 1:
        # delete: old value visible iff the deletion stamped after the scan
        visible = "old" in scan_result
        assert visible == (final_version > scan_version), (
            "delete@%s vs scan@%s, result %r"
            % (final_version, scan_version, scan_result))
        assert updater.result == "old"
        assert tree.find(key) is None
    else:
        visible = "new" in scan_result
        assert visible == (final_version <= scan_version), (
            "insert@%s vs scan@%s, result %r"
            % (final_version, scan_version, scan_result))
        assert updater.result is None
        assert tree.find(key) == "new"
    if crowded:
        assert "filler" in scan_result


def race_clean_vs_scan(schedule: int) -> None:
    """Compaction racing a scan that published but has no version yet.

    Compaction must stamp the pending scan before computing its removal
    gate; deletions stamped at or below the helped version are physically
    removed, later ones survive and the scan still reads their old values.
    Schedule bits vary the number of tombstones, which side's stamp wins,
    and whether compaction runs white-box or through a full-leaf insert.
    """
    tombs = 1 + schedule % 3
    scan_wins = (schedule // 3) % 2
    organic = (schedule // 6) % 2
    b = 8
    tree = ABTreeMap(2, b)
    keys = list(range(10, 10 + b))
    for k in keys:
        tree.insert(k, k * 100)
    for k in keys[:tombs]:
        tree.delete(k)

    scan_gate = _PauseController("scan_version")
    walk_gate = _PauseController("scan_traverse")
    try:
        scanner = _OpThread(lambda: tree.scan(1, 99))
        scanner.start_armed(scan_gate, walk_gate)
        scan_gate.wait_arrived()
        slot = next(s for s in tree.scans.slots if s is not None)

        if scan_wins:
            # let the scan assign its own version, hold it before traversal
            scan_gate.resume()
            walk_gate.wait_arrived()
        helped = None
        if not scan_wins:
            helped_before = tree.gv.read()
        leaf = tree.entry.children[0]
        while not leaf.is_leaf:
            leaf = leaf.children[0]
        if organic:
            # the leaf is physically full, so one more insert must compact
            tree.insert(9, 900)
        else:
            g = leaf.lock.acquire()
            try:
                clean_obsolete_keys(tree, leaf)
            finally:
                leaf.lock.release(g)
        scan_version = slot.version
        assert scan_version != 0, "compaction left the scan unstamped"
        if not scan_wins:
            assert scan_version >= helped_before, "helped stamp is stale"

        # deletions stamped before the scan published must be gone now
        remaining = set(k for k in leaf.keys if k is not EMPTY)
        for k in keys[:tombs]:
            assert k not in remaining, "tombstone %r survived its gate" % k

        # late deletions (stamped above the scan) must survive compaction
        # and stay visible to the pinned scan
        late = keys[tombs]
        tree.delete(late)
        g = leaf.lock.acquire()
        try:
            clean_obsolete_keys(tree, leaf)
        finally:
            leaf.lock.release(g)
        late_cell = _cell_of(tree, late)
        assert late_cell is not None, "late tombstone compacted too early"
        assert late_cell.latest_version > scan_version

        if scan_wins:
            walk_gate.resume()
        else:
            scan_gate.resume()   # its own CAS loses; adopts the helped stamp
            walk_gate.wait_arrived()
            walk_gate.resume()
        result = scanner.join_checked()
    finally:
        instrument.clear_hooks()

    # the organic insert of key 9 always stamps after the scan's version was
    # fixed, so the pinned scan must not see it even though find() does
    expected = [k * 100 for k in keys[tombs:]]
    assert result == expected, "pinned scan read %r, wanted %r" % (result, expected)
    if organic:
        assert tree.find(9) == 900


def run_race_scenarios(schedules: int = 24) -> List[str]:
    """Run every scripted scenario under ``schedules`` schedules; returns failures."""
    failures = []
    for name, fn in (("update_vs_scan", race_update_vs_scan),
                     ("clean_vs_scan", race_clean_vs_scan)):
        for s in range(schedules):
            try:
                fn(s)
            except Exception as e:
                failures.append("%s[%d]: %s" % (name, s, e))
    return failures

"""Concurrent multi-versioned (a,b)-tree map with atomic range scans.

Operation skeleton
------------------
find is lock-free: descend to a leaf, optimistically read the key's latest
value. insert/delete lock exactly one leaf in the common case; delete is an
insert of the logical-deletion marker, so removal never restructures the
tree. A full leaf is first compacted (dropping logically deleted keys no
ongoing scan still needs) and only split when compaction frees nothing. A
split replaces the leaf with a two-leaf subtree under a *tagged* router node
and defers rebalancing to fix_tagged; compaction that leaves a leaf too small
defers to fix_underfull. Scans are wait-free: publish bounds, acquire a
version by fetch-and-incrementing the global counter, then walk the leaf
list collecting each key's value as of that version, never locking and never
retrying.

Linearization: simple inserts/deletes take effect when their version stamp
lands (so a concurrent scan either helps the stamp or orders cleanly around
it), splitting inserts when the parent's child pointer is swung, scans when
the global counter first exceeds their version, finds at the leaf snapshot
they validated.
"""

import random
import time
import weakref
from typing import Any, Iterator, List, Optional, Tuple

from .core import (EMPTY, InternalNode, LeafNode, PathInfo, make_entry,
                   mark_replaced, search, search_leaf)
from .instrument import _hooks, pause
from .rebalance import clean_obsolete_keys, fix_tagged, fix_underfull
from .sync import begin_modify, end_modify
from .versions import (NO_ENTRY, GlobalVersion, OngoingScans, ScanData,
                       ValueCell, help_and_get_value_by_version, new_version,
                       put_new_value)

#: Internal result of insert_key when the leaf has no vacant slot.
RETRY = object()


def can_update_key_in_index(leaf: LeafNode, key, value) -> Tuple[bool, Optional[int]]:
    """Classify an update against the key's slot in ``leaf`` (caller holds lock).

    Returns (True, i) when the write is a legal state flip -- exactly one of
    {latest value deleted, incoming value is the deletion marker} holds.
    Returns (False, i) for insert-over-live or delete-of-deleted, and
    (False, None) when the key has no slot.
    """
    try:
        i = leaf.keys.index(key)
    except ValueError:
        return (False, None)
    cell = leaf.values[i]
    deleted = cell.latest_value is None
    inserting = value is not None
    return (deleted == inserting, i)


def insert_key(leaf: LeafNode, key, value, gv: GlobalVersion):
    """Install ``key`` in a vacant slot of a locked leaf.

    Opens a modification window, writes the cell and slot arrays, then stamps
    the cell with a plain global-version read (helpers may win the stamp).
    Returns the installed latest value, or RETRY when the leaf is full.
    """
    try:
        i = leaf.keys.index(EMPTY)
    except ValueError:
        return RETRY
    begin_modify(leaf)
    cell = ValueCell(key)
    cell.latest_value = value
    leaf.values[i] = cell
    leaf.keys[i] = key
    leaf.size += 1
    stamp = gv.read()
    if _hooks:
        pause("update_stamp")
    cell.cas_latest_version(0, stamp)
    end_modify(leaf)
    return cell.latest_value


def update_key_in_index(leaf: LeafNode, index: int, value, gv: GlobalVersion):
    """Flip the live/deleted state of the cell at ``index`` (caller holds lock).

    Archives the current pair, installs ``value`` with a pending stamp, then
    stamps with a plain global-version read. Returns the new latest value.
    """
    begin_modify(leaf)
    cell = leaf.values[index]
    put_new_value(cell, value, gv)
    stamp = gv.read()
    if _hooks:
        pause("update_stamp")
    cell.cas_latest_version(0, stamp)
    end_modify(leaf)
    return cell.latest_value


def create_tagged_internal_node(tree: "ABTreeMap", leaf: LeafNode, key, value,
                                parent: InternalNode, node_index: int) -> InternalNode:
    """Split a full leaf around an incoming key; returns the tagged router.

    Caller holds the leaf, its parent, and any neighbor leaves that hang
    under other parents. The leaf's pairs plus (key, value) are partitioned
    evenly (ceil-half to the right), the two fresh leaves are spliced into
    the leaf list first, and the parent's child pointer write publishes the
    whole subtree -- that write is the insert's linearization point. The old
    leaf is marked and left untouched so concurrent readers finish cleanly.
    """
    gv = tree.gv
    pairs = [(k, leaf.values[i]) for i, k in enumerate(leaf.keys) if k is not EMPTY]
    cell = ValueCell(key)
    cell.latest_value = value
    stamp = gv.read()
    if _hooks:
        pause("update_stamp")
    cell.cas_latest_version(0, stamp)
    pairs.append((key, cell))
    pairs.sort(key=lambda p: p[0])
    split = len(pairs) - (len(pairs) + 1) // 2
    sep = pairs[split][0]

    cap = tree.max_node_size
    child1 = LeafNode(cap, route_key=pairs[0][0])
    for j in range(split):
        child1.keys[j] = pairs[j][0]
        child1.values[j] = pairs[j][1]
    child1.size = split
    child2 = LeafNode(cap, route_key=sep)
    for j in range(split, len(pairs)):
        child2.keys[j - split] = pairs[j][0]
        child2.values[j - split] = pairs[j][1]
    child2.size = len(pairs) - split
    tagged = InternalNode((sep,), (child1, child2), tagged=True, route_key=sep)

    child1.left = leaf.left
    child1.right = child2
    child2.left = child1
    child2.right = leaf.right
    if leaf.right is not None:
        leaf.right.left = child2
    if leaf.left is not None:
        leaf.left.right = child1
    tree._register(child1, child2, tagged)
    parent.children[node_index] = tagged
    mark_replaced(leaf, (child1, child2), tree._track)
    return tagged


def scan_leaf(leaf: LeafNode, version: int, low, high,
              gv: GlobalVersion) -> Tuple[List[tuple], bool]:
    """Collect (key, value-at-version) pairs of one leaf; no locks, no retries.

    Pending stamps are helped, deleted-at-version keys skipped. The second
    return is False when the leaf already holds a key above ``high`` (the
    walk can stop after this leaf).
    """
    out = []
    proceed = True
    keys = leaf.keys
    values = leaf.values
    for i in range(len(keys)):
        k = keys[i]
        if k is EMPTY or k < low:
            continue
        if k > high:
            proceed = False
            continue
        cell = values[i]
        if cell is None or cell.key != k:
            # Slot was compacted (and possibly reused) after we read the key;
            # compaction gating proves the key reads deleted at our version.
            continue
        v = help_and_get_value_by_version(cell, version, gv)
        if v is None or v is NO_ENTRY:
            continue
        out.append((k, v))
    return out, proceed


class ABTreeMap:
    """Ordered concurrent map: lock-free finds, one-leaf updates, atomic scans.

    ``min_node_size``/``max_node_size`` are the (a, b) bounds: non-root nodes
    keep at least a keys (leaves) or children (routers), at most b, with
    2 <= a <= b/2. ``scan_slots`` caps the number of distinct threads that
    may scan one instance. ``track_nodes`` keeps a weak registry of every
    node ever created plus unlink-time link snapshots, for the invariant
    checker; leave it off in production.
    """

    def __init__(self, min_node_size: int = 2, max_node_size: int = 32,
                 scan_slots: int = 128, track_nodes: bool = False) -> None:
        if min_node_size < 2:
            raise ValueError("min_node_size must be at least 2")
        if max_node_size < 2 * min_node_size:
            raise ValueError("max_node_size must be at least 2 * min_node_size")
        self.min_node_size = min_node_size
        self.max_node_size = max_node_size
        self.gv = GlobalVersion()
        self.scans = OngoingScans(scan_slots)
        self._track = track_nodes
        self._registry: Optional[weakref.WeakSet] = (
            weakref.WeakSet() if track_nodes else None)
        self.entry = make_entry(max_node_size)
        self._register(self.entry, self.entry.children[0])

    def _register(self, *nodes) -> None:
        reg = self._registry
        if reg is not None:
            for n in nodes:
                reg.add(n)

    @staticmethod
    def _check_key(key) -> None:
        if key is None:
            raise ValueError("None is reserved and cannot be used as a key")

    # ------------------------------------------------------------------
    # public operations

    def find(self, key) -> Any:
        """Latest value for ``key``, or None if absent or deleted."""
        self._check_key(key)
        path = search(self.entry, key)
        return search_leaf(path.node, key)[1]

    def insert(self, key, value) -> Any:
        """Insert (key, value); returns None, or the existing live value.

        An existing live key is left untouched (no overwrite); re-inserting
        a logically deleted key revives it with a fresh version.
        """
        self._check_key(key)
        if value is None:
            raise ValueError("None is reserved and cannot be stored as a value")
        return self._upsert(key, value)

    def delete(self, key) -> Any:
        """Logically delete ``key``; returns the removed value or None.

        The slot survives (marker value, fresh version) until compaction
        proves no ongoing scan can still observe the key.
        """
        self._check_key(key)
        return self._upsert(key, None)

    def scan(self, low, high) -> List[Any]:
        """Values of all live keys in [low, high], ordered by key.

        Atomic: the result is the set of keys live at the scan's version,
        acquired with one fetch-and-increment of the global counter.
        Wait-free: the traversal never locks, never retries, and helps any
        pending version stamp it runs into.
        """
        self._check_key(low)
        self._check_key(high)
        if low > high:
            raise ValueError("scan bounds out of order")
        osa = self.scans
        slot = osa.thread_slot()
        scan_data = ScanData(low, high)
        osa.publish(slot, scan_data)
        try:
            if _hooks:
                pause("scan_version")
            version = new_version(self.gv, scan_data)
            if _hooks:
                pause("scan_traverse")
            return self._collect_at_version(version, low, high)
        finally:
            osa.publish(slot, None)

    def _collect_at_version(self, version: int, low, high) -> List[Any]:
        """Walk the leaf list reading every key in [low, high] at ``version``.

        The version must be pinned (held by a published scan, or quiescence
        must be otherwise guaranteed) or compaction may drop tombstones the
        walk still needs.
        """
        gv = self.gv
        node = search(self.entry, low).node
        out: List[Any] = []
        while True:
            pairs, proceed = scan_leaf(node, version, low, high, gv)
            if pairs:
                pairs.sort()
                out.extend(p[1] for p in pairs)
            if not proceed:
                break
            node = node.right
            if node is None:
                break
        return out

    # ------------------------------------------------------------------
    # update machinery

    def _upsert(self, key, value) -> Any:
        entry = self.entry
        gv = self.gv
        max_size = self.max_node_size
        while True:
            path = search(entry, key)
            leaf = path.node
            found, current = search_leaf(leaf, key)
            if (found and value is not None) or (not found and value is None):
                # insert over a live key / delete of an absent one
                return current
            guard = leaf.lock.acquire()
            if leaf.marked:
                leaf.lock.release(guard)
                continue
            ok, idx = can_update_key_in_index(leaf, key, value)
            if idx is not None:
                old = leaf.values[idx].latest_value
                if ok:
                    update_key_in_index(leaf, idx, value, gv)
                leaf.lock.release(guard)
                return old
            if leaf.size < max_size:
                res = insert_key(leaf, key, value, gv)
                assert res is not RETRY
                leaf.lock.release(guard)
                return None
            removed = clean_obsolete_keys(self, leaf)
            if removed > 0:
                res = insert_key(leaf, key, value, gv)
                assert res is not RETRY
                leaf.lock.release(guard)
                fix_underfull(self, leaf)
                return None
            if not self._split_insert(path, leaf, guard, key, value):
                continue
            return None

    def _split_insert(self, path: PathInfo, leaf: LeafNode, guard,
                      key, value) -> bool:
        """Split path of _upsert; returns False when the caller must retry."""
        parent = path.parent
        node_index = path.node_index
        pguard = parent.lock.acquire()
        if parent.marked:
            parent.lock.release(pguard)
            leaf.lock.release(guard)
            return False
        assert parent.children[node_index] is leaf
        # Neighbor leaves under other parents must be locked before their
        # list links are rewired; same-parent neighbors are already frozen
        # by the parent lock. try_acquire + full backoff keeps the sideways
        # acquisition deadlock-free.
        neighbors = []
        ok = True
        left = leaf.left
        if left is not None and not (
                node_index > 0 and parent.children[node_index - 1] is left):
            ok = self._pin_neighbor(left, neighbors)
        right = leaf.right
        if ok and right is not None and not (
                node_index < parent.size - 1
                and parent.children[node_index + 1] is right):
            ok = self._pin_neighbor(right, neighbors)
        if not ok:
            for n, g in neighbors:
                n.lock.release(g)
            parent.lock.release(pguard)
            leaf.lock.release(guard)
            time.sleep(random.random() * 1e-4)
            return False
        tagged = create_tagged_internal_node(self, leaf, key, value,
                                             parent, node_index)
        for n, g in neighbors:
            n.lock.release(g)
        parent.lock.release(pguard)
        leaf.lock.release(guard)
        fix_tagged(self, tagged)
        return True

    @staticmethod
    def _pin_neighbor(node: LeafNode, acc: list) -> bool:
        g = node.lock.try_acquire()
        if g is None:
            return False
        if node.marked:
            node.lock.release(g)
            return False
        acc.append((node, g))
        return True

    # ------------------------------------------------------------------
    # whole-structure helpers (estimates and quiescent iteration)

    def _leftmost_leaf(self) -> LeafNode:
        node = self.entry.children[0]
        while not node.is_leaf:
            node = node.children[0]
        return node

    def approximate_size(self) -> int:
        """Count of live keys; approximate under concurrent updates."""
        total = 0
        node = self._leftmost_leaf()
        while node is not None:
            keys = node.keys
            values = node.values
            for i in range(len(keys)):
                if keys[i] is not EMPTY:
                    cell = values[i]
                    if cell is not None and cell.latest_value is not None:
                        total += 1
            node = node.right
        return total

    def items(self) -> Iterator[Tuple[Any, Any]]:
        """Yield (key, value) for live keys in ascending order.

        Intended for quiescent inspection (verification, dumps); it reads
        leaves directly without a version, so concurrent updates may tear
        across leaves.
        """
        node = self._leftmost_leaf()
        while node is not None:
            pairs = []
            keys = node.keys
            values = node.values
            for i in range(len(keys)):
                if keys[i] is not EMPTY:
                    cell = values[i]
                    if cell is not None and cell.latest_value is not None:
                        pairs.append((keys[i], cell.latest_value))
            pairs.sort()
            yield from pairs
            node = node.right

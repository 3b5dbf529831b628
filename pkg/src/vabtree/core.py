"""Node types and the lock-free search primitives.

Tree anatomy
------------
The map is a leaf-oriented relaxed (a,b)-tree. All keys live in leaves;
internal nodes hold immutable sorted routing keys and a fixed-arity array of
child pointers (the pointers themselves are mutable slots). A synthetic entry
node with a single child pointer sits above the root so the root can be
swapped like any other child. Leaves form a doubly linked list for range
scans.

Structural changes never mutate a node's key set in place (the one exception
is leaf slot writes under the leaf's lock and modification counter). Instead
a replacement node is built and swung in by overwriting one child pointer in
the parent; the replaced nodes are marked and stay readable for concurrent
operations that still hold references to them. A *tagged* internal node is a
two-child separator produced by splitting a full leaf or a full internal
node; the tag records one level of height debt that a later fix absorbs.

Leaf slot arrays have fixed length b. A vacant slot holds EMPTY (rendered as
``None``) in the keys array; occupied slots are unsorted. The ``version``
counter is even while the leaf is stable and odd while the lock holder is
mutating slots; optimistic readers double-collect around it.
"""

import time
from bisect import bisect_right
from typing import Any, List, Optional, Tuple

from .sync import QueueLock

#: Reserved key marker for a vacant leaf slot. Client keys must never be None.
EMPTY = None


class LeafNode:
    """Leaf with fixed-size unsorted slot arrays and a modification counter."""

    __slots__ = ("keys", "values", "size", "version", "marked", "lock",
                 "left", "right", "route_key", "frozen_links", "replaced_by",
                 "__weakref__")

    is_leaf = True
    tagged = False

    def __init__(self, capacity: int, route_key) -> None:
        self.keys: List[Any] = [EMPTY] * capacity
        self.values: List[Any] = [None] * capacity
        self.size = 0
        self.version = 0
        self.marked = False
        self.lock = QueueLock()
        self.left: Optional["LeafNode"] = None
        self.right: Optional["LeafNode"] = None
        # A key inside this node's range, fixed at construction; used to
        # re-locate the node from the root when a fix needs a fresh path.
        self.route_key = route_key
        # Set at unlink time when the tree tracks nodes (invariant checks).
        self.frozen_links = None
        self.replaced_by = None

    def __repr__(self) -> str:  # pragma: no cover
        ks = sorted(k for k in self.keys if k is not EMPTY)
        return "LeafNode(%r%s)" % (ks, ", marked" if self.marked else "")


class InternalNode:
    """Router node: immutable sorted keys, mutable child pointer slots.

    ``size`` is the child count and never changes for a given node; children
    are replaced in place, so a child's index stays valid as long as the node
    is unmarked. A tagged node always has exactly two children and one key.
    """

    __slots__ = ("keys", "children", "size", "marked", "lock", "tagged",
                 "route_key", "__weakref__")

    is_leaf = False

    def __init__(self, keys, children, tagged: bool, route_key) -> None:
        self.keys: Tuple = tuple(keys)
        self.children: List[Any] = list(children)
        self.size = len(self.children)
        assert self.size == len(self.keys) + 1
        assert not tagged or self.size == 2
        self.marked = False
        self.lock = QueueLock()
        self.tagged = tagged
        self.route_key = route_key

    def __repr__(self) -> str:  # pragma: no cover
        flags = "".join([", tagged" if self.tagged else "",
                         ", marked" if self.marked else ""])
        return "InternalNode(keys=%r, size=%d%s)" % (self.keys, self.size, flags)


def make_entry(leaf_capacity: int) -> InternalNode:
    """Build the entry sentinel holding a single empty root leaf."""
    root = LeafNode(leaf_capacity, route_key=0)
    entry = InternalNode.__new__(InternalNode)
    entry.keys = ()
    entry.children = [root]
    entry.size = 1
    entry.marked = False
    entry.lock = QueueLock()
    entry.tagged = False
    entry.route_key = 0
    return entry


def mark_replaced(node, replacements, track: bool) -> None:
    """Mark ``node`` unlinked; optionally snapshot its links for the checker.

    Marks are permanent. The snapshot (current list links plus the nodes
    that replaced this one) lets the invariant checker prove unlinked leaves
    keep frozen links and never route a reader into their replacements.
    """
    if track and node.is_leaf:
        node.frozen_links = (node.left, node.right)
        node.replaced_by = tuple(r for r in replacements if r.is_leaf)
    node.marked = True


class PathInfo:
    """Snapshot of one root-to-leaf descent."""

    __slots__ = ("grandparent", "parent", "parent_index", "node", "node_index")

    def __init__(self, grandparent, parent, parent_index, node, node_index):
        self.grandparent = grandparent
        self.parent = parent
        self.parent_index = parent_index
        self.node = node
        self.node_index = node_index


def search(entry: InternalNode, key, target=None) -> PathInfo:
    """Descend from the entry toward ``key``; stop early at ``target``.

    Routing rule: within a node, follow the child whose index is the number
    of routing keys <= key (a key equal to a routing key belongs to the right
    subtree). Lock-free; the returned path is a consistent-enough snapshot
    that callers re-validate under locks. Terminates because every child
    pointer leads strictly downward in some consistent state of the tree.
    """
    gp = None
    p: Any = None
    p_idx = 0
    n: Any = entry
    n_idx = 0
    while not n.is_leaf:
        if n is target:
            break
        gp = p
        p = n
        p_idx = n_idx
        n_idx = bisect_right(n.keys, key)
        n = n.children[n_idx]
    return PathInfo(gp, p, p_idx, n, n_idx)


def search_leaf(leaf: LeafNode, key) -> Tuple[bool, Any]:
    """Optimistic read of ``key``'s latest value in ``leaf``.

    Double-collects around the modification counter: read the counter (must
    be even), scan the slots, re-read the counter; retry on any change.
    Returns (found, latest value); found is False when the key is physically
    absent or its latest value is logically deleted.
    """
    keys = leaf.keys
    spins = 0
    while True:
        ver = leaf.version
        if ver & 1 == 0:
            value = None
            try:
                i = keys.index(key)
            except ValueError:
                i = -1
            if i >= 0:
                cell = leaf.values[i]
                if cell is not None and cell.key == key:
                    value = cell.latest_value
            if leaf.version == ver:
                return (value is not None, value)
        spins += 1
        if spins >= 8:
            time.sleep(0)
            spins = 0

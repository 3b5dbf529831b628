"""Structural repair: absorbing tagged routers, refilling underfull nodes,
and compacting logically deleted keys.

Every repair follows the same copy-and-swap discipline as leaf splits: build
replacement nodes, splice new leaves into the leaf list, swing one child
pointer in the locked parent (or grandparent), then mark every replaced
node. Marks are permanent, and a marked node's contents and list links are
never touched again, so concurrent readers that still hold it finish
normally and simply cannot reach the replacements from it.

A repair re-locates its target from the root on every attempt (route_key is
a key inside the target's range), validates flags under locks, and on
finding a different repair in the way -- a marked or tagged node, an
underfull parent -- releases everything, helps that repair, and retries.
Helping matters for progress: a merge queues two follow-up repairs on the
same thread, so an un-helped retry loop could wait forever on a blocker no
other thread is obligated to fix. Lock order is child, then parent, then
grandparent, siblings left before right; only leaf-list neighbors under
other parents are taken sideways, with try_acquire and full backoff, which
keeps the order cycle-free.
"""

import random
import time

from .core import EMPTY, InternalNode, LeafNode, mark_replaced, search
from .sync import begin_modify, end_modify
from .versions import (INFINITY, NO_ENTRY, help_and_get_value_by_version,
                       min_ongoing_scan_version)


def pin_leaf_neighbor(node: LeafNode, acc: list) -> bool:
    """try_acquire ``node`` and stash the guard; False means caller must back off."""
    g = node.lock.try_acquire()
    if g is None:
        return False
    if node.marked:
        node.lock.release(g)
        return False
    acc.append((node, g))
    return True


def clean_obsolete_keys(tree, leaf: LeafNode) -> int:
    """Physically drop deleted keys no ongoing scan can still observe.

    Caller holds the leaf's lock. First stamps every pending published scan
    and takes the minimum ongoing scan version; a key is removable when its
    latest value is the deletion marker and its deletion version is at or
    below that minimum (any future scan version will be higher). Returns the
    number of slots freed.
    """
    gv = tree.gv
    lowest = min_ongoing_scan_version(tree.scans, gv)
    removed = 0
    keys = leaf.keys
    values = leaf.values
    for i in range(len(keys)):
        if keys[i] is EMPTY:
            continue
        cell = values[i]
        if cell is None:
            continue
        latest = help_and_get_value_by_version(cell, INFINITY, gv)
        if latest is not None and latest is not NO_ENTRY:
            continue
        if lowest >= cell.latest_version:
            begin_modify(leaf)
            keys[i] = EMPTY
            values[i] = None
            leaf.size -= 1
            end_modify(leaf)
            removed += 1
    return removed


def _merged_pairs(left: LeafNode, right: LeafNode) -> list:
    pairs = [(k, left.values[i]) for i, k in enumerate(left.keys) if k is not EMPTY]
    pairs.extend((k, right.values[i]) for i, k in enumerate(right.keys) if k is not EMPTY)
    pairs.sort(key=lambda p: p[0])
    return pairs


def _fill_leaf(leaf: LeafNode, pairs: list) -> None:
    for j, (k, cell) in enumerate(pairs):
        leaf.keys[j] = k
        leaf.values[j] = cell
    leaf.size = len(pairs)


def distribute_keys(tree, left, right, left_index: int, parent: InternalNode):
    """Rebuild two siblings with their contents split evenly (floor-half left).

    Caller holds both nodes, the parent, and (for leaves) any list neighbors
    under other parents. Returns (new_left, new_right, new_parent); the
    caller installs new_parent at the grandparent and marks the old nodes.
    For routers the separator rotates through the parent: the old parent key
    joins the merged key sequence and the new middle key moves up.
    """
    if left.is_leaf:
        pairs = _merged_pairs(left, right)
        keep = len(pairs) // 2
        sep = pairs[keep][0]
        cap = tree.max_node_size
        new_left = LeafNode(cap, route_key=pairs[0][0])
        _fill_leaf(new_left, pairs[:keep])
        new_right = LeafNode(cap, route_key=sep)
        _fill_leaf(new_right, pairs[keep:])
        new_left.left = left.left
        new_left.right = new_right
        new_right.left = new_left
        new_right.right = right.right
        if right.right is not None:
            right.right.left = new_right
        if left.left is not None:
            left.left.right = new_left
    else:
        keys = left.keys + (parent.keys[left_index],) + right.keys
        children = left.children + right.children
        keep = len(children) // 2
        sep = keys[keep - 1]
        new_left = InternalNode(keys[:keep - 1], children[:keep], False,
                                route_key=keys[0])
        new_right = InternalNode(keys[keep:], children[keep:], False,
                                 route_key=sep)
    new_parent = InternalNode(
        parent.keys[:left_index] + (sep,) + parent.keys[left_index + 1:],
        parent.children[:left_index] + [new_left, new_right]
        + parent.children[left_index + 2:],
        False, route_key=parent.route_key)
    tree._register(new_left, new_right, new_parent)
    return new_left, new_right, new_parent


def combine_keys(tree, left, right, left_index: int, parent: InternalNode):
    """Rebuild two siblings as one node holding both contents.

    Same locking preconditions as distribute_keys. Returns the merged node;
    the caller rebuilds or collapses the parent around it. A merged router
    pulls the separating parent key down between the two child sequences.
    """
    if left.is_leaf:
        pairs = _merged_pairs(left, right)
        new_node = LeafNode(tree.max_node_size,
                            route_key=pairs[0][0] if pairs else left.route_key)
        _fill_leaf(new_node, pairs)
        new_node.left = left.left
        new_node.right = right.right
        if right.right is not None:
            right.right.left = new_node
        if left.left is not None:
            left.left.right = new_node
    else:
        new_node = InternalNode(
            left.keys + (parent.keys[left_index],) + right.keys,
            left.children + right.children,
            False, route_key=left.route_key)
    tree._register(new_node)
    return new_node


def fix_tagged(tree, tagged: InternalNode) -> None:
    """Absorb one tagged router into its parent (or untag it at the root).

    Idempotent and shareable: any thread may run it; a marked target means
    another thread finished the job. A full parent is split around the
    tagged node's contents under a fresh tagged router one level up, and the
    loop continues there, so one leaf split settles with at most one repair
    per tree level.
    """
    entry = tree.entry
    track = tree._track
    while True:
        if tagged.marked:
            return
        path = search(entry, tagged.route_key, tagged)
        if path.node is not tagged:
            return
        parent = path.parent
        if parent is entry:
            # Tagged root: replace with an untagged copy (tree grew a level).
            tguard = tagged.lock.acquire()
            if tagged.marked:
                tagged.lock.release(tguard)
                return
            eguard = entry.lock.acquire()
            assert entry.children[0] is tagged
            replacement = InternalNode(tagged.keys, tagged.children, False,
                                       route_key=tagged.route_key)
            tree._register(replacement)
            entry.children[0] = replacement
            mark_replaced(tagged, (replacement,), track)
            entry.lock.release(eguard)
            tagged.lock.release(tguard)
            return
        tguard = tagged.lock.acquire()
        if tagged.marked:
            tagged.lock.release(tguard)
            return
        pguard = parent.lock.acquire()
        if parent.marked or parent.tagged:
            help_parent = parent.tagged and not parent.marked
            parent.lock.release(pguard)
            tagged.lock.release(tguard)
            if help_parent:
                fix_tagged(tree, parent)
            continue
        gp = path.grandparent
        gguard = gp.lock.acquire()
        if gp.marked:
            gp.lock.release(gguard)
            parent.lock.release(pguard)
            tagged.lock.release(tguard)
            continue
        node_index = path.node_index
        assert parent.children[node_index] is tagged
        assert gp.children[path.parent_index] is parent
        merged_keys = (parent.keys[:node_index] + tagged.keys
                       + parent.keys[node_index:])
        merged_children = (parent.children[:node_index] + list(tagged.children)
                           + parent.children[node_index + 1:])
        if parent.size < tree.max_node_size:
            replacement = InternalNode(merged_keys, merged_children, False,
                                       route_key=parent.route_key)
            tree._register(replacement)
            gp.children[path.parent_index] = replacement
            mark_replaced(parent, (replacement,), track)
            mark_replaced(tagged, (replacement,), track)
            follow_up = None
        else:
            # Parent full: split its merged contents one level up.
            keep = len(merged_children) // 2
            sep = merged_keys[keep - 1]
            new_left = InternalNode(merged_keys[:keep - 1],
                                    merged_children[:keep], False,
                                    route_key=merged_keys[0])
            new_right = InternalNode(merged_keys[keep:],
                                     merged_children[keep:], False,
                                     route_key=sep)
            new_tagged = InternalNode((sep,), (new_left, new_right), True,
                                      route_key=parent.route_key)
            tree._register(new_left, new_right, new_tagged)
            gp.children[path.parent_index] = new_tagged
            mark_replaced(parent, (new_left, new_right), track)
            mark_replaced(tagged, (new_left, new_right), track)
            follow_up = new_tagged
        gp.lock.release(gguard)
        parent.lock.release(pguard)
        tagged.lock.release(tguard)
        if follow_up is None:
            return
        tagged = follow_up


def fix_underfull(tree, node) -> None:
    """Refill a node that dropped below the minimum size.

    The node borrows from an adjacent sibling when the pair holds more than
    2a keys (children), otherwise the two are merged; a merge can leave the
    new node or the rebuilt parent underfull, so both are re-checked. The
    root is exempt: a two-child root whose children merge is collapsed away
    instead.
    """
    entry = tree.entry
    a = tree.min_node_size
    track = tree._track
    while True:
        if node.marked or node.size >= a:
            return
        root = entry.children[0]
        if node is root:
            return
        path = search(entry, node.route_key, node)
        if path.node is not node:
            return
        parent = path.parent
        if parent is entry:
            return
        if parent.size == 1:
            # Lone-child parent left behind by a merge; no sibling to borrow
            # from until the parent itself is merged away.
            fix_underfull(tree, parent)
            continue
        node_index = path.node_index
        s_idx = 1 if node_index == 0 else node_index - 1
        sibling = parent.children[s_idx]
        if node_index < s_idx:
            left_node, right_node, left_index = node, sibling, node_index
        else:
            left_node, right_node, left_index = sibling, node, s_idx
        gp = path.grandparent
        lguard = left_node.lock.acquire()
        rguard = right_node.lock.acquire()
        pguard = parent.lock.acquire()
        gguard = gp.lock.acquire()
        held = ((gp, gguard), (parent, pguard),
                (right_node, rguard), (left_node, lguard))

        if node.size >= a or node.marked:
            _release(held)
            return
        if sibling.marked or parent.marked or gp.marked:
            _release(held)
            continue
        if parent.size < a and parent is not entry.children[0]:
            _release(held)
            fix_underfull(tree, parent)
            continue
        if parent.tagged or node.tagged or sibling.tagged:
            blocker = parent if parent.tagged else (
                node if node.tagged else sibling)
            _release(held)
            fix_tagged(tree, blocker)
            continue
        assert parent.children[node_index] is node
        assert gp.children[path.parent_index] is parent

        pinned: list = []
        if left_node.is_leaf:
            ok = True
            outer_left = left_node.left
            if outer_left is not None and not (
                    left_index > 0
                    and parent.children[left_index - 1] is outer_left):
                ok = pin_leaf_neighbor(outer_left, pinned)
            outer_right = right_node.right
            if ok and outer_right is not None and not (
                    left_index + 1 < parent.size - 1
                    and parent.children[left_index + 2] is outer_right):
                ok = pin_leaf_neighbor(outer_right, pinned)
            if not ok:
                _release(pinned)
                _release(held)
                time.sleep(random.random() * 1e-4)
                continue

        if node.size + sibling.size > 2 * a:
            new_left, new_right, new_parent = distribute_keys(
                tree, left_node, right_node, left_index, parent)
            gp.children[path.parent_index] = new_parent
            mark_replaced(left_node, (new_left, new_right), track)
            mark_replaced(right_node, (new_left, new_right), track)
            mark_replaced(parent, (new_parent,), track)
            _release(pinned)
            _release(held)
            return

        new_node = combine_keys(tree, left_node, right_node, left_index, parent)
        if gp is entry and parent.size == 2:
            # The root's only two children merged: drop a level.
            entry.children[0] = new_node
            mark_replaced(left_node, (new_node,), track)
            mark_replaced(right_node, (new_node,), track)
            mark_replaced(parent, (new_node,), track)
            _release(pinned)
            _release(held)
            return
        new_parent = InternalNode(
            parent.keys[:left_index] + parent.keys[left_index + 1:],
            parent.children[:left_index] + [new_node]
            + parent.children[left_index + 2:],
            False, route_key=parent.route_key)
        tree._register(new_parent)
        gp.children[path.parent_index] = new_parent
        mark_replaced(left_node, (new_node,), track)
        mark_replaced(right_node, (new_node,), track)
        mark_replaced(parent, (new_parent,), track)
        _release(pinned)
        _release(held)
        fix_underfull(tree, new_node)
        fix_underfull(tree, new_parent)
        return


def _release(held) -> None:
    for n, g in held:
        n.lock.release(g)

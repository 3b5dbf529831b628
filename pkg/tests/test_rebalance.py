"""Compaction gating and the structural repair routines, driven directly."""

from vabtree.core import EMPTY, search
from vabtree.rebalance import clean_obsolete_keys, fix_tagged, fix_underfull
from vabtree.tree import ABTreeMap, create_tagged_internal_node
from vabtree.verify import check_invariants
from vabtree.versions import ScanData


def leaves_of(tree):
    node = tree.entry.children[0]
    while not node.is_leaf:
        node = node.children[0]
    out = []
    while node is not None:
        out.append(node)
        node = node.right
    return out


def slot_keys(leaf):
    return sorted(k for k in leaf.keys if k is not EMPTY)


def cleaned(tree, leaf):
    guard = leaf.lock.acquire()
    try:
        return clean_obsolete_keys(tree, leaf)
    finally:
        leaf.lock.release(guard)


def pin_version(tree, slot=0):
    sd = ScanData(None, None)
    sd.cas_version(0, tree.gv.fetch_and_increment())
    tree.scans.slots[slot] = sd
    return sd


def split_leaf_directly(tree, leaf, key, value):
    """White-box: run the split step exactly as an inserting thread would."""
    path = search(tree.entry, key)
    assert path.node is leaf
    lguard = leaf.lock.acquire()
    pguard = path.parent.lock.acquire()
    tagged = create_tagged_internal_node(tree, leaf, key, value,
                                         path.parent, path.node_index)
    path.parent.lock.release(pguard)
    leaf.lock.release(lguard)
    return tagged


def two_leaf_tree():
    """(2, 8) tree shaped as one router over leaves {1..4} and {5..9}."""
    t = ABTreeMap(2, 8, track_nodes=True)
    for k in range(1, 10):
        t.insert(k, k * 10)
    root = t.entry.children[0]
    assert not root.is_leaf and root.keys == (5,)
    return t


def test_clean_respects_pinned_scan():
    t = two_leaf_tree()
    left = leaves_of(t)[0]
    t.delete(1)                    # stamped below the pin
    pin = pin_version(t)
    t.delete(2)                    # stamped above the pin
    t.delete(3)
    assert cleaned(t, left) == 1
    assert slot_keys(left) == [2, 3, 4]
    # nothing newly removable while the scan stays pinned
    assert cleaned(t, left) == 0
    t.scans.slots[0] = None
    assert pin.version == 1
    assert cleaned(t, left) == 2
    assert slot_keys(left) == [4]


def test_clean_skips_live_keys():
    t = two_leaf_tree()
    left = leaves_of(t)[0]
    assert cleaned(t, left) == 0
    assert slot_keys(left) == [1, 2, 3, 4]


def test_distribute_between_uneven_siblings():
    t = two_leaf_tree()
    left = leaves_of(t)[0]
    for k in (2, 3, 4):
        t.delete(k)
    assert cleaned(t, left) == 3
    assert left.size == 1
    fix_underfull(t, left)

    after = leaves_of(t)
    assert [l.size for l in after] == [3, 3]
    assert slot_keys(after[0]) == [1, 5, 6]
    assert slot_keys(after[1]) == [7, 8, 9]
    assert t.entry.children[0].keys == (7,)
    assert left.marked and left is not after[0]
    assert list(t.items()) == [(k, k * 10) for k in (1, 5, 6, 7, 8, 9)]
    report = check_invariants(t)
    assert report.ok, report.violations


def test_combine_collapses_root():
    t = two_leaf_tree()
    left, right = leaves_of(t)
    for k in (3, 4, 6, 7, 8, 9):
        t.delete(k)
    assert cleaned(t, left) == 2
    assert cleaned(t, right) == 4
    assert (left.size, right.size) == (2, 1)
    fix_underfull(t, right)

    root = t.entry.children[0]
    assert root.is_leaf, "two-leaf merge must collapse the router"
    assert slot_keys(root) == [1, 2, 5]
    assert left.marked and right.marked
    assert list(t.items()) == [(1, 10), (2, 20), (5, 50)]
    report = check_invariants(t)
    assert report.ok, report.violations


def test_fix_underfull_is_a_no_op_when_healthy():
    t = two_leaf_tree()
    left = leaves_of(t)[0]
    fix_underfull(t, left)
    assert leaves_of(t)[0] is left and not left.marked

    single = ABTreeMap(2, 8)
    single.insert(1, 1)
    root = single.entry.children[0]
    fix_underfull(single, root)  # root leaf is exempt from the minimum
    assert single.entry.children[0] is root


def test_fix_tagged_at_root_untags_in_place():
    t = ABTreeMap(2, 4, track_nodes=True)
    for k in (1, 3, 4, 5):
        t.insert(k, k)
    leaf = t.entry.children[0]
    tagged = split_leaf_directly(t, leaf, 7, 7)
    assert t.entry.children[0] is tagged and tagged.tagged
    fix_tagged(t, tagged)
    root = t.entry.children[0]
    assert not root.tagged and root.keys == tagged.keys
    assert tagged.marked
    assert list(t.items()) == [(k, k) for k in (1, 3, 4, 5, 7)]
    report = check_invariants(t)
    assert report.ok, report.violations


def test_fix_tagged_absorbed_by_parent():
    t = two_leaf_tree()
    right = leaves_of(t)[1]
    old_root = t.entry.children[0]
    tagged = split_leaf_directly(t, right, 10, 100)
    assert old_root.children[1] is tagged
    fix_tagged(t, tagged)
    root = t.entry.children[0]
    assert root is not old_root and old_root.marked and tagged.marked
    assert not root.tagged and root.size == 3
    assert root.keys == (5, 8)
    assert list(t.items()) == [(k, k * 10) for k in range(1, 11)]
    report = check_invariants(t)
    assert report.ok, report.violations


def test_fix_tagged_splits_full_parent():
    t = ABTreeMap(2, 4, track_nodes=True)
    k = 0
    while t.entry.children[0].is_leaf or t.entry.children[0].size < 4:
        k += 10
        t.insert(k, k)
    root = t.entry.children[0]
    donor = next(l for l in leaves_of(t) if l.size >= 3)
    new_key = max(slot_keys(donor)) - 5
    expect = sorted([p for p in t.items()] + [(new_key, new_key)])

    tagged = split_leaf_directly(t, donor, new_key, new_key)
    fix_tagged(t, tagged)
    top = t.entry.children[0]
    assert not top.tagged and top.size == 2, "full router must split upward"
    assert all(not c.tagged and 2 <= c.size <= 3 for c in top.children)
    assert root.marked
    assert list(t.items()) == expect
    report = check_invariants(t)
    assert report.ok, report.violations
    assert report.stats["depth"] == 2


def test_fix_tagged_already_handled_is_a_no_op():
    t = ABTreeMap(2, 4, track_nodes=True)
    for k in (1, 3, 4, 5):
        t.insert(k, k)
    tagged = split_leaf_directly(t, t.entry.children[0], 7, 7)
    fix_tagged(t, tagged)
    snapshot = t.entry.children[0]
    fix_tagged(t, tagged)  # second repair finds the mark and leaves
    assert t.entry.children[0] is snapshot


def test_internal_rebalance_under_churn():
    import random
    t = ABTreeMap(2, 4, track_nodes=True)
    model = {}
    rng = random.Random(99)
    for phase in range(6):
        for _ in range(1200):
            key = rng.randint(1, 150)
            if rng.random() < (0.7 if phase % 2 == 0 else 0.25):
                t.insert(key, key)
                model.setdefault(key, key)
            else:
                t.delete(key)
                model.pop(key, None)
        assert list(t.items()) == sorted(model.items())
        report = check_invariants(t)
        assert report.ok, report.violations

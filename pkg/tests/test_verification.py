"""The verification tools must accept healthy structures and reject broken
ones; checkers that cannot fail prove nothing."""

import pytest

from vabtree import instrument
from vabtree.core import EMPTY, InternalNode
from vabtree.tree import ABTreeMap
from vabtree.verify import (Operation, SequentialModel, apply_op,
                            check_invariants, check_linearizable,
                            record_history, run_race_scenarios)


def healthy_tree(n=60, a=2, b=4):
    t = ABTreeMap(a, b, track_nodes=True)
    for k in range(1, n + 1):
        t.insert(k, k)
    for k in range(1, n + 1, 5):
        t.delete(k)
    return t


def violations_of(tree):
    return check_invariants(tree).violations


def first_leaf(tree):
    node = tree.entry.children[0]
    while not node.is_leaf:
        node = node.children[0]
    return node


def test_sequential_model_contracts():
    m = SequentialModel()
    assert m.insert(1, "a") is None
    assert m.insert(1, "b") == "a"
    assert m.find(1) == "a" and m.find(2) is None
    assert m.delete(1) == "a" and m.delete(1) is None
    assert m.insert(1, "c") is None
    for k in (5, 3, 9):
        m.insert(k, k)
    assert m.scan(1, 9) == ["c", 3, 5, 9]
    assert m.scan(4, 6) == [5]
    assert m.items() == [(1, "c"), (3, 3), (5, 5), (9, 9)]


def test_apply_op_dispatch():
    m = SequentialModel()
    assert apply_op(m, "insert", (1, 2)) is None
    assert apply_op(m, "find", (1,)) == 2
    assert apply_op(m, "scan", (0, 9)) == [2]
    assert apply_op(m, "delete", (1,)) == 2
    with pytest.raises(ValueError):
        apply_op(m, "pop", (1,))


def test_invariants_accept_healthy_trees():
    report = check_invariants(healthy_tree())
    assert report.ok, report.violations
    assert report.stats["keys"] > report.stats["live_keys"] > 0
    assert report.stats["depth"] >= 2


def test_invariants_catch_duplicate_key():
    t = healthy_tree()
    leaf = first_leaf(t)
    src = next(i for i, k in enumerate(leaf.keys) if k is not EMPTY)
    dst = leaf.right
    hole = next(i for i, k in enumerate(dst.keys) if k is EMPTY)
    dst.keys[hole] = leaf.keys[src]
    dst.values[hole] = leaf.values[src]
    dst.size += 1
    assert any("present in 2 slots" in v or "range" in v
               for v in violations_of(t))


def test_invariants_catch_list_breakage():
    t = healthy_tree()
    leaf = first_leaf(t)
    leaf.right.left = None
    assert any("asymmetry" in v for v in violations_of(t))

    t2 = healthy_tree()
    leaf2 = first_leaf(t2)
    leaf2.right = leaf2
    assert any("cycle" in v for v in violations_of(t2))


def test_invariants_catch_router_disorder():
    t = healthy_tree()
    stack = [t.entry.children[0]]
    router = None
    while stack:
        n = stack.pop()
        if not n.is_leaf:
            if len(n.keys) >= 2:
                router = n
                break
            stack.extend(n.children)
    assert router is not None
    router.keys = tuple(reversed(router.keys))
    assert any("increasing" in v or "range" in v for v in violations_of(t))


def test_invariants_catch_pending_stamp():
    t = healthy_tree()
    leaf = first_leaf(t)
    cell = next(c for c in leaf.values if c is not None)
    cell.latest_version = 0
    assert any("pending" in v for v in violations_of(t))


def test_invariants_catch_size_lie():
    t = healthy_tree()
    first_leaf(t).size += 1
    assert any("occupied slots" in v for v in violations_of(t))


def test_invariants_catch_reachable_marked_node():
    t = healthy_tree()
    first_leaf(t).marked = True
    assert any("marked" in v for v in violations_of(t))


def replaced_leaf():
    """A tree plus a strong reference to one leaf its last split unlinked
    (the registry is weak; without the reference the leaf is long gone)."""
    t = ABTreeMap(2, 4, track_nodes=True)
    for k in (1, 3, 4, 5):
        t.insert(k, k)
    dead = t.entry.children[0]
    t.insert(7, 7)
    assert dead.marked and dead.frozen_links is not None
    return t, dead


def test_invariants_catch_unmarked_garbage():
    t, dead = replaced_leaf()
    dead.marked = False
    assert any("unreachable" in v for v in violations_of(t))


def test_invariants_catch_frozen_link_change():
    t, dead = replaced_leaf()
    dead.right = dead.replaced_by[-1]
    bad = violations_of(t)
    assert any("links changed" in v or "replacement" in v for v in bad)


def test_invariants_catch_depth_skew():
    t = healthy_tree()
    root = t.entry.children[0]
    wrapped = root.children[0]
    shim = InternalNode((), [wrapped], False, route_key=wrapped.route_key)
    root.children[0] = shim
    assert any("depth" in v for v in violations_of(t))


def test_record_history_shape():
    ops = record_history(threads=3, ops_per_thread=5, seed=1)
    assert len(ops) == 15
    by_thread = {}
    for o in ops:
        assert o.ret >= o.invoke
        assert o.op in ("insert", "delete", "find", "scan")
        if o.op == "scan":
            assert isinstance(o.result, tuple)
        prev = by_thread.get(o.thread)
        if prev is not None:
            assert o.invoke >= prev, "per-thread order must follow invocation"
        by_thread[o.thread] = o.invoke


def lin(*ops):
    return check_linearizable(list(ops))


def test_linearizable_sequential_history():
    ok, witness = lin(
        Operation(0, "insert", (1, "a"), None, 0, 10),
        Operation(0, "find", (1,), "a", 20, 30),
        Operation(0, "scan", (1, 3), ("a",), 40, 50),
        Operation(0, "delete", (1,), "a", 60, 70))
    assert ok and len(witness) == 4


def test_linearizable_requires_reordering_overlaps():
    # the find returned before the insert did; the order that explains both
    # results is insert first, so the checker must use invocation overlap
    ok, witness = lin(
        Operation(0, "insert", (1, "a"), None, 0, 100),
        Operation(1, "find", (1,), "a", 10, 20))
    assert ok
    assert [o.op for o in witness] == ["insert", "find"]


def test_linearizability_respects_real_time_order():
    # non-overlapping: the find completed before the insert began, so no
    # legal order lets it see the value
    ok, why = lin(
        Operation(0, "find", (1,), "a", 0, 10),
        Operation(1, "insert", (1, "a"), None, 20, 30))
    assert not ok and "no sequential order" in why


def test_linearizability_rejects_stale_read():
    ok, _ = lin(
        Operation(0, "insert", (1, "a"), None, 0, 10),
        Operation(0, "delete", (1,), "a", 20, 30),
        Operation(1, "find", (1,), "a", 40, 50))
    assert not ok


def test_linearizability_rejects_torn_scan():
    # keys 1 and 2 were both live from t=40 on; a scan that starts after
    # that and sees only key 2 cannot be explained
    ok, _ = lin(
        Operation(0, "insert", (1, "a"), None, 0, 10),
        Operation(0, "insert", (2, "b"), None, 20, 30),
        Operation(1, "scan", (1, 3), ("b",), 40, 50))
    assert not ok


def test_linearizability_size_guard():
    ops = [Operation(0, "find", (1,), None, i * 10, i * 10 + 5)
           for i in range(41)]
    with pytest.raises(ValueError):
        check_linearizable(ops)


def test_recorded_histories_linearizable():
    for seed in range(6):
        history = record_history(threads=3, ops_per_thread=6, seed=seed)
        ok, info = check_linearizable(history)
        assert ok, info


def test_pause_hooks():
    fired = []
    instrument.set_hook("update_stamp", fired.append)
    try:
        t = ABTreeMap(2, 4)
        t.insert(1, 1)
        assert fired == ["update_stamp"]
        instrument.set_hook("update_stamp", None)
        t.insert(2, 2)
        assert fired == ["update_stamp"]
    finally:
        instrument.clear_hooks()


def test_race_scenarios_pass():
    assert run_race_scenarios(6) == []

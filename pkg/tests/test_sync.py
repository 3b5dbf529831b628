"""Queue lock behavior and the leaf modification counter protocol."""

import sys
import threading
import time

import pytest

from vabtree.core import LeafNode
from vabtree.sync import QueueLock, begin_modify, end_modify


def test_mutual_exclusion_under_contention():
    lock = QueueLock()
    box = [0]
    per_thread = 2500
    threads = 8

    def worker():
        for _ in range(per_thread):
            g = lock.acquire()
            tmp = box[0]
            for _ in range(3):  # widen the read-modify-write window
                pass
            box[0] = tmp + 1
            lock.release(g)

    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-5)
    try:
        ts = [threading.Thread(target=worker) for _ in range(threads)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
    finally:
        sys.setswitchinterval(old)
    assert box[0] == per_thread * threads


def test_fifo_handoff_order():
    lock = QueueLock()
    lock._trace = []
    served = []
    gates = [threading.Event() for _ in range(5)]

    def worker(i):
        gates[i].wait()
        g = lock.acquire()
        served.append(threading.get_ident())
        lock.release(g)

    main_guard = lock.acquire()
    ts = [threading.Thread(target=worker, args=(i,)) for i in range(5)]
    for t in ts:
        t.start()
    # admit the waiters into the queue one at a time so the enqueue order
    # is fully determined, then let the lock drain
    for i in range(5):
        gates[i].set()
        deadline = time.monotonic() + 5
        while len(lock._trace) < i + 2:
            assert time.monotonic() < deadline, "waiter never enqueued"
            time.sleep(0.001)
    lock.release(main_guard)
    for t in ts:
        t.join()
    assert served == lock._trace[1:]


def test_try_acquire_never_waits():
    lock = QueueLock()
    g = lock.try_acquire()
    assert g is not None
    assert lock.locked()
    assert lock.try_acquire() is None

    result = []
    t = threading.Thread(target=lambda: result.append(lock.try_acquire()))
    t.start()
    t.join(5)
    assert result == [None]

    lock.release(g)
    assert not lock.locked()
    g2 = lock.try_acquire()
    assert g2 is not None
    lock.release(g2)


def test_waiter_parks_and_wakes_after_long_hold():
    lock = QueueLock()
    g = lock.acquire()
    got = threading.Event()

    def worker():
        g2 = lock.acquire()
        got.set()
        lock.release(g2)

    t = threading.Thread(target=worker)
    t.start()
    time.sleep(0.08)  # long past the spin budget: the waiter must be parked
    assert not got.is_set()
    lock.release(g)
    assert got.wait(5)
    t.join(5)
    assert not t.is_alive()


def test_release_requires_owner():
    lock = QueueLock()
    guard_box = []
    t = threading.Thread(target=lambda: guard_box.append(lock.acquire()))
    t.start()
    t.join(5)
    with pytest.raises(AssertionError):
        lock.release(guard_box[0])


def test_modification_counter_parity():
    leaf = LeafNode(4, route_key=1)
    assert leaf.version % 2 == 0
    before = leaf.version
    begin_modify(leaf)
    assert leaf.version == before + 1
    end_modify(leaf)
    assert leaf.version == before + 2

    with pytest.raises(AssertionError):
        end_modify(leaf)  # not inside a modification
    begin_modify(leaf)
    with pytest.raises(AssertionError):
        begin_modify(leaf)  # already inside one

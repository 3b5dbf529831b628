"""Queue lock and the leaf modification counter protocol.

The node lock is an MCS-style queue lock: waiters form a FIFO queue, each
blocks on its own flag, and release hands the lock to the successor directly.
This keeps lock handoff fair under contention regardless of scheduler order
(``threading.Lock`` makes no fairness promise).

CPython notes. Attribute loads/stores are atomic under the GIL, so waiters
can read their own ``ready`` flag without a barrier. The swap of the queue
tail must be a single atomic step, which plain Python cannot express, so it
runs inside a tiny internal mutex; the mutex is held for two or three
bytecodes and never while waiting. Waiters spin briefly on their flag and
then park on a per-waiter ``Event`` because busy-waiting on a single-core
host just burns the holder's scheduler quantum.
"""

import threading
import time
from typing import Optional

_SPIN_LIMIT = 32


class LockGuard:
    """Per-acquisition queue record. Returned by acquire, consumed by release."""

    __slots__ = ("ready", "next", "event", "owner")

    def __init__(self) -> None:
        self.ready = False
        self.next: Optional["LockGuard"] = None
        self.event: Optional[threading.Event] = None
        self.owner = threading.get_ident()


class QueueLock:
    """FIFO queue lock with local waiting.

    ``acquire`` returns a :class:`LockGuard` that must be passed back to
    ``release``. ``try_acquire`` returns the guard or ``None`` without ever
    waiting. ``holder`` is the thread ident of the current owner (for
    diagnostics and misuse checks only; never used for synchronization).
    """

    __slots__ = ("_tail", "_meta", "holder", "_trace")

    def __init__(self) -> None:
        self._tail: Optional[LockGuard] = None
        self._meta = threading.Lock()
        self.holder: Optional[int] = None
        # Tests may set this to a list; enqueue idents are appended inside
        # the swap critical section so the recorded order is the true order.
        self._trace: Optional[list] = None

    def acquire(self) -> LockGuard:
        guard = LockGuard()
        with self._meta:
            pred = self._tail
            self._tail = guard
            if self._trace is not None:
                self._trace.append(guard.owner)
        if pred is None:
            self.holder = guard.owner
            return guard
        pred.next = guard
        spins = 0
        while not guard.ready:
            if spins < _SPIN_LIMIT:
                spins += 1
                continue
            if guard.event is None:
                # Publish the event, then re-check: the releaser may have
                # set ready between our check and the publication.
                ev = threading.Event()
                guard.event = ev
                if guard.ready:
                    break
            guard.event.wait(0.05)
        self.holder = guard.owner
        return guard

    def try_acquire(self) -> Optional[LockGuard]:
        guard = LockGuard()
        with self._meta:
            if self._tail is not None:
                return None
            self._tail = guard
            if self._trace is not None:
                self._trace.append(guard.owner)
        self.holder = guard.owner
        return guard

    def release(self, guard: LockGuard) -> None:
        assert self.holder == threading.get_ident(), "release by non-holder"
        self.holder = None
        if guard.next is None:
            with self._meta:
                if self._tail is guard:
                    self._tail = None
                    return
            # A successor swapped itself in but has not linked yet; its link
            # write is imminent, so spin for it (bounded by one bytecode gap).
            while guard.next is None:
                time.sleep(0)
        nxt = guard.next
        nxt.ready = True
        ev = nxt.event
        if ev is not None:
            ev.set()

    def locked(self) -> bool:
        return self.holder is not None


def begin_modify(leaf) -> None:
    """Open a modification window: flip the leaf's counter to odd.

    Caller must hold the leaf's lock. Optimistic readers that observe an odd
    counter (or a counter change) discard what they read and retry.
    """
    ver = leaf.version
    assert ver & 1 == 0, "modification window already open"
    leaf.version = ver + 1


def end_modify(leaf) -> None:
    """Close the window opened by :func:`begin_modify` (counter back to even)."""
    ver = leaf.version
    assert ver & 1 == 1, "no modification window open"
    leaf.version = ver + 1

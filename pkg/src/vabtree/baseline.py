"""Coarse-grained reference structure for relative benchmark sanity.

One lock around a dict plus a sorted key list. Same operation contracts as
the tree (insert keeps an existing live value, scans return values in key
order), so the benchmark harness and the sequential tests can drive either.
"""

import threading
from bisect import bisect_left, bisect_right, insort
from typing import Any, List


class GlobalLockSortedMap:
    """Sorted map under a single mutex; the simplest correct competitor."""

    def __init__(self, **_ignored) -> None:
        self._lock = threading.Lock()
        self._data: dict = {}
        self._order: List[Any] = []

    def find(self, key) -> Any:
        with self._lock:
            return self._data.get(key)

    def insert(self, key, value) -> Any:
        if value is None:
            raise ValueError("None is reserved and cannot be stored as a value")
        with self._lock:
            existing = self._data.get(key)
            if existing is not None:
                return existing
            self._data[key] = value
            insort(self._order, key)
            return None

    def delete(self, key) -> Any:
        with self._lock:
            existing = self._data.pop(key, None)
            if existing is not None:
                i = bisect_left(self._order, key)
                del self._order[i]
            return existing

    def scan(self, low, high) -> List[Any]:
        if low > high:
            raise ValueError("scan bounds out of order")
        with self._lock:
            lo = bisect_left(self._order, low)
            hi = bisect_right(self._order, high)
            return [self._data[k] for k in self._order[lo:hi]]

    def approximate_size(self) -> int:
        with self._lock:
            return len(self._data)

    def items(self):
        with self._lock:
            return [(k, self._data[k]) for k in self._order]

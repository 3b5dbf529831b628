"""Version store: global version, per-key value cells, ongoing-scan table.

Versioning model
----------------
A single global version counter starts at 1. Updates do a plain read of it
and try to publish that number into their value cell with a compare-and-swap
from 0 (0 means "assignment pending"). Scans fetch-and-increment it, so the
counter only moves when scans run. Because a pending cell or a pending scan
can stall, both sides help: scans (and anyone else reading a cell) stamp a
pending cell with a fresh counter read, and key compaction stamps pending
scans before computing the minimum ongoing scan version.

Each cell keeps its overwritten (value, version) pairs in a per-cell history
so a scan pinned at version v can still read the value that was current at v.
Logical deletion stores BOTTOM (rendered as None) as the latest value with a
fresh version; the key stays physically present until compaction proves no
ongoing scan still needs it.

CPython notes. Cell and scan-slot CASes run under one module-level mutex
(they are rare relative to reads); the counter has its own. Plain reads of
``latest_value``/``latest_version``/slots are single attribute loads, atomic
under the GIL. Per-cell histories are single-writer (the leaf lock holder)
append-or-replace-last lists read via bisect; the writer orders its stores so
a reader that has observed a newer latest value always finds the pairs it
needs fully archived (see put_new_value).
"""

import threading
from bisect import bisect_right
from typing import Any, List, Optional

from .instrument import pause

INFINITY = float("inf")


class _NoEntry:
    __slots__ = ()

    def __repr__(self) -> str:  # pragma: no cover
        return "NO_ENTRY"


#: Returned by help_and_get_value_by_version when the cell has no version <= v
#: (the key was first installed after v). Distinct from a stored-then-deleted
#: BOTTOM, which reads back as None.
NO_ENTRY = _NoEntry()

# One mutex for every version CAS in the process. Contention on it is tiny:
# each update CASes once, each scan once, helpers only on actual races.
_cas_lock = threading.Lock()


class GlobalVersion:
    """Monotone version counter; starts at 1 so 0 can mean "pending"."""

    __slots__ = ("_value", "_lock")

    def __init__(self) -> None:
        self._value = 1
        self._lock = threading.Lock()

    def read(self) -> int:
        return self._value

    def fetch_and_increment(self) -> int:
        with self._lock:
            v = self._value
            self._value = v + 1
            return v


class ValueCell:
    """Latest (value, version) for one key plus the overwritten history.

    ``latest_version`` 0 means the stamp for ``latest_value`` is pending.
    The history is a pair of parallel lists (strictly increasing versions,
    matching values). Versions repeat across overwrites only when no scan ran
    between them, in which case the newer value replaces the older in place:
    a scan pinned at that version must see the newest of the tied updates.
    """

    __slots__ = ("key", "latest_value", "latest_version",
                 "hist_versions", "hist_values")

    def __init__(self, key) -> None:
        self.key = key
        self.latest_value: Any = None
        self.latest_version = 0
        self.hist_versions: List[int] = []
        self.hist_values: List[Any] = []

    def cas_latest_version(self, expected: int, new: int) -> bool:
        with _cas_lock:
            if self.latest_version == expected:
                self.latest_version = new
                return True
            return False

    def __repr__(self) -> str:  # pragma: no cover
        return "ValueCell(key=%r, latest=%r@%r, history=%r)" % (
            self.key, self.latest_value, self.latest_version,
            list(zip(self.hist_versions, self.hist_values)))


class ScanData:
    """Published bounds and version of one ongoing scan (version 0 = pending)."""

    __slots__ = ("low", "high", "version")

    def __init__(self, low, high) -> None:
        self.low = low
        self.high = high
        self.version = 0

    def cas_version(self, expected: int, new: int) -> bool:
        with _cas_lock:
            if self.version == expected:
                self.version = new
                return True
            return False


class OngoingScans:
    """Fixed array of scan slots, one per registered thread.

    Threads register lazily on first use and keep their slot for the life of
    the structure. The array is sized at construction (default 128); running
    more scanning threads than slots against one structure raises, resizing
    under concurrent readers is out of scope.
    """

    __slots__ = ("slots", "_tls", "_next", "_lock")

    def __init__(self, capacity: int = 128) -> None:
        self.slots: List[Optional[ScanData]] = [None] * capacity
        self._tls = threading.local()
        self._next = 0
        self._lock = threading.Lock()

    def thread_slot(self) -> int:
        try:
            return self._tls.slot
        except AttributeError:
            pass
        with self._lock:
            slot = self._next
            if slot >= len(self.slots):
                raise RuntimeError(
                    "scan slot table exhausted (%d registered threads)" % slot)
            self._next = slot + 1
        self._tls.slot = slot
        return slot

    def publish(self, slot: int, scan: Optional[ScanData]) -> None:
        self.slots[slot] = scan


def new_version(gv: GlobalVersion, scan: ScanData) -> int:
    """Assign the scan its version; returns the one that actually stuck.

    The scan must already be published, so compaction can help a stalled
    caller between these two steps. Exactly one assignment wins the CAS.
    """
    my = gv.fetch_and_increment()
    if scan.cas_version(0, my):
        return my
    return scan.version


def put_new_value(cell: ValueCell, value, gv: GlobalVersion) -> None:
    """Archive the cell's latest pair and install ``value`` with version pending.

    Caller must hold the leaf lock and have a modification window open. A
    still-pending previous stamp is helped first (fresh counter read), so the
    archived pair always carries a real version. Store order matters for
    lock-free readers: the archived pair is fully written before
    ``latest_version`` drops to 0 and before ``latest_value`` changes, so any
    reader that observed the newer latest finds the history complete.
    """
    if cell.latest_version == 0:
        cell.cas_latest_version(0, gv.read())
    ver = cell.latest_version
    assert ver != 0
    hv = cell.hist_versions
    if hv and hv[-1] == ver:
        # Same version as the previous archive: no scan ran between the two
        # updates, so the older pair can never be observed distinctly.
        cell.hist_values[-1] = cell.latest_value
    else:
        # Value first: a reader that bisects to a version must find its value.
        cell.hist_values.append(cell.latest_value)
        hv.append(ver)
    cell.latest_version = 0
    cell.latest_value = value


def help_and_get_value_by_version(cell: ValueCell, version, gv: GlobalVersion):
    """Value of ``cell`` as of ``version`` (helping a pending stamp first).

    Returns NO_ENTRY when the cell's oldest version is already above
    ``version``. Wait-free: the loop re-runs only when the cell advances an
    episode between the version read and the value read, and any episode that
    begins after our caller's scan got its version stamps above it.
    """
    while True:
        ver = cell.latest_version
        if ver == 0:
            cell.cas_latest_version(0, gv.read())
            ver = cell.latest_version
            if ver == 0:
                continue
        if ver <= version:
            value = cell.latest_value
            if cell.latest_version == ver:
                return value
            continue
        idx = bisect_right(cell.hist_versions, version) - 1
        if idx < 0:
            return NO_ENTRY
        return cell.hist_values[idx]


def min_ongoing_scan_version(osa: OngoingScans, gv: GlobalVersion):
    """Minimum version over published scans, stamping pending ones first.

    Pending scans are helped exactly as they would help themselves: a
    fetch-and-increment, then a CAS that may lose to the scan's own. Returns
    INFINITY when no scan is published.
    """
    lowest = INFINITY
    for scan in osa.slots:
        if scan is None:
            continue
        ver = scan.version
        if ver == 0:
            pause("clean_help")
            fresh = gv.fetch_and_increment()
            if scan.cas_version(0, fresh):
                ver = fresh
            else:
                ver = scan.version
        if ver < lowest:
            lowest = ver
    return lowest

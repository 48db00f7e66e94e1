"""Record/replay of non-deterministic operations.

The primary records, for every sanitized call, a (task, operation, count,
metadata) tuple into a single per-view sequence; backups consume the tuples
through per-operation queues, returning control to a task only when its tuple
is at the head of the queue for that operation.  Three operation families are
instantiated: mutex claims/releases, clock readings (a virtual group clock
that stays monotone across failover), and socket call outcomes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .wire import (
    MutexOrder,
    OpMeta,
    OrderEntry,
    OrderType,
    SocketOp,
    SocketOrder,
    TimeOrder,
)

# status codes carried in operation metadata
OK = 0
ERR_BUSY = 16          # mutex already held
ERR_WOULD_BLOCK = 11   # nothing to read / write refused


def op_key(entry: OrderEntry):
    """Operation identifier of a replay-queued entry."""
    b = entry.body
    if entry.order_type == OrderType.MUTEX_ORDER:
        return ("mutex", b.mutex)
    if entry.order_type == OrderType.TIME_ORDER:
        return ("clock", b.clock)
    if entry.order_type == OrderType.SOCKET_ORDER:
        return ("sock", b.sock_fd)
    raise ValueError("not a replayable operation: %s" % entry.order_type)


class Recorder:
    """Primary-side tuple factory: per-(task, op) counts and a per-view,
    consecutively numbered entry sequence."""

    def __init__(self, group_id: int = 0, view: int = 1, next_seq: int = 1):
        self.group_id = group_id
        self.view = view
        self.next_seq = next_seq
        self.counts: dict = {}

    def begin_view(self, view: int):
        self.view = view
        self.next_seq = 1
        self.counts = {}

    def resume(self, view: int, next_seq: int, counts: dict):
        self.view = view
        self.next_seq = next_seq
        self.counts = dict(counts)

    def take_seq(self) -> int:
        seq = self.next_seq
        self.next_seq += 1
        return seq

    def next_count(self, task: int, okey) -> int:
        n = self.counts.get((task, okey), 0) + 1
        self.counts[(task, okey)] = n
        return n

    def _entry(self, order_type: OrderType, body) -> OrderEntry:
        return OrderEntry(order_type, self.group_id, self.view,
                          self.take_seq(), body)

    def record_mutex(self, task: int, mutex: int, meta: OpMeta) -> OrderEntry:
        n = self.next_count(task, ("mutex", mutex))
        return self._entry(OrderType.MUTEX_ORDER, MutexOrder(task, mutex, n, meta))

    def record_clock(self, task: int, clock: int, value: int) -> OrderEntry:
        n = self.next_count(task, ("clock", clock))
        return self._entry(OrderType.TIME_ORDER,
                           TimeOrder(task, clock, n, OpMeta(OK, (value,))))

    def record_socket(self, task: int, sock_fd: int, op: SocketOp,
                      meta: OpMeta) -> OrderEntry:
        n = self.next_count(task, ("sock", sock_fd))
        return self._entry(OrderType.SOCKET_ORDER,
                           SocketOrder(task, sock_fd, op, n, meta))

    def record_body(self, order_type: OrderType, body) -> OrderEntry:
        """Message orders and view-change markers share the sequence."""
        return self._entry(order_type, body)


def record_at_primary(rec: Recorder, task: int, okey, execute):
    """Run the underlying effectful call and append its tuple.

    `okey` is ("mutex", id), ("clock", id) or ("sock", fd, SocketOp); the
    call's error status is captured into the metadata, never raised.
    Returns (meta, entry).
    """
    meta = execute()
    kind, oid = okey[0], okey[1]
    if kind == "mutex":
        entry = rec.record_mutex(task, oid, meta)
    elif kind == "clock":
        entry = rec.record_clock(task, oid, meta.values[0])
    else:
        entry = rec.record_socket(task, oid, okey[2], meta)
    return meta, entry


@dataclass
class ReplayQueues:
    """Backup-side per-operation queues of pending tuples."""

    per_op: dict = field(default_factory=dict)   # okey -> deque[OrderEntry]
    blocked: dict = field(default_factory=dict)  # okey -> set of task ids
    counts: dict = field(default_factory=dict)   # (task, okey) -> consumed n

    def ingest(self, entry: OrderEntry):
        """Append a tuple; returns the task now at the head of its queue."""
        okey = op_key(entry)
        q = self.per_op.get(okey)
        if q is None:
            q = self.per_op[okey] = deque()
        q.append(entry)
        return q[0].body.task

    def next_count(self, task: int, okey) -> int:
        return self.counts.get((task, okey), 0) + 1

    def head_matches(self, task: int, okey) -> bool:
        """True when (task, next-count) is the head tuple for the operation."""
        q = self.per_op.get(okey)
        if not q:
            return False
        head = q[0].body
        return head.task == task and head.count == self.next_count(task, okey)

    def consume(self, task: int, okey) -> OrderEntry:
        """Pop the head tuple; caller must have checked head_matches()."""
        entry = self.per_op[okey].popleft()
        assert entry.body.task == task
        self.counts[(task, okey)] = entry.body.count
        return entry

    def head(self, okey):
        q = self.per_op.get(okey)
        return q[0] if q else None

    def pending_entries(self):
        for q in self.per_op.values():
            yield from q

    def snapshot(self):
        return {
            "counts": {"%d/%s/%s" % (t, k[0], k[1]): n
                       for (t, k), n in self.counts.items()},
        }


@dataclass
class VirtualGroupClock:
    """Group-wide monotone clock: replicas track an offset to their local
    physical clock so a promoted backup continues the group's time."""

    offset: int = 0
    last_issued: int = 0
    inherited: bool = False   # promoted from backup: apply the offset

    def read_at_primary(self, local_physical: int) -> int:
        value = local_physical + (self.offset if self.inherited else 0)
        value = max(value, self.last_issued)
        self.last_issued = value
        return value

    def replay_at_backup(self, value: int, local_physical: int) -> int:
        self.offset = value - local_physical
        self.last_issued = max(self.last_issued, value)
        return value

    def promote(self):
        self.inherited = True


class EntryStream:
    """Reassembles the primary's per-view entry sequence from piggybacked
    fragments arriving out of order and with duplicates."""

    def __init__(self, view: int = 1, next_seq: int = 1):
        self.view = view
        self.next_seq = next_seq
        self.pending: dict = {}     # (view, seq) -> OrderEntry

    def offer(self, entry: OrderEntry):
        """Buffer an entry; returns the list of now-consumable entries, in
        sequence order.  Entries for older views or already-consumed sequence
        numbers are dropped as duplicates."""
        if entry.view < self.view or (
                entry.view == self.view and entry.order_seq < self.next_seq):
            return []
        self.pending.setdefault((entry.view, entry.order_seq), entry)
        out = []
        while (self.view, self.next_seq) in self.pending:
            out.append(self.pending.pop((self.view, self.next_seq)))
            self.next_seq += 1
        return out

    def drain_ready(self):
        out = []
        while (self.view, self.next_seq) in self.pending:
            out.append(self.pending.pop((self.view, self.next_seq)))
            self.next_seq += 1
        return out

    def switch_view(self, view: int, next_seq: int):
        self.view = view
        self.next_seq = next_seq
        self.pending = {k: v for k, v in self.pending.items() if k[0] >= view}

    def frontier(self):
        """Last contiguously available (view, seq)."""
        return (self.view, self.next_seq - 1)

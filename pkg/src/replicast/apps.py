"""Built-in applications driven by the replica engine.

An application handle must be deterministic given the same delivered message
sequence and the same sanitized-operation metadata; everything else (timers,
randomness, clocks) reaches it through the engine.  Three apps ship with the
package: a key-value counter service, a request-generating workload client,
and a multi-task app that exercises mutex, clock and socket non-determinism.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .determinizer import ERR_BUSY, ERR_WOULD_BLOCK, OK
from .wire import OpMeta, SocketOp


def _digest(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class CounterApp:
    """Replicated key-value counter: requests add to a key, replies echo the
    new value."""

    def __init__(self, params=None, trace=None):
        self.kv = {}
        self.handled = []          # request ids, delivery order
        self._last_delta = None

    def on_deliver(self, source_group, payload: bytes):
        req = json.loads(payload)
        key = req["key"]
        self.kv[key] = self.kv.get(key, 0) + req.get("inc", 1)
        self.handled.append(req["id"])
        self._last_delta = {"key": key, "value": self.kv[key],
                            "id": req["id"]}
        reply = {"id": req["id"], "key": key, "value": self.kv[key]}
        return [json.dumps(reply).encode()]

    def take_update(self):
        delta, self._last_delta = self._last_delta, None
        return delta

    def apply_update(self, delta):
        self.kv[delta["key"]] = delta["value"]
        self.handled.append(delta["id"])

    def checkpoint(self):
        return {"kv": dict(self.kv), "handled": list(self.handled)}

    def restore(self, state):
        self.kv = dict(state["kv"])
        self.handled = list(state["handled"])

    def digest(self) -> str:
        return _digest({"kv": self.kv, "n": len(self.handled)})


class WorkloadApp:
    """Client side: originates a fixed number of requests and tracks replies."""

    def __init__(self, params=None, trace=None):
        params = params or {}
        self.group = params.get("group", 0)
        self.total = int(params.get("requests", 10))
        self.keys = int(params.get("keys", 3))
        self.issued = 0
        self.answered = set()
        self.trace = trace or (lambda kind, **kw: None)

    def next_request(self):
        if self.issued >= self.total:
            return None
        self.issued += 1
        rid = "g%d-%d" % (self.group, self.issued)
        req = {"id": rid, "key": "k%d" % (self.issued % self.keys), "inc": 1}
        return json.dumps(req).encode()

    def on_deliver(self, source_group, payload: bytes):
        reply = json.loads(payload)
        if reply["id"] not in self.answered:
            self.answered.add(reply["id"])
            self.trace("answered", req=reply["id"])
        return []

    def take_update(self):
        return {"issued": self.issued, "answered": sorted(self.answered)}

    def apply_update(self, delta):
        self.issued = delta["issued"]
        self.answered = set(delta["answered"])

    def checkpoint(self):
        return self.take_update()

    def restore(self, state):
        self.apply_update(state)

    def digest(self) -> str:
        return _digest(self.checkpoint())

    def done(self) -> bool:
        return self.issued >= self.total and len(self.answered) >= self.total


# --- multi-task demo ---------------------------------------------------------

QMTX = 1    # guards the work queue
SMTX = 2    # guards the shared total
POLL_FD = 0  # the work queue's descriptor; reply writes use the client group id

# task program counters
PC_POLL, PC_CLOCK, PC_TRY_Q, PC_POP, PC_UNLOCK_Q, PC_TRY_S, \
    PC_UNLOCK_S, PC_WRITE = range(8)


@dataclass
class TaskState:
    tid: int
    pc: int = PC_POLL
    misses: int = 0
    done_items: int = 0
    last_clock: int = 0
    item: dict | None = None
    reply_val: int = 0


class TaskDemoApp:
    """Several logical tasks pull work items from a shared queue under a
    mutex, read the group clock, update a shared total under a second mutex,
    and push replies through a nonblocking write that may fail and retry.

    At the primary the engine steps the tasks and records every sanitized
    call; at a backup the recorded tuples drive the tasks instead.  All state
    transitions are pure functions of the tuple metadata, so primary and
    backups move through identical states.
    """

    def __init__(self, params=None, trace=None):
        params = params or {}
        n = int(params.get("tasks", 3))
        self.fail_rate = float(params.get("write_fail", 0.0))
        self.tasks = [TaskState(tid) for tid in range(1, n + 1)]
        self.queue = []            # work items, delivery order
        self.shared_total = 0
        self.held = {}             # mutex id -> tid
        self.replies_sent = 0

    # -- delivery (both roles; ordered by the engine) --

    def on_deliver(self, source_group, payload: bytes):
        req = json.loads(payload)
        req["_from"] = source_group
        self.queue.append(req)
        return []

    # -- primary-side stepping --

    def has_work(self) -> bool:
        return bool(self.queue) or any(t.pc != PC_POLL for t in self.tasks)

    def step_primary(self, ops, rng, burst: int = 8):
        """Advance tasks by up to `burst` sanitized calls; the scheduling
        choice is free at the primary (and is what gets recorded)."""
        for _ in range(burst):
            runnable = [t for t in self.tasks
                        if t.pc != PC_POLL or self.queue]
            if not runnable:
                return
            self._exec_primary(runnable[rng.randrange(len(runnable))],
                               ops, rng)

    def _exec_primary(self, t: TaskState, ops, rng):
        if t.pc == PC_POLL:
            n = len(self.queue)
            meta = OpMeta(OK, (n, 1, 0)) if n else OpMeta(ERR_WOULD_BLOCK)
            ops.record_socket(t.tid, POLL_FD, SocketOp.SELECT_POLL, meta)
            self._apply_poll(t, meta)
        elif t.pc == PC_CLOCK:
            self._apply_clock(t, ops.record_clock(t.tid))
        elif t.pc in (PC_TRY_Q, PC_TRY_S):
            mid = QMTX if t.pc == PC_TRY_Q else SMTX
            meta = OpMeta(OK) if mid not in self.held else OpMeta(ERR_BUSY)
            ops.record_mutex(t.tid, mid, meta)
            self._apply_trylock(t, mid, meta)
            if t.pc == PC_POP:
                self._apply_pop(t)
        elif t.pc in (PC_UNLOCK_Q, PC_UNLOCK_S):
            mid = QMTX if t.pc == PC_UNLOCK_Q else SMTX
            ops.record_mutex(t.tid, mid, OpMeta(OK))
            self._apply_unlock(t, mid)
        elif t.pc == PC_WRITE:
            fail = rng.random() < self.fail_rate
            ok = ops.task_write(t.tid, t.item["_from"],
                                self._reply_payload(t), fail=fail)
            self._apply_write(
                t, OpMeta(OK) if ok else OpMeta(ERR_WOULD_BLOCK))

    # -- backup-side replay --

    def try_progress(self, ops) -> bool:
        """Consume whatever tuples sit at their per-operation queue heads.
        Returns True if anything advanced."""
        progressed, again = False, True
        while again:
            again = False
            for t in self.tasks:
                okey, opdesc = self._next_okey(t)
                if okey is None:
                    continue
                if opdesc == "lock":
                    head = ops.peek(t.tid, okey)
                    if head is not None and head.meta.status == OK \
                            and self.held.get(okey[1], t.tid) != t.tid:
                        continue    # real claim would block until released
                entry = ops.try_consume(t.tid, okey)
                if entry is None:
                    continue
                self._apply_backup(t, okey, opdesc, entry, ops)
                progressed = again = True
        return progressed

    def _next_okey(self, t: TaskState):
        if t.pc == PC_POLL:
            return ("sock", POLL_FD), "poll"
        if t.pc == PC_CLOCK:
            return ("clock", 0), "clock"
        if t.pc in (PC_TRY_Q, PC_TRY_S):
            return ("mutex", QMTX if t.pc == PC_TRY_Q else SMTX), "lock"
        if t.pc in (PC_UNLOCK_Q, PC_UNLOCK_S):
            return ("mutex", QMTX if t.pc == PC_UNLOCK_Q else SMTX), "unlock"
        if t.pc == PC_WRITE:
            return ("sock", t.item["_from"]), "write"
        return None, None          # PC_POP runs without a tuple

    def _apply_backup(self, t, okey, opdesc, entry, ops):
        meta = entry.body.meta
        if opdesc == "poll":
            self._apply_poll(t, meta)
        elif opdesc == "clock":
            self._apply_clock(t, meta.values[0])
        elif opdesc == "lock":
            self._apply_trylock(t, okey[1], meta)
            if t.pc == PC_POP:
                self._apply_pop(t)
        elif opdesc == "unlock":
            self._apply_unlock(t, okey[1])
        elif opdesc == "write":
            if meta.status == OK:
                ops.queue_outbound(t.item["_from"], self._reply_payload(t))
            self._apply_write(t, meta)

    # -- shared transitions (identical at primary and backups) --

    def _apply_poll(self, t, meta):
        t.pc = PC_CLOCK if meta.status == OK else PC_POLL

    def _apply_clock(self, t, value):
        t.last_clock = value
        t.pc = PC_TRY_Q

    def _apply_trylock(self, t, mid, meta):
        if meta.status == OK:
            self.held[mid] = t.tid
            if mid == QMTX:
                t.pc = PC_POP
            else:
                # the shared update happens inside the critical section, so
                # the reply value is fixed by the mutex order alone
                self.shared_total += t.item.get("inc", 1) * 10 \
                    + t.last_clock % 7
                t.reply_val = self.shared_total
                t.pc = PC_UNLOCK_S
        else:
            t.misses += 1
            t.pc = PC_POLL if mid == QMTX else PC_TRY_S

    def _apply_pop(self, t):
        t.item = self.queue.pop(0) if self.queue else None
        t.pc = PC_UNLOCK_Q

    def _apply_unlock(self, t, mid):
        del self.held[mid]
        t.pc = (PC_TRY_S if t.item else PC_POLL) if mid == QMTX else PC_WRITE

    def _apply_write(self, t, meta):
        if meta.status == OK:
            t.done_items += 1
            self.replies_sent += 1
            t.item = None
            t.pc = PC_POLL
        # on failure stay at PC_WRITE and retry

    def _reply_payload(self, t) -> bytes:
        return json.dumps({"id": t.item["id"], "total": t.reply_val,
                           "clock": t.last_clock}).encode()

    # -- state transfer --

    def take_update(self):
        return self.checkpoint()

    def apply_update(self, delta):
        self.restore(delta)

    def checkpoint(self):
        return {
            "tasks": [[t.tid, t.pc, t.misses, t.done_items, t.last_clock,
                       t.item, t.reply_val] for t in self.tasks],
            "queue": list(self.queue),
            "total": self.shared_total,
            "held": {str(k): v for k, v in self.held.items()},
            "replies": self.replies_sent,
        }

    def restore(self, state):
        self.tasks = [TaskState(*row) for row in state["tasks"]]
        self.queue = list(state["queue"])
        self.shared_total = state["total"]
        self.held = {int(k): v for k, v in state["held"].items()}
        self.replies_sent = state["replies"]

    def digest(self) -> str:
        return _digest({
            "total": self.shared_total,
            "tasks": [[t.tid, t.misses, t.done_items, t.last_clock]
                      for t in self.tasks],
            "queued": [i["id"] for i in self.queue],
            "replies": self.replies_sent,
        })


APPS = {
    "counter": CounterApp,
    "workload": WorkloadApp,
    "taskdemo": TaskDemoApp,
}

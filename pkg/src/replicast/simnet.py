"""Seeded discrete-event simulation of processes over lossy UDP multicast.

The simulator owns the event queue, the fault schedule (crashes, partitions,
healing), the latency/loss model, and an omniscient ledger of who received
which message; the ledger backs the garbage-collection safety oracle.  A
message that keeps being retransmitted is eventually delivered: the k-th
transmission attempt towards a receiver is never dropped by the loss model.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field

from .membership import bootstrap_view
from .replica import EngineConfig, ReplicaEngine
from .wire import Message, encode

#: loss never eats this many attempts of the same message at one receiver
FORCED_DELIVERY_ATTEMPT = 20


class BudgetExceeded(Exception):
    def __init__(self, trace):
        super().__init__("event budget exhausted")
        self.trace = trace


@dataclass
class GroupSpec:
    name: str
    gid: int
    replicas: int = 1
    app: str = "counter"
    params: dict = field(default_factory=dict)
    bootstrap: str = "established"     # or "join"
    app_events: int = 0                # scheduled application step events
    app_start_us: int = 10_000
    app_period_us: int = 8_000
    join_stagger_us: int = 70_000


@dataclass
class SimConfig:
    seed: int = 1
    mode: str = "semi_active"
    loss: float = 0.0
    latency_us: tuple = (100, 500)
    duration_us: int = 400_000
    budget: int = 400_000
    drain: bool = True                 # wait for buffers to empty at the end
    stop_when_quiescent: bool = True
    duplicate_rate: float = 0.0
    groups: list = field(default_factory=list)
    faults: list = field(default_factory=list)   # (time_us, action, args)
    engine: EngineConfig = field(default_factory=EngineConfig)


class Trace:
    """Line-delimited record stream: (time_us, process, kind, fields)."""

    def __init__(self):
        self.records = []

    def append(self, t, proc, kind, fields):
        self.records.append((t, proc, kind, fields))

    def lines(self):
        for t, proc, kind, fields in self.records:
            yield json.dumps([t, proc, kind, fields], sort_keys=True)

    def sha(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path):
        with open(path, "w") as f:
            for line in self.lines():
                f.write(line + "\n")

    @classmethod
    def load(cls, path):
        tr = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                t, proc, kind, fields = json.loads(line)
                tr.records.append((t, proc, kind, fields))
        return tr

    def by_kind(self, kind):
        return [(t, proc, fields) for (t, proc, k, fields) in self.records
                if k == kind]


class _Services:
    """Per-process facade the engine talks through."""

    def __init__(self, sim, proc):
        self.sim = sim
        self.proc = proc
        self.rng = random.Random(sim.rng.randrange(2**63) ^ hash(proc.name))
        self.clock_skew = sim.rng.randrange(-2000, 2000)

    def now(self):
        return self.sim.now

    def physical_clock(self):
        return self.sim.now + self.clock_skew

    def schedule(self, delay_us, kind):
        self.sim.push(self.sim.now + delay_us, self.proc.name, (kind,))

    def multicast(self, msg: Message):
        self.sim.multicast(self.proc, msg)

    def trace(self, kind, /, **fields):
        self.sim.trace.append(self.sim.now, self.proc.name, kind, fields)

    def gc_check(self, conn_key, view, msn) -> bool:
        return self.sim.gc_check(self.proc, conn_key, view, msn)

    def ledger_note(self, header):
        if header.msg_seq:
            self.sim.ledger.setdefault(_app_ident(header), set()).add(
                self.proc.name)


class _Proc:
    def __init__(self, name, gid, group: GroupSpec):
        self.name = name
        self.gid = gid
        self.group = group
        self.alive = True
        self.engine = None


def _identity(h):
    return (int(h.msg_type), h.source_group, h.dest_group, h.conn_seq,
            int(h.role), h.view, h.precedence, h.msg_seq, h.ack_view, h.ack)


def _app_ident(h):
    return (h.source_group, h.dest_group, h.conn_seq, h.view, h.msg_seq)


class Simulator:
    def __init__(self, cfg: SimConfig):
        from .apps import APPS
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.now = 0
        self.seq = 0
        self.heap = []
        self.trace = Trace()
        self.ledger = {}               # (src,dst,conn,view,msn) -> receivers
        self.attempts = {}             # (identity, receiver) -> count
        self.partition = None          # list of sets of proc names
        self.procs = {}
        self.events_processed = 0
        self.net_in_flight = 0

        for g in cfg.groups:
            for i in range(g.replicas):
                name = "%s:%d" % (g.name, i)
                proc = _Proc(name, g.gid, g)
                self.procs[name] = proc
                sv = _Services(self, proc)
                params = dict(g.params)
                params["group"] = g.gid
                proc.engine = ReplicaEngine(
                    name, g.gid, APPS[g.app], sv, mode=cfg.mode,
                    config=cfg.engine, app_params=params)
        # start engines (after all exist, so bootstrap views agree)
        for g in cfg.groups:
            members = ["%s:%d" % (g.name, i) for i in range(g.replicas)]
            if g.bootstrap == "established":
                for i, name in enumerate(members):
                    proc = self.procs[name]
                    gv = bootstrap_view(
                        g.gid, [self.procs[m].engine.birth for m in members])
                    proc.engine.start(established=gv, precedence=i + 1)
            else:
                for i, name in enumerate(members):
                    self.push(i * g.join_stagger_us, name, ("start",))
            for i in range(g.app_events):
                t = g.app_start_us + i * g.app_period_us
                for name in members:
                    self.push(t, name, ("app",))
        for (t, action, args) in cfg.faults:
            self.push(t, "", ("fault", action, args))

    # ------------------------------------------------------------- mechanics

    def push(self, t, target, payload):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, target, payload))
        if payload[0] == "net" and payload[2] is not None:
            self.net_in_flight += 1      # application messages only

    def multicast(self, proc: _Proc, msg: Message):
        raw = encode(msg)
        h = msg.header
        ident = _identity(h)
        app_ident = _app_ident(h) if h.msg_seq else None
        self.trace.append(self.now, proc.name, "send", {
            "type": h.msg_type.name, "src": h.source_group,
            "dst": h.dest_group, "conn": h.conn_seq, "role": int(h.role),
            "view": h.view, "msn": h.msg_seq, "prec": h.precedence,
            "ts": h.timestamp, "bytes": raw.hex()})
        for name, p in self.procs.items():
            if p.gid != h.dest_group or name == proc.name:
                continue
            if not p.alive:
                continue
            if self._partitioned(proc.name, name):
                self.trace.append(self.now, name, "drop",
                                  {"reason": "partition",
                                   "type": h.msg_type.name})
                continue
            key = (ident, name)
            n = self.attempts.get(key, 0) + 1
            self.attempts[key] = n
            if n < FORCED_DELIVERY_ATTEMPT and self.cfg.loss > 0 \
                    and self.rng.random() < self.cfg.loss:
                self.trace.append(self.now, name, "drop",
                                  {"reason": "loss", "type": h.msg_type.name,
                                   "msn": h.msg_seq})
                continue
            delay = self.rng.randint(*self.cfg.latency_us)
            self.push(self.now + delay, name, ("net", raw, app_ident))
            if self.cfg.duplicate_rate and \
                    self.rng.random() < self.cfg.duplicate_rate:
                self.push(self.now + delay + self.rng.randint(50, 500),
                          name, ("net", raw, app_ident))

    def _partitioned(self, a, b) -> bool:
        if self.partition is None:
            return False
        side_a = side_b = None
        for i, side in enumerate(self.partition):
            if a in side:
                side_a = i
            if b in side:
                side_b = i
        return side_a != side_b

    def gc_check(self, proc: _Proc, conn_key, view, msn) -> bool:
        """No member of the destination group's authoritative membership may
        still be missing a garbage-collected message."""
        src, dst, conn_seq, role = conn_key
        receivers = self.ledger.get((src, dst, conn_seq, view, msn))
        if receivers is None:
            return True        # logged copy of a message never multicast
        missing = [n for n in self._authoritative_members(dst)
                   if n not in receivers]
        if missing:
            self.trace.append(self.now, proc.name, "gc_violation",
                              {"conn": list(conn_key), "view": view,
                               "msn": msn, "missing": missing})
            return False
        return True

    def _authoritative_members(self, gid):
        best = None
        for p in self.procs.values():
            if p.gid != gid or not p.alive:
                continue
            e = p.engine
            if not e.joined or e.gv is None:
                continue
            if e.is_primary():
                if best is None or e.my_precedence > best.my_precedence:
                    best = e
        if best is None:
            return [p.name for p in self.procs.values()
                    if p.gid == gid and p.alive and p.engine.joined]
        names = []
        for m in best.gv.members:
            proc = self.procs.get(m.birth.host_id)
            if proc is not None and proc.alive \
                    and proc.engine.birth == m.birth:
                names.append(m.birth.host_id)
        return names

    # ------------------------------------------------------------------ run

    def run(self):
        cfg = self.cfg
        next_quiescence_probe = 50_000
        while self.heap:
            t, _, target, payload = heapq.heappop(self.heap)
            if payload[0] == "net" and payload[2] is not None:
                self.net_in_flight -= 1
            if t > cfg.duration_us:
                self._finish("horizon")
                return self.trace
            self.now = max(self.now, t)
            self.events_processed += 1
            if self.events_processed > cfg.budget:
                self.trace.append(self.now, "", "budget_exceeded", {})
                self._finish("budget")
                raise BudgetExceeded(self.trace)

            if payload[0] == "fault":
                self._apply_fault(payload[1], payload[2])
                continue
            proc = self.procs.get(target)
            if proc is None or not proc.alive:
                continue
            if payload[0] == "start":
                proc.engine.start()
                continue
            if payload[0] == "net" and payload[2] is not None:
                self.ledger.setdefault(payload[2], set()).add(target)
            proc.engine.step(payload)

            if cfg.stop_when_quiescent and self.now >= next_quiescence_probe:
                next_quiescence_probe = self.now + 10_000
                if self._quiescent():
                    self._finish("quiescent")
                    return self.trace
        self._finish("drained")
        return self.trace

    def _apply_fault(self, action, args):
        if action == "crash":
            proc = self.procs[args]
            proc.alive = False
            self.trace.append(self.now, args, "crash", {})
        elif action == "partition":
            self.partition = [set(side) for side in args]
            self.trace.append(self.now, "", "partition",
                              {"sides": [sorted(s) for s in self.partition]})
        elif action == "heal":
            self.partition = None
            self.trace.append(self.now, "", "heal", {})

    def _quiescent(self) -> bool:
        if self.net_in_flight:
            return False
        primaries = {}
        for p in self.procs.values():
            if not p.alive:
                continue
            e = p.engine
            if not e.joined:
                return False
            if e.election is not None or e.recovery is not None \
                    or e.pending_change is not None \
                    or e.state_retx is not None or e.update_log:
                return False
            app = e.app
            if hasattr(app, "done") and not app.done():
                return False
            if hasattr(app, "has_work") and e.is_primary() and app.has_work():
                return False
            if e.is_primary():
                primaries[p.gid] = e
            for cs in e.conns.values():
                if cs.nacks or cs.paced_backlog:
                    return False
                if not cs.first_ack_stopped and cs.first_ack_msn > 0:
                    return False
                for entry in cs.sent.values():
                    if not entry.acked and not entry.logged_only:
                        return False
                if self.cfg.drain and (cs.sent or cs.delivered):
                    return False
        # every member must have executed the full ordered history
        for p in self.procs.values():
            if not p.alive or not p.engine.joined:
                continue
            e = p.engine
            lead = primaries.get(p.gid)
            if lead is None:
                return False
            if not e.is_primary():
                if e.consumed != lead.consumed \
                        or e.update_seq != lead.update_seq:
                    return False
        return True

    def _finish(self, reason):
        for p in self.procs.values():
            if p.alive and p.engine.joined:
                p.engine.finalize()
        self.trace.append(self.now, "", "end", {"reason": reason})


def run(cfg: SimConfig) -> Trace:
    return Simulator(cfg).run()

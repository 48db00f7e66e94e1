"""The per-process replica engine.

One engine drives one simulated process: it decodes incoming datagrams,
runs the connection/buffer/membership/determinizer machinery, executes the
application, and emits outgoing multicasts through the services object the
simulator injects.  Everything is event-driven from a single logical loop:
network deliveries, one repeating tick timer, and application step events.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace

from . import buffers, conn as cx, membership as ms
from .determinizer import (
    ERR_WOULD_BLOCK,
    OK,
    EntryStream,
    Recorder,
    ReplayQueues,
    VirtualGroupClock,
)
from .wire import (
    BirthId,
    Header,
    MalformedMessage,
    Message,
    MessageType,
    MsgOrder,
    OpMeta,
    OrderEntry,
    OrderType,
    Role,
    SocketOp,
    ViewChangeOrder,
    decode,
    decode_entries,
    encode,
    encode_entries,
    expand_msg_order,
    merge_msg_orders,
)

MEMBERSHIP_TYPES = frozenset({
    MessageType.PROPOSE_PRIMARY, MessageType.PROPOSE_BACKUP,
    MessageType.ACCEPT_BACKUP, MessageType.REMOVE_BACKUP,
    MessageType.MEMBERSHIP_ACK,
})


@dataclass
class EngineConfig:
    tick_us: int = 5_000
    heartbeat_us: int = 10_000
    retransmit_us: int = 40_000
    first_ack_delay_us: int = 20_000
    first_ack_retx_us: int = 20_000
    nack_every_us: int = 10_000
    keepalive_idle_us: int = 200_000
    watch_base_us: int = 10_000
    watch_step_us: int = 10_000
    backup_watch_periods: int = 3
    change_retx_us: int = 10_000
    max_count: int = ms.MAX_COUNT
    max_ack: int = ms.MAX_ACK
    hb_entry_window: int = 200
    store_cap: int = 6000
    update_keep: int = 300


def _b64e(raw: bytes) -> str:
    return base64.b64encode(raw).decode()


def _b64d(s: str) -> bytes:
    return base64.b64decode(s)


class ReplicaEngine:
    """State machine for one group member (primary or backup)."""

    def __init__(self, name, group_id, app_factory, services,
                 mode="semi_active", config=None, app_params=None):
        self.name = name
        self.gid = group_id
        self.mode = mode
        self.cfg = config or EngineConfig()
        self.sv = services
        self.app_params = dict(app_params or {})
        self.app_params.setdefault("group", group_id)
        self._app_factory = app_factory
        self.incarnation = 0
        self.flow_control_hook = self._default_flow_control
        self._fresh_state()

    # ------------------------------------------------------------- lifecycle

    def _fresh_state(self):
        self.incarnation += 1
        self.birth = BirthId(self.name, self.incarnation, self.sv.now())
        self.app = self._app_factory(self.app_params, self.sv.trace)
        self.joined = False
        self.gv = None                    # committed GroupView
        self.my_precedence = 0
        self.primary_precedence = 0       # current (or elect) primary
        self.conns = {}                   # directed key -> ConnectionState
        self.virt_roles = {}              # (lo, hi, conn_seq) -> client gid
        self.ws = buffers.WatermarkState()
        self.rec = Recorder(self.gid)
        self.stream = EntryStream()
        self.rq = ReplayQueues()
        self.vgc = VirtualGroupClock()
        self.ready = []                   # in-order entries awaiting execution
        self.consumed = (1, 0)            # executed (view, seq) frontier
        self.store = {}                   # own-group entries: ident -> entry
        self.pending_scoped = {}          # outbound key -> [ident]
        self.pending_global = []          # [ident]
        self.remote_store = {}            # gid -> {ident: entry}
        self.reflect_out = {}             # outbound key -> [entry]
        self.outbox = {}                  # outbound key -> [payload] (backup)
        self.backup_frontiers = {}        # precedence -> (view, seq)
        self.election = None
        self.seen_proposals = set()       # (pvn, precedence)
        self.adopted = None               # last adopted Proposal
        self.pending_change = None
        self.change_queue = []
        self.change_seq = 0
        self.recovery = None              # out key -> recovery dict
        self.state_retx = None            # [birth, snapshot, due]
        self.npv_cache = {}               # (key, view) -> ack payload
        self.primary_watch = None         # (precedence, deadline)
        self.backup_deadlines = {}        # precedence -> deadline
        self.update_seq = 0
        self.update_log = {}              # useq -> update (primary, unacked)
        self.update_acks = {}             # useq -> set of precedences
        self.updates_ahead = {}           # useq -> update (backup gap buffer)
        self.recent_updates = {}          # useq -> update (bounded history)
        self.pending_requests = []        # semi-passive: delivered, un-updated
        self.join_log = []                # raw datagrams while unjoined
        self.join_retx = None             # [count, due]
        self.hb_phase = 0
        self.nack_due = {}
        self._write_attempts = {}         # (out key, task) -> (msn, attempts)

    def start(self, established=None, precedence=None):
        """Begin as part of a pre-established membership, or join afresh."""
        if established is not None:
            self.gv = established
            self.joined = True
            self.my_precedence = precedence
            self.primary_precedence = established.primary_precedence
            self.rec.begin_view(established.view)
            self.stream.switch_view(established.view, 1)
            self.consumed = (established.view, 0)
            if self.is_primary():
                self.sv.trace("member_commit", kind="bootstrap",
                              view=self.gv.view, primary=self.my_precedence,
                              members=self._member_list())
                for m in self.gv.members:
                    if m.precedence != self.my_precedence:
                        self._reset_backup_deadline(m.precedence)
            else:
                self._arm_primary_watch()
        else:
            self._begin_join()
        self.sv.schedule(self.cfg.tick_us, "tick")

    def _begin_join(self):
        self.join_retx = [0, self.sv.now() + self.cfg.change_retx_us]
        self._send_propose_backup()

    def is_primary(self) -> bool:
        return self.joined and self.my_precedence == self.primary_precedence

    def has_backups(self) -> bool:
        return self.gv is not None and len(self.gv.members) > 1

    def my_rank(self) -> int:
        m = self.gv.by_precedence(self.my_precedence) if self.gv else None
        return m.rank if m else 0

    def _member_list(self):
        return [[list(m.birth.as_tuple()), m.precedence, m.rank]
                for m in self.gv.members]

    # ------------------------------------------------------------- plumbing

    def _conn(self, key) -> cx.ConnectionState:
        cs = self.conns.get(key)
        if cs is None:
            cs = self.conns[key] = cx.ConnectionState(key)
            if key[0] == self.gid and self.gv:
                cs.outbound_view = self.gv.view
            src, dst, conn_seq, role = key
            if src != dst:
                lo, hi = min(src, dst), max(src, dst)
                client = src if role == Role.CLIENT else dst
                self.virt_roles.setdefault((lo, hi, conn_seq), client)
        return cs

    def _out_key(self, remote_gid, conn_seq=1):
        """This group's outbound direction towards a remote group."""
        lo, hi = min(self.gid, remote_gid), max(self.gid, remote_gid)
        client = self.virt_roles.get((lo, hi, conn_seq), self.gid)
        role = Role.CLIENT if client == self.gid else Role.SERVER
        return (self.gid, remote_gid, conn_seq, role)

    def _inbound_key(self, remote_gid, conn_seq=1):
        return cx.reverse_key(self._out_key(remote_gid, conn_seq))

    def _inter_group_keys(self):
        return [k for k in self.conns if k[0] != k[1]]

    def _header(self, msg_type, key, *, msg_seq=0, ack_view=0, ack=0,
                back=0, timestamp=0, view=None, precedence=None):
        return Header(
            msg_type, key[0], key[1], key[2], key[3],
            view if view is not None else (self.gv.view if self.gv else 0),
            precedence if precedence is not None else self.primary_precedence,
            msg_seq, ack_view, ack, back, timestamp)

    def _mcast(self, msg: Message):
        self.sv.multicast(msg)

    def _json_payload(self, obj) -> bytes:
        return json.dumps(obj, sort_keys=True).encode()

    def _own_watermark(self) -> int:
        eligible = [cs for cs in self.conns.values() if cs.recv_gapfree_ts > 0]
        return buffers.timestamp_watermark(eligible)

    def _back(self) -> int:
        own = self._own_watermark()
        if self.is_primary():
            precs = [m.precedence for m in self.gv.members
                     if m.precedence != self.my_precedence]
            return buffers.back_field(self.ws, True, own, precs)
        return own

    # --------------------------------------------------------------- events

    def step(self, event):
        kind = event[0]
        if kind == "net":
            self._on_net(event[1])
        elif kind == "tick":
            self._on_tick()
            self.sv.schedule(self.cfg.tick_us, "tick")
        elif kind == "app":
            self._on_app_event()

    # ------------------------------------------------------------- dispatch

    def _on_net(self, raw: bytes):
        try:
            msg = decode(raw)
        except MalformedMessage as err:
            self.sv.trace("drop", reason="malformed", detail=str(err))
            return
        h = msg.header

        if not self.joined:
            self._unjoined_net(msg, raw)
            return

        # competing-membership screening for our own group's traffic
        if (h.source_group == self.gid
                and h.msg_type not in MEMBERSHIP_TYPES
                and h.precedence > self.primary_precedence):
            self.sv.trace("superseded", by_precedence=h.precedence,
                          mine=self.primary_precedence)
            self._mcast(msg)          # spread the evidence intra-group
            self._reset_and_rejoin()
            return

        self.ws.observe(h.timestamp)
        handler = {
            MessageType.REQUEST: self._on_app_message,
            MessageType.REPLY: self._on_app_message,
            MessageType.FIRST_ACK: self._on_first_ack,
            MessageType.SECOND_ACK: self._on_second_ack,
            MessageType.NACK: self._on_nack,
            MessageType.HEARTBEAT: self._on_heartbeat,
            MessageType.KEEP_ALIVE: self._on_keep_alive,
            MessageType.PROPOSE_PRIMARY: self._on_propose_primary,
            MessageType.NEW_PRIMARY_VIEW: self._on_new_primary_view,
            MessageType.PROPOSE_BACKUP: self._on_propose_backup,
            MessageType.ACCEPT_BACKUP: self._on_membership_change,
            MessageType.REMOVE_BACKUP: self._on_membership_change,
            MessageType.STATE: self._on_state,
            MessageType.MEMBERSHIP_ACK: self._on_membership_ack,
        }[h.msg_type]
        handler(msg)

    def _unjoined_net(self, msg: Message, raw: bytes):
        h = msg.header
        self.join_log.append(raw)
        if h.msg_type == MessageType.ACCEPT_BACKUP:
            self._joiner_accept(msg)
        elif h.msg_type == MessageType.STATE:
            self._joiner_state(msg)
        elif h.msg_type == MessageType.PROPOSE_BACKUP and self.join_retx:
            other = tuple(json.loads(msg.payload)["birth"])
            if other < self.birth.as_tuple():
                self.join_retx[0] = 0     # an elder is joining; let it lead

    # ------------------------------------------------------- app msg receive

    def _on_app_message(self, msg: Message):
        h = msg.header
        key = h.conn_key()
        cs = self._conn(key)
        out = self._conn(self._out_key(h.source_group, h.conn_seq))
        out.remote_group_watermark = max(out.remote_group_watermark, h.back)
        if h.ack:
            cx.apply_ack(out, h.ack_view, h.ack)
            self._flow_progress(out, h.ack_view, h.ack)

        outcome, missing = cx.receive_app_message(cs, msg)
        self.sv.trace("recv_app", conn=list(key), view=h.view, msn=h.msg_seq,
                      outcome=outcome.value)
        if outcome == cx.Receive.GAP:
            self.sv.trace("gap", conn=list(key), missing=list(missing))
        if outcome in (cx.Receive.ACCEPTED, cx.Receive.GAP):
            cx.note_received_progress(cs, self.sv.now(),
                                      self.cfg.first_ack_delay_us)
        if outcome not in (cx.Receive.STALE_VIEW, cx.Receive.FUTURE_VIEW):
            for e in msg.entries:
                self._route_entry(e, via=key)
        if self.is_primary() and not self.recovery:
            self._deliver_loop(cs)
        else:
            self._consume_stream()
            self._check_recovery_done()

    # --------------------------------------------------------- entry routing

    def _route_entry(self, entry: OrderEntry, via=None):
        if entry.source_group == self.gid:
            if self.is_primary() and not self.recovery:
                self._reflection_seen(entry)
            else:
                self._offer_own(entry)
            return
        store = self.remote_store.setdefault(entry.source_group, {})
        if entry.ident() not in store:
            store[entry.ident()] = entry
            if len(store) > self.cfg.store_cap:
                for k in sorted(store)[:len(store) - self.cfg.store_cap]:
                    del store[k]
        if via is not None:
            back_key = self._out_key(entry.source_group, via[2])
            pend = self.reflect_out.setdefault(back_key, [])
            if entry not in pend:
                pend.append(entry)
            # a remote send order can reveal messages we never saw
            if entry.order_type == OrderType.MSG_ORDER \
                    and self._is_send_order(entry) \
                    and via[0] == entry.source_group:
                b = entry.body
                inbound = self.conns.get(via)
                if inbound and inbound.inbound_view == b.view:
                    newly = cx.reveal_missing(inbound, b.msg_seq + b.opaque)
                    if newly:
                        self.sv.trace("gap", conn=list(via),
                                      missing=list(newly), via="order")

    def _offer_own(self, entry: OrderEntry):
        if entry.order_type == OrderType.MSG_ORDER and entry.body.opaque \
                and not self._is_send_order(entry):
            for e in expand_msg_order(entry):
                self._offer_own(e)
            return
        self.store.setdefault(entry.ident(), entry)
        self.ready.extend(self.stream.offer(entry))

    def _is_send_order(self, entry: OrderEntry) -> bool:
        b = entry.body
        lo = min(entry.source_group, b.remote_group)
        hi = max(entry.source_group, b.remote_group)
        client = self.virt_roles.get((lo, hi, b.conn_seq), entry.source_group)
        return (b.msg_type == MessageType.REQUEST) == (
            entry.source_group == client)

    def _reflection_seen(self, entry: OrderEntry):
        ident = entry.ident()
        for pend in self.pending_scoped.values():
            if ident in pend:
                pend.remove(ident)
        if ident in self.pending_global:
            self.pending_global.remove(ident)

    def _register_emitted(self, entry: OrderEntry, scope_key=None):
        ident = entry.ident()
        self.store[ident] = entry
        self._prune_store()
        if entry.order_type == OrderType.MSG_ORDER and scope_key is not None:
            self.pending_scoped.setdefault(scope_key, []).append(ident)
        else:
            self.pending_global.append(ident)
        self.consumed = ident
        self.sv.trace("order_emit", view=entry.view, seq=entry.order_seq,
                      otype=entry.order_type.name)

    def _emit_msg_order(self, view, mtype, conn_seq, sock_fd, opaque,
                        remote_gid, msn, ts, scope_key):
        seq = self.rec.next_seq
        entry = self.rec.record_body(OrderType.MSG_ORDER, MsgOrder(
            view, mtype, conn_seq, sock_fd, opaque, remote_gid, msn, seq, ts))
        self._register_emitted(entry, scope_key=scope_key)
        return entry

    def _prune_store(self):
        if len(self.store) <= self.cfg.store_cap:
            return
        floor = min(self.backup_frontiers.values(), default=self.consumed)
        floor = (floor[0], max(0, floor[1] - self.cfg.hb_entry_window))
        keep = {k: v for k, v in self.store.items() if k > floor}
        if len(keep) < len(self.store):
            self.store = keep

    def _piggyback_for(self, out_key):
        own = [self.store[i]
               for i in self.pending_scoped.get(out_key, []) if i in self.store]
        own += [self.store[i] for i in self.pending_global if i in self.store]
        own.sort(key=lambda e: e.ident())
        reflect = self.reflect_out.pop(out_key, [])
        return tuple(merge_msg_orders(own) + reflect)

    # --------------------------------------------------------- primary send

    def send_app(self, out_key, payload: bytes, sock_fd=0,
                 forced_msn=None, paced=False):
        """Originate (primary) or log (backup) one application message."""
        cs = self._conn(out_key)
        if cs.outbound_view == 0:
            cs.outbound_view = self.gv.view
        primary = self.is_primary()
        if primary and paced and cs.send_gap_us:
            now = self.sv.now()
            if now < cs.next_send_not_before:
                cs.paced_backlog.append(payload)
                return None
            cs.next_send_not_before = now + cs.send_gap_us
        msn = forced_msn if forced_msn is not None else cs.next_msg_seq()
        ts = self.ws.stamp_outgoing()
        rev = self.conns.get(cx.reverse_key(out_key))
        ack_view = rev.inbound_view if rev else 0
        ack = rev.received_up_to if rev else 0
        mtype = MessageType.REQUEST if out_key[3] == Role.CLIENT \
            else MessageType.REPLY
        if primary:
            self._emit_msg_order(cs.outbound_view, mtype, out_key[2], sock_fd,
                                 0, out_key[1], msn, ts, out_key)
        header = self._header(mtype, out_key, msg_seq=msn, ack_view=ack_view,
                              ack=ack, back=self._back(), timestamp=ts,
                              view=cs.outbound_view)
        entries = self._piggyback_for(out_key) if primary else ()
        msg = Message(header, entries, payload)
        cx.record_sent(cs, msg, self.sv.now(), logged_only=not primary)
        if primary:
            self._mcast(msg)
            if rev:
                cx.ack_carried_by_send(rev, ack)
            cs.keepalive_deadline = self.sv.now() + self.cfg.keepalive_idle_us
        return msg

    def _log_send_from_order(self, entry: OrderEntry) -> bool:
        """Backup: realize one send order from regenerated app output."""
        b = entry.body
        out_key = self._out_key(b.remote_group, b.conn_seq)
        box = self.outbox.setdefault(out_key, [])
        if not box:
            payload = self.app.next_request() \
                if hasattr(self.app, "next_request") else None
            if payload is None:
                return False
            box.append(payload)
        payload = box.pop(0)
        cs = self._conn(out_key)
        cs.outbound_view = b.view
        if cs.msg_seq_count < b.msg_seq:
            cs.msg_seq_count = b.msg_seq
        self.ws.stamp_as(b.timestamp)
        header = self._header(
            MessageType.REQUEST if out_key[3] == Role.CLIENT
            else MessageType.REPLY,
            out_key, msg_seq=b.msg_seq, timestamp=b.timestamp, view=b.view)
        cx.record_sent(cs, Message(header, (), payload), self.sv.now(),
                       logged_only=True)
        return True

    # ------------------------------------------------------ primary delivery

    def _deliver_loop(self, cs: cx.ConnectionState):
        if self.recovery or not self.is_primary():
            return
        while (m := cx.deliverable(cs)) is not None:
            cx.mark_delivered_next(cs)
            h = m.header
            order = self._emit_msg_order(
                h.view, h.msg_type, h.conn_seq, 0, 0, h.source_group,
                h.msg_seq, h.timestamp,
                self._out_key(h.source_group, h.conn_seq))
            self._execute_delivery(m, order.ident())

    def _execute_delivery(self, m: Message, entry_ident):
        h = m.header
        key = h.conn_key()
        self.sv.trace("deliver", conn=list(key), view=h.view, msn=h.msg_seq,
                      role="primary")
        replies = self.app.on_deliver(h.source_group, m.payload)
        out_key = self._out_key(h.source_group, h.conn_seq)
        sent = []
        for r in replies:
            sm = self.send_app(out_key, r)
            if sm is not None:
                sent.append(sm)
        if self.mode == "semi_passive":
            req = (key[0], key[1], key[2], int(key[3]), h.view, h.msg_seq)
            self._emit_update(entry_ident, req, sent)

    # ---------------------------------------------------------- semi-passive

    def _emit_update(self, entry_ident, req_ident, sent_msgs):
        delta = self.app.take_update()
        if delta is None and not sent_msgs:
            return
        self.update_seq += 1
        upd = {
            "useq": self.update_seq,
            "delta": delta,
            "entry": list(entry_ident),
            "req": list(req_ident),
            "replies": [[list(m.header.conn_key()[:3]) +
                         [int(m.header.conn_key()[3])],
                         m.header.view, m.header.msg_seq,
                         m.header.timestamp, _b64e(m.payload)]
                        for m in sent_msgs],
        }
        self.update_log[self.update_seq] = dict(upd)
        self._remember_update(upd)
        self.sv.trace("update_emit", useq=self.update_seq,
                      digest=self.app.digest())
        self._send_update(upd)

    def _remember_update(self, upd):
        self.recent_updates[upd["useq"]] = upd
        while len(self.recent_updates) > self.cfg.update_keep:
            del self.recent_updates[min(self.recent_updates)]

    def _send_update(self, upd):
        key = cx.intra_group_key(self.gid)
        msg = Message(self._header(MessageType.STATE, key, back=self._back()),
                      (), self._json_payload({"kind": "update",
                                              "update": upd}))
        self._mcast(msg)

    def _apply_update(self, upd):
        if upd["useq"] <= self.update_seq:
            return
        self.updates_ahead[upd["useq"]] = upd
        while self.update_seq + 1 in self.updates_ahead:
            u = self.updates_ahead.pop(self.update_seq + 1)
            self.update_seq += 1
            self._remember_update(u)
            if u["delta"] is not None:
                self.app.apply_update(u["delta"])
            req = tuple(u["req"])
            self.pending_requests = [p for p in self.pending_requests
                                     if p[0] != req]
            for ckey, view, msn, ts, payload in u["replies"]:
                key = (ckey[0], ckey[1], ckey[2], Role(ckey[3]))
                cs = self._conn(key)
                cs.outbound_view = view
                if cs.msg_seq_count < msn:
                    cs.msg_seq_count = msn
                self.ws.stamp_as(ts)
                header = self._header(
                    MessageType.REQUEST if key[3] == Role.CLIENT
                    else MessageType.REPLY,
                    key, msg_seq=msn, timestamp=ts, view=view)
                cx.record_sent(cs, Message(header, (), _b64d(payload)),
                               self.sv.now(), logged_only=True)
            self.sv.trace("update_apply", useq=u["useq"],
                          digest=self.app.digest())

    # ------------------------------------------------------- backup consume

    def _consume_stream(self):
        progressed = True
        while progressed:
            progressed = False
            self.ready.extend(self.stream.drain_ready())
            while self.ready:
                e = self.ready[0]
                if e.order_type in (OrderType.MUTEX_ORDER,
                                    OrderType.TIME_ORDER,
                                    OrderType.SOCKET_ORDER):
                    self.rq.ingest(e)
                elif e.order_type == OrderType.MSG_ORDER:
                    if not self._consume_msg_order(e):
                        break
                else:
                    self._consume_view_change(e)
                self.ready.pop(0)
                if e.order_type != OrderType.VIEW_CHANGE_ORDER:
                    self.consumed = e.ident()
                self.sv.trace("order_consume", view=e.view, seq=e.order_seq,
                              otype=e.order_type.name)
                progressed = True
            if self._task_progress():
                progressed = True
            if not progressed and not self.ready:
                progressed = self._maybe_switch_stream_view()

    def _task_progress(self) -> bool:
        if not hasattr(self.app, "try_progress"):
            return False
        return self.app.try_progress(_BackupOps(self))

    def _consume_msg_order(self, entry: OrderEntry) -> bool:
        b = entry.body
        if self._is_send_order(entry):
            if b.opaque:
                return True    # failed-write retry marker: bookkeeping only
            if self.mode == "semi_passive":
                return True    # reply copies arrive inside updates
            return self._log_send_from_order(entry)
        # delivery order
        key = self._inbound_key(b.remote_group, b.conn_seq)
        cs = self._conn(key)
        msg = cx.take_ordered(cs, b.view, b.msg_seq)
        if msg is None:
            if cs.inbound_view == b.view and b.msg_seq > cs.max_known_msn():
                newly = cx.reveal_missing(cs, b.msg_seq)
                if newly:
                    self.sv.trace("gap", conn=list(key), missing=list(newly),
                                  via="order")
            return False
        self.sv.trace("deliver", conn=list(key), view=b.view, msn=b.msg_seq,
                      role="backup")
        if self.mode == "semi_passive":
            req = (key[0], key[1], key[2], int(key[3]), b.view, b.msg_seq)
            self.pending_requests.append((req, list(entry.ident())))
        else:
            replies = self.app.on_deliver(msg.header.source_group,
                                          msg.payload)
            out_key = self._out_key(msg.header.source_group, b.conn_seq)
            for r in replies:
                self.outbox.setdefault(out_key, []).append(r)
        return True

    def _maybe_switch_stream_view(self) -> bool:
        """The view-change entry is numbered (new view, 1); hop the stream
        over once the old view is fully consumed."""
        for (v, s), e in sorted(self.stream.pending.items()):
            if s == 1 and e.order_type == OrderType.VIEW_CHANGE_ORDER \
                    and v > self.stream.view:
                b = e.body
                if b.prev_view == self.stream.view \
                        and self.stream.next_seq > b.prev_last_seq:
                    self.stream.switch_view(v, 1)
                    self.ready.extend(self.stream.drain_ready())
                    return True
        return False

    def _consume_view_change(self, entry: OrderEntry):
        b = entry.body
        for (src, dst, conn_seq, role, cut) in b.cuts:
            if src == self.gid:
                cs = self._conn((src, dst, conn_seq, Role(role)))
                cx.renumber_sent_after_cut(cs, b.prev_view, b.new_view, cut,
                                           b.primary_precedence)
        if self.adopted is not None:
            self.gv = ms.GroupView(self.gid, b.new_view, self.adopted.members,
                                   b.primary_precedence)
            self.adopted = None
        else:
            self.gv = replace(self.gv, view=b.new_view,
                              primary_precedence=b.primary_precedence)
        self.primary_precedence = b.primary_precedence
        self.rec.begin_view(b.new_view)
        self.consumed = (b.new_view, 1)
        self._arm_primary_watch()
        self.sv.trace("view_switch", view=b.new_view,
                      primary=b.primary_precedence, rank=self.my_rank())
        self.sv.trace("digest", point="vc:%d" % b.new_view,
                      value=self.app.digest())

    # ------------------------------------------------------------- heartbeat

    def _send_heartbeat(self):
        key = cx.intra_group_key(self.gid)
        payload = {"from": self.my_precedence,
                   "wm": self._own_watermark(),
                   "consumed": list(self.consumed),
                   "update_seq": self.update_seq}
        entries = self._hb_entries() if self.is_primary() else ()
        msg = Message(
            self._header(MessageType.HEARTBEAT, key, back=self._back()),
            entries, self._json_payload(payload))
        self._mcast(msg)

    def _hb_entries(self):
        floor = min(self.backup_frontiers.values(), default=(0, 0))
        out = []
        for ident in sorted(self.store):
            if ident > floor:
                out.append(self.store[ident])
                if len(out) >= self.cfg.hb_entry_window:
                    break
        return tuple(out)

    def _on_heartbeat(self, msg: Message):
        info = json.loads(msg.payload)
        sender = info["from"]
        if self.is_primary():
            if sender == self.my_precedence:
                return
            self.ws.per_backup[sender] = max(
                self.ws.per_backup.get(sender, 0), info["wm"])
            self.backup_frontiers[sender] = tuple(info["consumed"])
            self._reset_backup_deadline(sender)
            for useq in list(self.update_log):
                if useq <= info["update_seq"]:
                    self.update_acks.setdefault(useq, set()).add(sender)
        elif sender == self.primary_precedence:
            self._arm_primary_watch()
            self.ws.my_group_watermark = max(self.ws.my_group_watermark,
                                             msg.header.back)
            for e in msg.entries:
                self._route_entry(e)
            self._consume_stream()
            self._check_recovery_done()

    # ------------------------------------------------------------ ack paths

    def _on_first_ack(self, msg: Message):
        h = msg.header
        out_key = (h.dest_group, h.source_group, h.conn_seq, h.role)
        cs = self.conns.get(out_key)
        if cs is None:
            return
        cs.remote_group_watermark = max(cs.remote_group_watermark, h.back)
        entry = cs.sent.get((h.ack_view, h.ack))
        cx.apply_ack(cs, h.ack_view, h.ack)
        for e in msg.entries:
            self._route_entry(e, via=cx.reverse_key(out_key))
        if entry is not None:
            entry.first_ack_count += 1
            if self.is_primary():
                if entry.first_ack_count > self.cfg.max_ack \
                        and cs.flow_flagged != (h.ack_view, h.ack):
                    cs.flow_flagged = (h.ack_view, h.ack)
                    self.flow_control_hook(cs)
                elif not self.has_backups():
                    self._send_second_ack(h)
            else:
                self._send_second_ack(h)
        if not self.is_primary():
            self._consume_stream()

    def _default_flow_control(self, cs: cx.ConnectionState):
        cs.send_gap_us = max(cs.send_gap_us * 2, 2_000)
        cs.next_send_not_before = self.sv.now() + cs.send_gap_us
        self.sv.trace("flow_control", conn=list(cs.key),
                      gap_us=cs.send_gap_us)

    def _flow_progress(self, cs: cx.ConnectionState, ack_view, ack):
        if cs.flow_flagged and (ack_view, ack) > cs.flow_flagged:
            cs.flow_flagged = ()
            cs.send_gap_us = 0

    def _send_second_ack(self, first_ack_header):
        h = first_ack_header
        key = (self.gid, h.source_group, h.conn_seq, h.role)
        msg = Message(self._header(MessageType.SECOND_ACK, key,
                                   ack_view=h.ack_view, ack=h.ack), ())
        self._mcast(msg)
        self.sv.trace("second_ack", conn=list(key), msn=h.ack)

    def _on_second_ack(self, msg: Message):
        h = msg.header
        inbound_key = (h.source_group, h.dest_group, h.conn_seq, h.role)
        cs = self._conn(inbound_key)
        if cs.inbound_view == 0:
            cs.inbound_view = h.ack_view
        if self.is_primary():
            if h.ack_view == cs.inbound_view:
                cx.stop_first_ack(cs, h.ack)
        elif h.ack_view == cs.inbound_view and h.ack > cs.max_known_msn():
            newly = cx.reveal_missing(cs, h.ack)
            if newly:
                self.sv.trace("gap", conn=list(inbound_key),
                              missing=list(newly), via="second_ack")

    # ----------------------------------------------------------------- nacks

    def _on_nack(self, msg: Message):
        body = json.loads(msg.payload)
        key = (body["src"], body["dst"], body["conn"], Role(body["role"]))
        view, missing = body["view"], body["missing"]
        found = []
        if key in self.conns:
            found = cx.find_for_retransmit(self.conns[key], view, missing)
        rev = cx.reverse_key(key)
        if not found and rev in self.conns:
            found = cx.find_for_retransmit(self.conns[rev], view, missing)
        now = self.sv.now()
        for m in found:
            sent = None
            if key in self.conns:
                sent = self.conns[key].sent.get((view, m.header.msg_seq))
            if sent is not None and not sent.logged_only:
                sent.last_send_us = now
                self._mcast(m)
            elif self.is_primary():
                self._mcast(m)         # serving from received/delivered copies
            else:
                found = []
                break
        if found:
            self.sv.trace("retransmit", conn=list(key),
                          msns=[m.header.msg_seq for m in found],
                          cause="nack")

    def _send_nacks(self):
        now = self.sv.now()
        for key, cs in list(self.conns.items()):
            if not cs.nacks or now < self.nack_due.get(key, 0):
                continue
            self.nack_due[key] = now + self.cfg.nack_every_us
            body = {"src": key[0], "dst": key[1], "conn": key[2],
                    "role": int(key[3]), "view": cs.inbound_view,
                    "missing": sorted(cs.nacks)}
            if self.is_primary():
                target = cx.reverse_key(key)
                self.sv.trace("nack_remote", conn=list(key),
                              missing=body["missing"])
            else:
                target = cx.intra_group_key(self.gid)
                self.sv.trace("nack_local", conn=list(key),
                              missing=body["missing"])
            msg = Message(self._header(MessageType.NACK, target,
                                       back=self._back()),
                          (), self._json_payload(body))
            self._mcast(msg)

    # ------------------------------------------------------------- keepalive

    def _on_keep_alive(self, msg: Message):
        h = msg.header
        key = h.conn_key()
        out = self._conn(self._out_key(h.source_group, h.conn_seq))
        out.remote_group_watermark = max(out.remote_group_watermark, h.back)
        if h.ack:
            cx.apply_ack(out, h.ack_view, h.ack)
        for e in msg.entries:
            self._route_entry(e, via=key)
        if not (self.is_primary() and not self.recovery):
            self._consume_stream()
            self._check_recovery_done()

    def _send_keep_alives(self):
        now = self.sv.now()
        for key, cs in list(self.conns.items()):
            if key[0] != self.gid or key[0] == key[1]:
                continue
            if cs.keepalive_deadline and now >= cs.keepalive_deadline:
                rev = self.conns.get(cx.reverse_key(key))
                msg = Message(
                    self._header(MessageType.KEEP_ALIVE, key,
                                 ack_view=rev.inbound_view if rev else 0,
                                 ack=rev.received_up_to if rev else 0,
                                 back=self._back()),
                    self._piggyback_for(key))
                self._mcast(msg)
                cs.keepalive_deadline = now + self.cfg.keepalive_idle_us

    # ------------------------------------------------------------------ tick

    def _on_tick(self):
        now = self.sv.now()
        if not self.joined:
            self._join_tick(now)
            return
        self.hb_phase += 1
        if self.hb_phase * self.cfg.tick_us >= self.cfg.heartbeat_us:
            self.hb_phase = 0
            self._send_heartbeat()
            self._gc()
        if self.is_primary():
            self._retransmit_due(now)
            self._first_ack_tick(now)
            self._send_keep_alives()
            self._update_retx(now)
            self._change_retx(now)
            self._state_retx_due(now)
            self._backup_watch(now)
            self._drain_paced(now)
            if not self.recovery:
                for cs in list(self.conns.values()):
                    self._deliver_loop(cs)
        else:
            self._consume_stream()
            self._primary_watch_check(now)
        self._election_retx(now)
        self._recovery_retx(now)
        self._send_nacks()

    def _drain_paced(self, now):
        for cs in list(self.conns.values()):
            if cs.paced_backlog and now >= cs.next_send_not_before:
                self.send_app(cs.key, cs.paced_backlog.pop(0), paced=True)

    def _retransmit_due(self, now):
        for cs in list(self.conns.values()):
            for e in cx.due_retransmits(cs, now, self.cfg.retransmit_us):
                e.last_send_us = now
                self._mcast(e.msg)
                self.sv.trace("retransmit", conn=list(cs.key),
                              msns=[e.msg.header.msg_seq], cause="timeout")

    def _first_ack_tick(self, now):
        for key, cs in list(self.conns.items()):
            if key[1] != self.gid or key[0] == self.gid:
                continue
            if cx.first_ack_due(cs, now):
                cs.first_ack_started = True
                cs.first_ack_due_us = now + self.cfg.first_ack_retx_us
                out_key = self._out_key(key[0], key[2])
                msg = Message(
                    self._header(MessageType.FIRST_ACK,
                                 (self.gid, key[0], key[2], key[3]),
                                 ack_view=cs.inbound_view,
                                 ack=cs.first_ack_msn, back=self._back()),
                    self._piggyback_for(out_key))
                self._mcast(msg)
                self.sv.trace("first_ack", conn=list(key),
                              msn=cs.first_ack_msn)

    def _update_retx(self, now):
        if self.mode != "semi_passive" or not self.update_log:
            return
        precs = {m.precedence for m in self.gv.members
                 if m.precedence != self.my_precedence}
        for useq in sorted(self.update_log):
            if precs <= self.update_acks.get(useq, set()):
                del self.update_log[useq]
                self.update_acks.pop(useq, None)
                continue
            upd = self.update_log[useq]
            if now >= upd.get("_due", 0):
                upd["_due"] = now + self.cfg.change_retx_us
                self._send_update({k: v for k, v in upd.items()
                                   if not k.startswith("_")})
            break

    def _gc(self):
        if self.is_primary():
            self._back()    # refreshes the cached group watermark
        for key, cs in list(self.conns.items()):
            if key[0] == self.gid and key[0] == key[1]:
                cs.remote_group_watermark = self.ws.my_group_watermark
            for (v, m) in cx.gc_sent(cs):
                ok = self.sv.gc_check(key, v, m)
                self.sv.trace("gc_sent", conn=list(key), view=v, msn=m, ok=ok)
            for (v, m) in cx.gc_delivered(cs, self.ws.my_group_watermark):
                self.sv.trace("gc_delivered", conn=list(key), view=v, msn=m,
                              ok=True)

    # --------------------------------------------------------- fault watches

    def _arm_primary_watch(self):
        rank = self.my_rank()
        if rank < 2:
            self.primary_watch = None
            return
        timeout = ms.primary_watch_us(rank, self.cfg.watch_base_us,
                                      self.cfg.watch_step_us)
        self.primary_watch = (self.primary_precedence,
                              self.sv.now() + timeout)

    def _reset_backup_deadline(self, precedence):
        self.backup_deadlines[precedence] = self.sv.now() + \
            self.cfg.backup_watch_periods * self.cfg.heartbeat_us

    def _primary_watch_check(self, now):
        if self.primary_watch is None or self.election is not None:
            return
        watched, deadline = self.primary_watch
        if now < deadline:
            return
        self.sv.trace("suspect_primary", precedence=watched)
        # the watched claimant is presumed dead; its proposals lose standing
        self.seen_proposals = {(v, p) for (v, p) in self.seen_proposals
                               if p > watched}
        self.primary_watch = None
        self._start_election()

    def _backup_watch(self, now):
        if self.pending_change is not None or self.gv is None:
            return
        for m in list(self.gv.members):
            if m.precedence == self.my_precedence:
                continue
            deadline = self.backup_deadlines.get(m.precedence)
            if deadline is None:
                self._reset_backup_deadline(m.precedence)
            elif now >= deadline:
                self.sv.trace("suspect_backup", precedence=m.precedence)
                self._begin_change("remove", m.birth)
                return

    # ------------------------------------------------------------- election

    def _start_election(self):
        if not ms.should_propose(self.seen_proposals, self.gv.view,
                                 self.my_precedence):
            return
        members = ms.proposal_members(self.gv, self.my_precedence)
        prop = ms.Proposal(self.gid, self.gv.view, self.my_precedence,
                           members, self.consumed, self.update_seq)
        self.election = ms.Election(
            prop, next_retx_us=self.sv.now() + self.cfg.change_retx_us)
        self.sv.trace("member_propose", kind="primary", view=self.gv.view,
                      precedence=self.my_precedence,
                      members=[m.precedence for m in members])
        self._send_proposal()
        if not self.election.awaited():
            self._conclude_election()

    def _send_proposal(self):
        p = self.election.proposal
        payload = {
            "pvn": p.pvn, "precedence": p.precedence,
            "members": [[list(m.birth.as_tuple()), m.precedence, m.rank]
                        for m in p.members],
            "frontier": list(p.entry_frontier),
            "update_seq": p.update_seq,
        }
        key = cx.intra_group_key(self.gid)
        self._mcast(Message(
            self._header(MessageType.PROPOSE_PRIMARY, key,
                         view=p.pvn, precedence=p.precedence),
            (), self._json_payload(payload)))

    def _on_propose_primary(self, msg: Message):
        body = json.loads(msg.payload)
        members = tuple(ms.Member(BirthId(*b), prec, rank)
                        for (b, prec, rank) in body["members"])
        pvn, prec = body["pvn"], body["precedence"]
        self.seen_proposals.add((pvn, prec))
        if pvn < self.gv.view or prec == self.my_precedence:
            return
        in_mem = any(m.birth == self.birth for m in members)
        if in_mem and self.adopted is not None \
                and prec == self.primary_precedence:
            self._adopt(body, members)     # retransmission: refresh and re-ack
            return
        act = ms.classify_proposal(
            in_mem, prec, self.primary_precedence,
            candidacy=self.my_precedence if self.election else 0)
        if act == "adopt":
            self._adopt(body, members)
        elif act == "reset":
            self.sv.trace("pruned", by=prec)
            self._reset_and_rejoin()

    def _adopt(self, body, members):
        prec = body["precedence"]
        self.election = None
        self.recovery = None
        self.primary_precedence = prec
        self.adopted = ms.Proposal(self.gid, body["pvn"], prec, members,
                                   tuple(body["frontier"]),
                                   body["update_seq"])
        self.gv = replace(self.gv, members=members, primary_precedence=prec)
        self._arm_primary_watch()
        # ship the proposer whatever it might be missing
        their_frontier = tuple(body["frontier"])
        tail = [e for i, e in sorted(self.store.items()) if i > their_frontier]
        missing_updates = [
            {k: v for k, v in u.items() if not k.startswith("_")}
            for s, u in sorted(self.recent_updates.items())
            if s > body["update_seq"]]
        ack = {
            "kind": "pp", "pvn": body["pvn"], "proposer": prec,
            "from": self.my_precedence,
            "entries": _b64e(encode_entries(tail)) if tail else "",
            "update_seq": self.update_seq,
            "updates": missing_updates,
        }
        key = cx.intra_group_key(self.gid)
        self._mcast(Message(self._header(MessageType.MEMBERSHIP_ACK, key),
                            (), self._json_payload(ack)))

    def _election_retx(self, now):
        el = self.election
        if el is None or el.phase != "electing" or now < el.next_retx_us:
            return
        el.next_retx_us = now + self.cfg.change_retx_us
        el.retransmission_count += 1
        if el.retransmission_count > self.cfg.max_count:
            gone = el.prune_silent()
            if gone:
                self.sv.trace("member_prune", precedences=sorted(gone))
            if not el.awaited():
                self._conclude_election()
                return
        self._send_proposal()

    def _on_membership_ack(self, msg: Message):
        body = json.loads(msg.payload)
        kind = body["kind"]
        if kind == "pp":
            self._on_pp_ack(body)
        elif kind == "mc":
            self._on_mc_ack(body)
        elif kind == "npv":
            self._on_npv_ack(body)
        elif kind == "state":
            if self.state_retx is not None and \
                    tuple(body["birth"]) == self.state_retx[0].as_tuple():
                self.state_retx = None

    def _on_pp_ack(self, body):
        el = self.election
        if el is None or el.phase != "electing":
            return
        if body["pvn"] != el.proposal.pvn \
                or body["proposer"] != self.my_precedence:
            return
        if body["entries"]:
            for e in decode_entries(_b64d(body["entries"])):
                self._offer_own(e)
        for u in body.get("updates", []):
            self._apply_update(u)
        if el.record_ack(body["from"]):
            self._conclude_election()

    def _conclude_election(self):
        el = self.election
        el.phase = "recovering"
        members = el.proposal.members
        new_view = el.proposal.pvn + 1
        self.gv = ms.GroupView(self.gid, new_view, members,
                               self.my_precedence)
        self.primary_precedence = self.my_precedence
        self.primary_watch = None
        self.adopted = None
        self.sv.trace("member_commit", kind="election", view=new_view,
                      primary=self.my_precedence, members=self._member_list())
        self.backup_frontiers = {}
        for m in members:
            if m.precedence != self.my_precedence:
                self._reset_backup_deadline(m.precedence)
                self.backup_frontiers[m.precedence] = (0, 0)
        self.recovery = {}
        seen_pairs = set()
        for key in self._inter_group_keys():
            remote = key[1] if key[0] == self.gid else key[0]
            pair = (remote, key[2])
            if pair in seen_pairs:
                continue
            seen_pairs.add(pair)
            self.recovery[self._out_key(remote, key[2])] = {
                "acked": False, "cut": 0, "last_sent": 0, "due": 0}
        self._consume_stream()
        if not self.recovery:
            self._finish_recovery()
        else:
            self._recovery_retx(self.sv.now())

    def _recovery_retx(self, now):
        if not self.recovery:
            return
        for key, rec in self.recovery.items():
            if rec["acked"] or now < rec["due"]:
                continue
            rec["due"] = now + self.cfg.change_retx_us
            self._mcast(Message(
                self._header(MessageType.NEW_PRIMARY_VIEW, key,
                             view=self.gv.view),
                (), self._json_payload({"frontier": list(self.consumed)})))

    def _on_new_primary_view(self, msg: Message):
        h = msg.header
        key = h.conn_key()
        cs = self._conn(key)
        cache_key = (key, h.view)
        if h.view < cs.inbound_view:
            return
        if cache_key not in self.npv_cache:
            if h.view > cs.inbound_view:
                recv_up_to = cs.received_up_to
                flushed = cx.reset_inbound_for_view(cs, h.view)
            else:
                # the new view reached us through data traffic first
                recv_up_to, flushed = cs.received_up_to, 0
            rev = self.conns.get(cx.reverse_key(key))
            last_sent = rev.msg_seq_count if rev else 0
            self.sv.trace("npv", conn=list(key), view=h.view,
                          recv_up_to=recv_up_to, flushed=flushed)
            entries = [e for _, e in sorted(
                self.remote_store.get(h.source_group, {}).items())]
            self.npv_cache[cache_key] = {
                "kind": "npv",
                "conn": [key[0], key[1], key[2], int(key[3])],
                "view": h.view, "recv_up_to": recv_up_to,
                "last_sent": last_sent,
                "entries": _b64e(encode_entries(entries)) if entries else "",
            }
        if self.is_primary():
            out = self._out_key(h.source_group, key[2])
            self._mcast(Message(
                self._header(MessageType.MEMBERSHIP_ACK, out), (),
                self._json_payload(self.npv_cache[cache_key])))

    def _on_npv_ack(self, body):
        if not self.recovery:
            return
        conn = body["conn"]
        out_key = self._out_key(conn[1], conn[2])
        rec = self.recovery.get(out_key)
        if rec is None or rec["acked"] or body["view"] != self.gv.view:
            return
        rec["acked"] = True
        rec["cut"] = body["recv_up_to"]
        rec["last_sent"] = body["last_sent"]
        if body["entries"]:
            for e in decode_entries(_b64d(body["entries"])):
                self._offer_own(e)
        inbound = self._conn(cx.reverse_key(out_key))
        if inbound.inbound_view > 0 and body["last_sent"]:
            newly = cx.reveal_missing(inbound, body["last_sent"])
            if newly:
                self.sv.trace("gap", conn=list(inbound.key),
                              missing=list(newly), via="npv")
        self._consume_stream()
        self._check_recovery_done()

    def _check_recovery_done(self):
        if not self.recovery:
            return
        if any(not rec["acked"] for rec in self.recovery.values()):
            return
        self._consume_stream()
        if self.ready:
            return
        old_view = self.gv.view - 1
        if any(k[0] == old_view for k in self.stream.pending):
            return
        self._finish_recovery()

    def _finish_recovery(self):
        new_view = self.gv.view
        old_view = new_view - 1
        K = self.consumed[1] if self.consumed[0] == old_view else 0
        cuts = []
        resend = []
        for out_key, rec in (self.recovery or {}).items():
            cs = self._conn(out_key)
            cuts.append((out_key[0], out_key[1], out_key[2],
                         int(out_key[3]), rec["cut"]))
            resend.extend(cx.renumber_sent_after_cut(
                cs, old_view, new_view, rec["cut"], self.my_precedence))
        self.recovery = None
        self.election = None
        self.rec.begin_view(new_view)
        vc = self.rec.record_body(
            OrderType.VIEW_CHANGE_ORDER,
            ViewChangeOrder(old_view, K, new_view, self.my_precedence,
                            tuple(cuts)))
        self._register_emitted(vc)
        self.vgc.promote()
        self.stream.switch_view(new_view, 2)
        self.sv.trace("view_switch", view=new_view,
                      primary=self.my_precedence, rank=self.my_rank())
        self.sv.trace("digest", point="vc:%d" % new_view,
                      value=self.app.digest())
        now = self.sv.now()
        for e in resend:
            e.last_send_us = now
            self._mcast(e.msg)
            self.sv.trace("retransmit", conn=list(e.msg.header.conn_key()),
                          msns=[e.msg.header.msg_seq], cause="view_change")
        if self.mode == "semi_passive":
            self._reexecute_pending()
        for cs in list(self.conns.values()):
            self._deliver_loop(cs)

    def _reexecute_pending(self):
        pending, self.pending_requests = self.pending_requests, []
        for (req, _old_ident) in pending:
            src, dst, conn_seq, role, view, msn = req
            cs = self.conns.get((src, dst, conn_seq, Role(role)))
            m = cs.delivered.get((view, msn)) if cs else None
            if m is None:
                continue
            self.sv.trace("reexecute", conn=[src, dst, conn_seq, role],
                          view=view, msn=msn)
            order = self._emit_msg_order(
                view, m.header.msg_type, conn_seq, 0, 0, src, msn,
                m.header.timestamp, self._out_key(src, conn_seq))
            self._execute_delivery(m, order.ident())

    # ----------------------------------------------------- backup add/remove

    def _begin_change(self, kind, birth):
        if self.pending_change is not None:
            self.change_queue.append((kind, birth))
            return
        if kind == "add":
            if self.gv.member_for(birth):
                return
            gv2 = ms.add_member(self.gv, birth)
        else:
            if not self.gv.member_for(birth):
                return
            gv2 = ms.remove_member(self.gv, birth)
        self.change_seq += 1
        self.pending_change = ms.PendingChange(
            kind, birth, gv2, self.change_seq,
            next_retx_us=self.sv.now() + self.cfg.change_retx_us)
        self.sv.trace("member_propose", kind=kind, view=self.gv.view,
                      precedence=self.my_precedence,
                      members=[m.precedence for m in gv2.members])
        self._send_change()
        self._maybe_commit_change()

    def _send_change(self):
        pc = self.pending_change
        mtype = MessageType.ACCEPT_BACKUP if pc.kind == "add" \
            else MessageType.REMOVE_BACKUP
        payload = {
            "members": [[list(m.birth.as_tuple()), m.precedence, m.rank]
                        for m in pc.view.members],
            "view": self.gv.view, "change_seq": pc.change_seq,
            "target": list(pc.target.as_tuple()),
        }
        key = cx.intra_group_key(self.gid)
        self._mcast(Message(self._header(mtype, key), (),
                            self._json_payload(payload)))

    def _change_retx(self, now):
        pc = self.pending_change
        if pc is None or now < pc.next_retx_us:
            return
        pc.next_retx_us = now + self.cfg.change_retx_us
        pc.retransmission_count += 1
        if pc.retransmission_count > self.cfg.max_count:
            gone = pc.prune_silent()
            if gone:
                self.sv.trace("member_prune", precedences=sorted(gone))
            self._maybe_commit_change()
            if self.pending_change is None:
                return
        self._send_change()

    def _on_mc_ack(self, body):
        pc = self.pending_change
        if pc is None or body["change_seq"] != pc.change_seq:
            return
        if pc.record_ack(body["from"], body.get("need_state", False)):
            self._maybe_commit_change()

    def _maybe_commit_change(self):
        pc = self.pending_change
        if pc is None or pc.awaited():
            return
        self.pending_change = None
        self.gv = pc.view
        self.sv.trace("member_commit", kind=pc.kind, view=self.gv.view,
                      primary=self.my_precedence, members=self._member_list())
        if pc.kind == "add":
            m = self.gv.member_for(pc.target)
            if m is not None:
                self._reset_backup_deadline(m.precedence)
                self.backup_frontiers.setdefault(m.precedence, (0, 0))
                if pc.need_state:
                    self.sv.trace(
                        "digest",
                        point="state:%s/%d" % (pc.target.host_id,
                                               pc.target.pid),
                        value=self.app.digest())
                    self.state_retx = [pc.target, self._snapshot(),
                                       self.sv.now() + self.cfg.change_retx_us]
                    self._send_state()
        else:
            keep = {m.precedence for m in self.gv.members}
            self.backup_deadlines = {p: d for p, d in
                                     self.backup_deadlines.items()
                                     if p in keep}
            self.backup_frontiers = {p: f for p, f in
                                     self.backup_frontiers.items()
                                     if p in keep}
            self.ws.per_backup = {p: w for p, w in self.ws.per_backup.items()
                                  if p in keep}
        if self.change_queue:
            kind, birth = self.change_queue.pop(0)
            self._begin_change(kind, birth)

    def _send_state(self):
        target, snapshot, _ = self.state_retx
        key = cx.intra_group_key(self.gid)
        payload = {"kind": "checkpoint",
                   "target": list(target.as_tuple()), "snapshot": snapshot}
        self._mcast(Message(self._header(MessageType.STATE, key), (),
                            self._json_payload(payload)))

    def _state_retx_due(self, now):
        if self.state_retx is not None and now >= self.state_retx[2]:
            self.state_retx[2] = now + self.cfg.change_retx_us
            self._send_state()

    def _on_propose_backup(self, msg: Message):
        if not self.is_primary():
            return
        birth = BirthId(*json.loads(msg.payload)["birth"])
        if self.gv.member_for(birth):
            return
        pc = self.pending_change
        if pc is not None and pc.kind == "add" and pc.target == birth:
            return                  # duplicate; retransmission covers it
        if any(k == "add" and b == birth for k, b in self.change_queue):
            return
        self._begin_change("add", birth)

    def _on_membership_change(self, msg: Message):
        if msg.header.precedence != self.primary_precedence:
            return
        body = json.loads(msg.payload)
        members = tuple(ms.Member(BirthId(*b), prec, rank)
                        for (b, prec, rank) in body["members"])
        me = next((m for m in members if m.birth == self.birth), None)
        if me is None:
            self.sv.trace("pruned", by=self.primary_precedence)
            self._reset_and_rejoin()
            return
        self.gv = ms.GroupView(self.gid, body["view"], members,
                               self.primary_precedence)
        self.my_precedence = me.precedence
        self._arm_primary_watch()
        ack = {"kind": "mc", "change_seq": body["change_seq"],
               "from": self.my_precedence, "need_state": False}
        key = cx.intra_group_key(self.gid)
        self._mcast(Message(self._header(MessageType.MEMBERSHIP_ACK, key), (),
                            self._json_payload(ack)))

    # ------------------------------------------------------------- join flow

    def _send_propose_backup(self):
        key = cx.intra_group_key(self.gid)
        msg = Message(
            self._header(MessageType.PROPOSE_BACKUP, key, view=0,
                         precedence=0),
            (), self._json_payload({"birth": list(self.birth.as_tuple())}))
        self._mcast(msg)

    def _join_tick(self, now):
        if self.join_retx is None:
            return
        count, due = self.join_retx
        if now < due:
            return
        if count >= self.cfg.max_count:
            self._become_first_member()
            return
        self.join_retx = [count + 1, now + self.cfg.change_retx_us]
        self._send_propose_backup()

    def _become_first_member(self):
        self.join_retx = None
        self.joined = True
        self.my_precedence = 1
        self.primary_precedence = 1
        self.gv = ms.bootstrap_view(self.gid, [self.birth])
        self.rec.begin_view(1)
        self.stream.switch_view(1, 1)
        self.consumed = (1, 0)
        self.join_log = []
        self.sv.trace("member_commit", kind="bootstrap", view=1,
                      primary=1, members=self._member_list())

    def _joiner_accept(self, msg: Message):
        body = json.loads(msg.payload)
        if tuple(body["target"]) != self.birth.as_tuple():
            return
        members = tuple(ms.Member(BirthId(*b), prec, rank)
                        for (b, prec, rank) in body["members"])
        me = next((m for m in members if m.birth == self.birth), None)
        if me is None:
            return
        self.join_retx = None
        self.gv = ms.GroupView(self.gid, body["view"], members,
                               msg.header.precedence)
        self.my_precedence = me.precedence
        self.primary_precedence = msg.header.precedence
        ack = {"kind": "mc", "change_seq": body["change_seq"],
               "from": self.my_precedence, "need_state": True}
        key = cx.intra_group_key(self.gid)
        self._mcast(Message(self._header(MessageType.MEMBERSHIP_ACK, key), (),
                            self._json_payload(ack)))

    def _joiner_state(self, msg: Message):
        body = json.loads(msg.payload)
        if body.get("kind") != "checkpoint" or self.joined:
            return
        if tuple(body["target"]) != self.birth.as_tuple():
            return
        if self.gv is None:
            return                  # State arrived before AcceptBackup
        self._restore(body["snapshot"])
        self.joined = True
        key = cx.intra_group_key(self.gid)
        ack = {"kind": "state", "birth": list(self.birth.as_tuple())}
        self._mcast(Message(self._header(MessageType.MEMBERSHIP_ACK, key), (),
                            self._json_payload(ack)))
        self.sv.trace("member_join", view=self.gv.view,
                      precedence=self.my_precedence, rank=self.my_rank())
        self.sv.trace("digest", point="state:%s/%d" %
                      (self.birth.host_id, self.birth.pid),
                      value=self.app.digest())
        self._arm_primary_watch()
        log, self.join_log = self.join_log, []
        for raw in log:
            self._on_net(raw)
        self._consume_stream()

    # ------------------------------------------------------------ state xfer

    def _snapshot(self):
        conns = []
        for key, cs in self.conns.items():
            if key[0] == key[1]:
                continue
            conns.append({
                "key": [key[0], key[1], key[2], int(key[3])],
                "outbound_view": cs.outbound_view,
                "msg_seq_count": cs.msg_seq_count,
                "inbound_view": cs.inbound_view,
                "received_up_to": cs.received_up_to,
                "recv_gapfree_ts": cs.recv_gapfree_ts,
                "delivered_up_to": cs.delivered_up_to,
                "remote_wm": cs.remote_group_watermark,
                "sent": [[v, m, _b64e(encode(e.msg)), e.acked]
                         for (v, m), e in sorted(cs.sent.items())],
                "received": [[v, m, _b64e(encode(msg))]
                             for (v, m), msg in sorted(cs.received.items())
                             if msg is not None],
                "delivered": [[v, m, _b64e(encode(msg))]
                              for (v, m), msg in sorted(cs.delivered.items())],
            })
        tail = [e for i, e in sorted(self.store.items()) if i > self.consumed]
        return {
            "view": self.gv.as_json(),
            "app": self.app.checkpoint(),
            "my_ts": self.ws.my_timestamp,
            "gwm": self.ws.my_group_watermark,
            "recorder": [self.rec.view, self.rec.next_seq,
                         [[t, k[0], k[1], n] for (t, k), n in
                          sorted(self.rec.counts.items())]],
            "consumed": list(self.consumed),
            "update_seq": self.update_seq,
            "pending_requests": [[list(req), list(ident)]
                                 for req, ident in self.pending_requests],
            "recent_updates": [u for _, u in sorted(
                self.recent_updates.items())],
            "conns": conns,
            "tail": _b64e(encode_entries(tail)) if tail else "",
            "remote_store": {
                str(g): _b64e(encode_entries(
                    [e for _, e in sorted(st.items())]))
                for g, st in self.remote_store.items()},
            "virt_roles": [[list(k), v] for k, v in self.virt_roles.items()],
        }

    def _restore(self, snap):
        self.gv = ms.view_from_json(snap["view"])
        me = self.gv.member_for(self.birth)
        self.my_precedence = me.precedence
        self.primary_precedence = self.gv.primary_precedence
        self.app = self._app_factory(self.app_params, self.sv.trace)
        self.app.restore(snap["app"])
        self.ws.my_timestamp = snap["my_ts"]
        self.ws.my_group_watermark = snap["gwm"]
        rv, rn, counts = snap["recorder"]
        count_map = {(t, (k0, k1)): n for t, k0, k1, n in counts}
        self.rec.resume(rv, rn, count_map)
        self.rq = ReplayQueues()
        self.rq.counts = dict(count_map)
        self.consumed = tuple(snap["consumed"])
        self.update_seq = snap["update_seq"]
        self.pending_requests = [(tuple(req), ident)
                                 for req, ident in snap["pending_requests"]]
        for u in snap["recent_updates"]:
            self._remember_update(u)
        self.stream.switch_view(self.consumed[0], self.consumed[1] + 1)
        for k, v in snap["virt_roles"]:
            self.virt_roles[tuple(k)] = v
        for c in snap["conns"]:
            key = (c["key"][0], c["key"][1], c["key"][2], Role(c["key"][3]))
            cs = self._conn(key)
            cs.outbound_view = c["outbound_view"]
            cs.msg_seq_count = c["msg_seq_count"]
            cs.inbound_view = c["inbound_view"]
            cs.received_up_to = c["received_up_to"]
            cs.recv_gapfree_ts = c["recv_gapfree_ts"]
            cs.delivered_up_to = c["delivered_up_to"]
            cs.remote_group_watermark = c["remote_wm"]
            for v, m, raw, acked in c["sent"]:
                cs.sent[(v, m)] = cx.SentEntry(decode(_b64d(raw)),
                                               acked=acked, logged_only=True)
            for v, m, raw in c["received"]:
                msg = decode(_b64d(raw))
                cs.received[(v, m)] = msg
                self.sv.ledger_note(msg.header)
            for v, m, raw in c["delivered"]:
                msg = decode(_b64d(raw))
                cs.delivered[(v, m)] = msg
                self.sv.ledger_note(msg.header)
        if snap["tail"]:
            for e in decode_entries(_b64d(snap["tail"])):
                self._offer_own(e)
        for g, raw in snap["remote_store"].items():
            store = self.remote_store.setdefault(int(g), {})
            for e in decode_entries(_b64d(raw)):
                store.setdefault(e.ident(), e)

    def _on_state(self, msg: Message):
        body = json.loads(msg.payload)
        if body.get("kind") == "update" and not self.is_primary():
            self._apply_update(body["update"])

    # --------------------------------------------------------------- resets

    def _reset_and_rejoin(self):
        self.sv.trace("member_reset", old_precedence=self.my_precedence)
        self._fresh_state()
        self._begin_join()

    # ------------------------------------------------------------ app events

    def _on_app_event(self):
        if not self.joined or not self.is_primary() or self.recovery:
            return
        if hasattr(self.app, "step_primary"):
            self.app.step_primary(_PrimaryOps(self), self.sv.rng)
        elif hasattr(self.app, "next_request"):
            payload = self.app.next_request()
            if payload is None:
                return
            target = int(self.app_params.get("target_gid", 0))
            rid = json.loads(payload)["id"]
            self.sv.trace("request", req=rid)
            self.send_app(self._out_key(target), payload, paced=True)

    # -------------------------------------------------------------- finalize

    def finalize(self):
        """End-of-run bookkeeping for the checkers."""
        sent = sum(len(cs.sent) for cs in self.conns.values())
        delivered = sum(len(cs.delivered) for cs in self.conns.values())
        self.sv.trace("buffers", sent=sent, delivered=delivered,
                      nacks=sum(len(cs.nacks) for cs in self.conns.values()))
        self.sv.trace("digest", point="final", value=self.app.digest())


class _PrimaryOps:
    """Recording facade handed to a task application at the primary."""

    def __init__(self, eng: ReplicaEngine):
        self.eng = eng

    def record_mutex(self, task, mutex, meta):
        self.eng._register_emitted(self.eng.rec.record_mutex(task, mutex,
                                                             meta))
        return meta

    def record_clock(self, task) -> int:
        value = self.eng.vgc.read_at_primary(self.eng.sv.physical_clock())
        self.eng._register_emitted(self.eng.rec.record_clock(task, 0, value))
        return value

    def record_socket(self, task, fd, op, meta):
        self.eng._register_emitted(self.eng.rec.record_socket(task, fd, op,
                                                              meta))
        return meta

    def task_write(self, task, target_gid, payload, fail=False) -> bool:
        eng = self.eng
        out_key = eng._out_key(target_gid)
        slot = (out_key, task)
        if fail:
            msn, attempts = eng._write_attempts.get(
                slot, (eng._conn(out_key).next_msg_seq(), 0))
            attempts += 1
            eng._write_attempts[slot] = (msn, attempts)
            self.record_socket(task, target_gid, SocketOp.WRITE,
                               OpMeta(ERR_WOULD_BLOCK))
            cs = eng._conn(out_key)
            mtype = MessageType.REQUEST if out_key[3] == Role.CLIENT \
                else MessageType.REPLY
            eng._emit_msg_order(cs.outbound_view, mtype, out_key[2],
                                target_gid, attempts, target_gid, msn, 0,
                                out_key)
            return False
        msn, _ = eng._write_attempts.pop(slot, (None, 0))
        self.record_socket(task, target_gid, SocketOp.WRITE, OpMeta(OK))
        eng.send_app(out_key, payload, sock_fd=target_gid, forced_msn=msn)
        return True


class _BackupOps:
    """Replay facade handed to a task application at a backup."""

    def __init__(self, eng: ReplicaEngine):
        self.eng = eng

    def peek(self, task, okey):
        if not self.eng.rq.head_matches(task, okey):
            return None
        return self.eng.rq.head(okey).body

    def try_consume(self, task, okey):
        eng = self.eng
        if not eng.rq.head_matches(task, okey):
            return None
        entry = eng.rq.consume(task, okey)
        if entry.order_type == OrderType.TIME_ORDER:
            eng.vgc.replay_at_backup(entry.body.meta.values[0],
                                     eng.sv.physical_clock())
        eng.sv.trace("tuple_consume", view=entry.view, seq=entry.order_seq,
                     task=task, okey="%s:%s" % (okey[0], okey[1]))
        return entry

    def queue_outbound(self, target_gid, payload):
        out_key = self.eng._out_key(target_gid)
        self.eng.outbox.setdefault(out_key, []).append(payload)

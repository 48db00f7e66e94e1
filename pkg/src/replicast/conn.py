"""Per-connection reliable delivery: sequencing, gap detection, acks, nacks.

A ConnectionState tracks one direction of a virtual connection at one member.
The directed key is (source_group, dest_group, conn_seq, role); the member
uses the sending-side fields when its group is the source and the receiving
side fields when its group is the destination.  Message sequence numbers
restart at one on a primary view change, so the sent/received/delivered
buffers are keyed by (view, msn).  All mutation happens on the owning replica
engine's event loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .wire import Message, Role


def reverse_key(key):
    """The opposite direction of the same virtual connection."""
    src, dst, conn_seq, role = key
    flip = Role.SERVER if role == Role.CLIENT else Role.CLIENT
    return (dst, src, conn_seq, flip)


def intra_group_key(group_id: int):
    return (group_id, group_id, 0, Role.SERVER)


class Receive(Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"
    GAP = "gap"
    STALE_VIEW = "stale_view"
    FUTURE_VIEW = "future_view"
    SUPERSEDED = "superseded"


@dataclass
class SentEntry:
    msg: Message
    acked: bool = False
    first_ack_count: int = 0
    last_send_us: int = 0
    logged_only: bool = False   # backup copy: retained but never multicast


@dataclass
class ConnectionState:
    key: tuple

    # sending side
    outbound_view: int = 0
    msg_seq_count: int = 0                  # last assigned outgoing msn
    sent: dict = field(default_factory=dict)        # (view, msn) -> SentEntry
    remote_group_watermark: int = 0
    send_gap_us: int = 0                    # nonzero while flow control active
    next_send_not_before: int = 0
    flow_flagged: tuple = ()                # (view, msn) that tripped flow control
    paced_backlog: list = field(default_factory=list)
    keepalive_deadline: int = 0

    # receiving side
    inbound_view: int = 0                   # 0 until the remote view is known
    received: dict = field(default_factory=dict)    # (view, msn) -> Message | None
    received_up_to: int = 0                 # within inbound_view
    recv_gapfree_ts: int = 0                # timestamp at received_up_to
    delivered: dict = field(default_factory=dict)   # (view, msn) -> Message
    delivered_up_to: int = 0                # within inbound_view (primary path)
    nacks: set = field(default_factory=set)         # msn within inbound_view
    # FirstAck duty of the receiving side
    first_ack_msn: int = 0
    first_ack_stopped: bool = True
    first_ack_started: bool = False
    first_ack_due_us: int = 0

    def next_msg_seq(self) -> int:
        self.msg_seq_count += 1
        return self.msg_seq_count

    def max_known_msn(self) -> int:
        v = self.inbound_view
        return max((m for (w, m) in self.received if w == v),
                   default=self.received_up_to)


def receive_app_message(cs: ConnectionState, msg: Message):
    """Inbound handling: view screening, duplicates, gap placeholders.

    Returns (outcome, newly_missing) where newly_missing lists sequence
    numbers for which placeholders were just created.
    """
    if cs.inbound_view == 0:
        cs.inbound_view = msg.header.view
    if msg.header.view < cs.inbound_view:
        return Receive.STALE_VIEW, ()
    if msg.header.view > cs.inbound_view:
        # remote primary changed; its NewPrimaryView will reset us, and the
        # sender keeps retransmitting until acked
        return Receive.FUTURE_VIEW, ()

    v, msn = cs.inbound_view, msg.header.msg_seq
    if msn <= cs.received_up_to or cs.received.get((v, msn)) is not None:
        return Receive.DUPLICATE, ()

    outcome = Receive.ACCEPTED
    missing = []
    top = cs.max_known_msn()
    if msn > top + 1:
        for m in range(top + 1, msn):
            cs.received[(v, m)] = None
            cs.nacks.add(m)
            missing.append(m)
        outcome = Receive.GAP
    if (v, msn) in cs.received:     # fills a placeholder
        cs.nacks.discard(msn)
    cs.received[(v, msn)] = msg
    _advance_gap_free(cs)
    return outcome, tuple(missing)


def _advance_gap_free(cs: ConnectionState):
    v = cs.inbound_view
    while cs.received.get((v, cs.received_up_to + 1)) is not None:
        cs.received_up_to += 1
        cs.recv_gapfree_ts = cs.received[(v, cs.received_up_to)].header.timestamp


def reveal_missing(cs: ConnectionState, up_to_msn: int):
    """Learn (via an ack or an order entry) that messages up to up_to_msn
    exist; create placeholders and nack entries for any not yet received."""
    v = cs.inbound_view
    missing = []
    for m in range(cs.max_known_msn() + 1, up_to_msn + 1):
        cs.received[(v, m)] = None
        cs.nacks.add(m)
        missing.append(m)
    return tuple(missing)


def deliverable(cs: ConnectionState):
    """Next in-order message if held (primary delivery path)."""
    return cs.received.get((cs.inbound_view, cs.delivered_up_to + 1))


def mark_delivered_next(cs: ConnectionState) -> Message:
    v, msn = cs.inbound_view, cs.delivered_up_to + 1
    msg = cs.received.pop((v, msn))
    cs.delivered[(v, msn)] = msg
    cs.delivered_up_to = msn
    return msg


def take_ordered(cs: ConnectionState, view: int, msn: int):
    """Backup delivery of the exact message an order names, if held."""
    msg = cs.received.get((view, msn))
    if msg is None:
        return None
    del cs.received[(view, msn)]
    cs.delivered[(view, msn)] = msg
    if view == cs.inbound_view and msn == cs.delivered_up_to + 1:
        cs.delivered_up_to = msn
    return msg


def record_sent(cs: ConnectionState, msg: Message, now_us: int,
                logged_only: bool = False):
    h = msg.header
    cs.sent[(h.view, h.msg_seq)] = SentEntry(
        msg, last_send_us=now_us, logged_only=logged_only)


def apply_ack(cs: ConnectionState, ack_view: int, ack: int) -> int:
    """Mark our sent messages covered by a cumulative ack; returns count."""
    n = 0
    for (v, msn), entry in cs.sent.items():
        if v == ack_view and msn <= ack and not entry.acked:
            entry.acked = True
            n += 1
    return n


def due_retransmits(cs: ConnectionState, now_us: int, timeout_us: int):
    """Unacked current-view sent messages past their retransmission timeout."""
    due = []
    for (v, msn) in sorted(cs.sent):
        e = cs.sent[(v, msn)]
        if (v == cs.outbound_view and not e.acked and not e.logged_only
                and now_us - e.last_send_us >= timeout_us):
            due.append(e)
    return due


def note_received_progress(cs: ConnectionState, now_us: int, delay_us: int):
    """Arm (or re-arm) the FirstAck duty after gap-free progress."""
    if cs.received_up_to > cs.first_ack_msn:
        cs.first_ack_msn = cs.received_up_to
        cs.first_ack_stopped = False
        cs.first_ack_started = False
        cs.first_ack_due_us = now_us + delay_us


def ack_carried_by_send(cs: ConnectionState, ack: int):
    """An outbound application message carried this ack; a FirstAck is not
    needed unless one is already in flight awaiting its SecondAck."""
    if not cs.first_ack_started and ack >= cs.first_ack_msn:
        cs.first_ack_stopped = True


def first_ack_due(cs: ConnectionState, now_us: int) -> bool:
    return (not cs.first_ack_stopped and cs.first_ack_msn > 0
            and now_us >= cs.first_ack_due_us)


def stop_first_ack(cs: ConnectionState, ack: int):
    if ack >= cs.first_ack_msn:
        cs.first_ack_stopped = True


def gc_sent(cs: ConnectionState):
    """Drop sent messages whose timestamp the remote group watermark covers."""
    drop = [k for k, e in cs.sent.items()
            if e.msg.header.timestamp <= cs.remote_group_watermark]
    for k in drop:
        del cs.sent[k]
    return drop


def gc_delivered(cs: ConnectionState, group_watermark: int):
    """Drop delivered messages whose timestamp the group watermark covers."""
    drop = [k for k, m in cs.delivered.items()
            if m.header.timestamp <= group_watermark]
    for k in drop:
        del cs.delivered[k]
    return drop


def find_for_retransmit(cs: ConnectionState, view: int, msns):
    """Messages we hold, sent or received, matching a nack."""
    out = []
    for msn in msns:
        e = cs.sent.get((view, msn))
        if e is not None and not e.logged_only:
            out.append(e.msg)
            continue
        m = cs.delivered.get((view, msn)) or cs.received.get((view, msn))
        if m is not None:
            out.append(m)
    return out


def reset_inbound_for_view(cs: ConnectionState, new_view: int) -> int:
    """On a remote primary change: discard messages received after the last
    gap-free one and expect the new view from sequence number one.  Real
    messages at or below the gap-free point stay buffered (a backup may still
    owe them to the application once ordered)."""
    stale = [(w, m) for (w, m) in cs.received
             if cs.received[(w, m)] is None
             or (w == cs.inbound_view and m > cs.received_up_to)]
    flushed = 0
    for k in stale:
        if cs.received[k] is not None:
            flushed += 1
        del cs.received[k]
    cs.nacks.clear()
    cs.inbound_view = new_view
    cs.received_up_to = 0      # recv_gapfree_ts carries forward for watermarks
    cs.delivered_up_to = 0
    cs.first_ack_msn = 0
    cs.first_ack_stopped = True
    cs.first_ack_started = False
    return flushed


def renumber_sent_after_cut(cs: ConnectionState, old_view: int, new_view: int,
                            cut_msn: int, precedence: int):
    """Virtual synchrony renumbering at a view change of our own group.

    Logged sends the remote group had not received (msn beyond the cut) are
    renumbered consecutively from one under the new view, keeping their
    original timestamps and payloads; sends the remote already has are left
    for watermark GC and treated as acknowledged.  Returns the renumbered
    entries in order.
    """
    moved = []
    for (v, msn) in sorted(k for k in cs.sent if k[0] == old_view):
        e = cs.sent[(v, msn)]
        if msn <= cut_msn:
            e.acked = True
        else:
            del cs.sent[(v, msn)]
            moved.append(e)
    cs.outbound_view = new_view
    cs.msg_seq_count = 0
    out = []
    for e in moved:
        msn = cs.next_msg_seq()
        h = replace(e.msg.header, view=new_view, msg_seq=msn,
                    precedence=precedence, ack_view=0, ack=0)
        ne = SentEntry(Message(h, e.msg.entries, e.msg.payload),
                       logged_only=e.logged_only)
        cs.sent[(new_view, msn)] = ne
        out.append(ne)
    return out

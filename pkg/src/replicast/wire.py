"""Message types, headers, ordering records and their canonical byte encoding.

Everything here is an immutable value type.  The encoding is fixed-width
little-endian with length-prefixed sections (header, order-entry list,
payload); the exact byte offsets are documented in the README.  Payloads are
opaque byte strings at this layer -- control messages put canonical JSON in
them, application messages put whatever the application produced.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union


class MalformedMessage(Exception):
    """Raised by decode() on truncated, unknown or invariant-violating input."""


class MessageType(IntEnum):
    REQUEST = 1
    REPLY = 2
    FIRST_ACK = 3
    SECOND_ACK = 4
    NACK = 5
    HEARTBEAT = 6
    KEEP_ALIVE = 7
    PROPOSE_PRIMARY = 8
    NEW_PRIMARY_VIEW = 9
    PROPOSE_BACKUP = 10
    ACCEPT_BACKUP = 11
    REMOVE_BACKUP = 12
    STATE = 13
    MEMBERSHIP_ACK = 14


#: The two message types that carry application payload and a non-zero
#: per-connection sequence number.
APP_TYPES = (MessageType.REQUEST, MessageType.REPLY)


class Role(IntEnum):
    CLIENT = 0
    SERVER = 1


class OrderType(IntEnum):
    MSG_ORDER = 1
    MUTEX_ORDER = 2
    TIME_ORDER = 3
    SOCKET_ORDER = 4
    VIEW_CHANGE_ORDER = 5


class SocketOp(IntEnum):
    READ = 1
    WRITE = 2
    SELECT_POLL = 3


@dataclass(frozen=True)
class BirthId:
    """Identity of one process incarnation; a restarted process gets a new one."""

    host_id: str
    pid: int
    ts: int

    def as_tuple(self):
        return (self.host_id, self.pid, self.ts)


@dataclass(frozen=True)
class Header:
    msg_type: MessageType
    source_group: int
    dest_group: int
    conn_seq: int
    role: Role
    view: int           # primary view number of the sending group
    precedence: int     # precedence of the sending group's primary
    msg_seq: int        # non-zero iff Request/Reply
    ack_view: int       # view of the message named by `ack`
    ack: int            # last msg seq received without a gap on the connection
    back: int           # timestamp watermark (group or member, role-dependent)
    timestamp: int      # Lamport timestamp

    def conn_key(self):
        return (self.source_group, self.dest_group, self.conn_seq, self.role)


@dataclass(frozen=True)
class OpMeta:
    """Result metadata of one sanitized operation: status plus out-values."""

    status: int = 0
    values: tuple = ()


@dataclass(frozen=True)
class MsgOrder:
    view: int           # view of the ordered message's sender
    msg_type: MessageType
    conn_seq: int
    sock_fd: int
    opaque: int         # range offset for merged entries, retry count for failed writes
    remote_group: int
    msg_seq: int
    order_seq: int
    timestamp: int = 0  # Lamport timestamp of the ordered message

    def covers(self):
        """Sequence numbers denoted by this (possibly merged) entry."""
        return range(self.msg_seq, self.msg_seq + self.opaque + 1)


@dataclass(frozen=True)
class MutexOrder:
    task: int
    mutex: int
    count: int
    meta: OpMeta = field(default_factory=OpMeta)


@dataclass(frozen=True)
class TimeOrder:
    task: int
    clock: int
    count: int
    meta: OpMeta = field(default_factory=OpMeta)


@dataclass(frozen=True)
class SocketOrder:
    task: int
    sock_fd: int
    op: SocketOp
    count: int
    meta: OpMeta = field(default_factory=OpMeta)


@dataclass(frozen=True)
class ViewChangeOrder:
    """Marks the virtual synchrony point at which backups switch views.

    `cuts` carries, per inter-group connection, the last sequence number the
    remote group had received from the failed primary; every member renumbers
    its logged messages beyond that cut identically.
    """

    prev_view: int
    prev_last_seq: int
    new_view: int
    primary_precedence: int
    cuts: tuple = ()    # ((src, dst, conn_seq, role, recv_up_to), ...)


OrderBody = Union[MsgOrder, MutexOrder, TimeOrder, SocketOrder, ViewChangeOrder]

_BODY_TYPES = {
    OrderType.MSG_ORDER: MsgOrder,
    OrderType.MUTEX_ORDER: MutexOrder,
    OrderType.TIME_ORDER: TimeOrder,
    OrderType.SOCKET_ORDER: SocketOrder,
    OrderType.VIEW_CHANGE_ORDER: ViewChangeOrder,
}


@dataclass(frozen=True)
class OrderEntry:
    order_type: OrderType
    source_group: int   # group whose primary created the entry
    view: int           # view of the primary that created the entry
    order_seq: int      # per-view counter, consecutive from 1
    body: OrderBody

    def ident(self):
        return (self.view, self.order_seq)


@dataclass(frozen=True)
class Message:
    header: Header
    entries: tuple = ()
    payload: bytes = b""


# --- binary encoding ------------------------------------------------------

_HDR = struct.Struct("<BIIIBIIQIQQQ")
_META_HDR = struct.Struct("<iB")
_MSG_ORDER = struct.Struct("<IBIhHIQQQ")
_MUTEX_ORDER = struct.Struct("<IIQ")
_TIME_ORDER = struct.Struct("<IIQ")
_SOCKET_ORDER = struct.Struct("<IiBQ")
_VC_ORDER = struct.Struct("<IQIIH")
_VC_CUT = struct.Struct("<IIIBQ")
_ENTRY_HDR = struct.Struct("<BIIQ")


def _pack_meta(meta: OpMeta) -> bytes:
    return _META_HDR.pack(meta.status, len(meta.values)) + struct.pack(
        "<%dq" % len(meta.values), *meta.values
    )


def _check_header(h: Header):
    if (h.msg_seq > 0) != (h.msg_type in APP_TYPES):
        raise MalformedMessage(
            "msg_seq %d invalid for %s" % (h.msg_seq, h.msg_type.name)
        )


def encode(msg: Message) -> bytes:
    """Serialize a message; deterministic and self-delimiting."""
    h = msg.header
    _check_header(h)
    out = [
        _HDR.pack(
            h.msg_type, h.source_group, h.dest_group, h.conn_seq, h.role,
            h.view, h.precedence, h.msg_seq, h.ack_view, h.ack, h.back,
            h.timestamp,
        ),
        struct.pack("<H", len(msg.entries)),
    ]
    for e in msg.entries:
        out.append(_ENTRY_HDR.pack(e.order_type, e.source_group, e.view,
                                   e.order_seq))
        b = e.body
        if e.order_type == OrderType.MSG_ORDER:
            out.append(_MSG_ORDER.pack(
                b.view, b.msg_type, b.conn_seq, b.sock_fd, b.opaque,
                b.remote_group, b.msg_seq, b.order_seq, b.timestamp))
        elif e.order_type == OrderType.MUTEX_ORDER:
            out.append(_MUTEX_ORDER.pack(b.task, b.mutex, b.count))
            out.append(_pack_meta(b.meta))
        elif e.order_type == OrderType.TIME_ORDER:
            out.append(_TIME_ORDER.pack(b.task, b.clock, b.count))
            out.append(_pack_meta(b.meta))
        elif e.order_type == OrderType.SOCKET_ORDER:
            out.append(_SOCKET_ORDER.pack(b.task, b.sock_fd, b.op, b.count))
            out.append(_pack_meta(b.meta))
        else:
            out.append(_VC_ORDER.pack(
                b.prev_view, b.prev_last_seq, b.new_view,
                b.primary_precedence, len(b.cuts)))
            for cut in b.cuts:
                out.append(_VC_CUT.pack(*cut))
    out.append(struct.pack("<I", len(msg.payload)))
    out.append(msg.payload)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, st: struct.Struct):
        end = self.off + st.size
        if end > len(self.buf):
            raise MalformedMessage("truncated at offset %d" % self.off)
        vals = st.unpack_from(self.buf, self.off)
        self.off = end
        return vals

    def take_bytes(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.buf):
            raise MalformedMessage("truncated at offset %d" % self.off)
        b = self.buf[self.off:end]
        self.off = end
        return b

    def done(self):
        if self.off != len(self.buf):
            raise MalformedMessage("%d trailing bytes" % (len(self.buf) - self.off))


def _unpack_meta(r: _Reader) -> OpMeta:
    status, n = r.take(_META_HDR)
    vals = struct.unpack("<%dq" % n, r.take_bytes(8 * n)) if n else ()
    return OpMeta(status, tuple(vals))


def _enum(cls, raw, what):
    try:
        return cls(raw)
    except ValueError:
        raise MalformedMessage("unknown %s tag %d" % (what, raw)) from None


def decode(buf: bytes) -> Message:
    """Inverse of encode(); raises MalformedMessage on anything suspicious."""
    r = _Reader(buf)
    raw = r.take(_HDR)
    header = Header(
        _enum(MessageType, raw[0], "message type"), raw[1], raw[2], raw[3],
        _enum(Role, raw[4], "role"), *raw[5:])
    _check_header(header)
    (n_entries,) = r.take(struct.Struct("<H"))
    entries = []
    for _ in range(n_entries):
        etype_raw, esrc, eview, eseq = r.take(_ENTRY_HDR)
        etype = _enum(OrderType, etype_raw, "order type")
        if etype == OrderType.MSG_ORDER:
            f = r.take(_MSG_ORDER)
            body = MsgOrder(f[0], _enum(MessageType, f[1], "message type"), *f[2:])
        elif etype == OrderType.MUTEX_ORDER:
            f = r.take(_MUTEX_ORDER)
            body = MutexOrder(*f, meta=_unpack_meta(r))
        elif etype == OrderType.TIME_ORDER:
            f = r.take(_TIME_ORDER)
            body = TimeOrder(*f, meta=_unpack_meta(r))
        elif etype == OrderType.SOCKET_ORDER:
            task, fd, op_raw, count = r.take(_SOCKET_ORDER)
            body = SocketOrder(task, fd, _enum(SocketOp, op_raw, "socket op"),
                               count, meta=_unpack_meta(r))
        else:
            pv, pls, nv, prec, n_cuts = r.take(_VC_ORDER)
            cuts = tuple(r.take(_VC_CUT) for _ in range(n_cuts))
            body = ViewChangeOrder(pv, pls, nv, prec, cuts)
        entries.append(OrderEntry(etype, esrc, eview, eseq, body))
    (plen,) = r.take(struct.Struct("<I"))
    payload = r.take_bytes(plen)
    r.done()
    return Message(header, tuple(entries), payload)


def merge_msg_orders(entries: list) -> list:
    """Collapse runs of contiguous per-connection message orders.

    Consecutive entries for the same (conn_seq, remote_group, msg_type,
    sock_fd) whose sequence numbers and timestamps are both contiguous fold
    into one entry whose opaque field holds range length - 1.  Anything else
    passes through unchanged.  Idempotent.
    """
    out: list = []
    for e in entries:
        if out and e.order_type == OrderType.MSG_ORDER:
            prev = out[-1]
            if prev.order_type == OrderType.MSG_ORDER \
                    and prev.source_group == e.source_group:
                a, b = prev.body, e.body
                if (
                    (a.conn_seq, a.remote_group, a.msg_type, a.sock_fd, a.view)
                    == (b.conn_seq, b.remote_group, b.msg_type, b.sock_fd, b.view)
                    and b.msg_seq == a.msg_seq + a.opaque + 1
                    and b.opaque == 0
                    and b.timestamp == a.timestamp + a.opaque + 1
                    and b.order_seq == a.order_seq + a.opaque + 1
                ):
                    out[-1] = OrderEntry(
                        prev.order_type, prev.source_group, prev.view,
                        prev.order_seq,
                        MsgOrder(a.view, a.msg_type, a.conn_seq, a.sock_fd,
                                 a.opaque + 1, a.remote_group, a.msg_seq,
                                 a.order_seq, a.timestamp))
                    continue
        out.append(e)
    return out


def expand_msg_order(entry: OrderEntry):
    """Undo merging: yield one single-message entry per covered seq number."""
    b = entry.body
    for i in range(b.opaque + 1):
        yield OrderEntry(
            OrderType.MSG_ORDER, entry.source_group, entry.view,
            entry.order_seq + i,
            MsgOrder(b.view, b.msg_type, b.conn_seq, b.sock_fd, 0,
                     b.remote_group, b.msg_seq + i, b.order_seq + i,
                     b.timestamp + i if b.timestamp else 0))


def encode_entries(entries) -> bytes:
    """Standalone encoding of an entry list (used inside control payloads)."""
    return encode(Message(_ENTRIES_CARRIER, tuple(entries)))


def decode_entries(buf: bytes):
    return decode(buf).entries


_ENTRIES_CARRIER = Header(
    MessageType.HEARTBEAT, 0, 0, 0, Role.SERVER, 0, 0, 0, 0, 0, 0, 0)

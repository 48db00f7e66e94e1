"""Lamport timestamping and timestamp-watermark buffer management.

Each member keeps a Lamport clock for stamping outgoing application messages
and a timestamp watermark: the largest timestamp below which it has received
everything on all of its inbound connections.  The group watermark (minimum
over members) circulates in the `back` header field and drives garbage
collection of the sent and delivered buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import conn as _conn


@dataclass
class WatermarkState:
    my_timestamp: int = 0
    my_group_watermark: int = 0
    per_backup: dict = field(default_factory=dict)   # precedence -> watermark

    def stamp_outgoing(self) -> int:
        """Lamport rule for an originated application message."""
        self.my_timestamp += 1
        return self.my_timestamp

    def stamp_as(self, timestamp: int) -> int:
        """Adopt the primary's timestamp for a logged copy of its message."""
        self.my_timestamp = max(self.my_timestamp, timestamp)
        return timestamp

    def observe(self, timestamp: int):
        self.my_timestamp = max(self.my_timestamp, timestamp)


def timestamp_watermark(connections) -> int:
    """Minimum over inbound connections of the last gap-free timestamp."""
    wm = None
    for cs in connections:
        wm = cs.recv_gapfree_ts if wm is None else min(wm, cs.recv_gapfree_ts)
    return 0 if wm is None else wm


def group_watermark(ws: WatermarkState, own_watermark: int,
                    backup_precedences) -> int:
    """Primary-side minimum of its own and every backup's reported watermark.

    Backups that have not reported yet hold the watermark at zero; the result
    never moves backward within a view.
    """
    wm = own_watermark
    for prec in backup_precedences:
        wm = min(wm, ws.per_backup.get(prec, 0))
    ws.my_group_watermark = max(ws.my_group_watermark, wm)
    return ws.my_group_watermark


def back_field(ws: WatermarkState, is_primary: bool, own_watermark: int,
               backup_precedences=()) -> int:
    """Value carried in the back header field (Fig-style, role dependent)."""
    if is_primary:
        return group_watermark(ws, own_watermark, backup_precedences)
    return own_watermark


def garbage_collect(ws: WatermarkState, connections, my_group_id: int) -> int:
    """Watermark-driven removal from all sent and delivered buffers.

    Returns the number of messages removed.  Intra-group bookkeeping entries
    are collected with the local group watermark on both sides.
    """
    removed = 0
    for cs in connections:
        if cs.key[0] == my_group_id and cs.key[0] == cs.key[1]:
            cs.remote_group_watermark = ws.my_group_watermark
        removed += len(_conn.gc_sent(cs))
        removed += len(_conn.gc_delivered(cs, ws.my_group_watermark))
    return removed

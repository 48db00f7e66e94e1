"""Primary-backup group replication stack on a deterministic network simulator.

The package is organized around the protocol layers: `wire` (message formats),
`conn` (reliable ordered delivery per connection), `buffers` (Lamport
timestamps and watermark garbage collection), `membership` (leader-determined
group membership), `determinizer` (record/replay of non-deterministic
operations), `replica` (the per-process engine), `simnet` (the seeded
discrete-event simulator) and `harness` (scenario running and trace checkers).
"""

from .wire import (
    BirthId,
    Header,
    MalformedMessage,
    Message,
    MessageType,
    MsgOrder,
    MutexOrder,
    OpMeta,
    OrderEntry,
    OrderType,
    Role,
    SocketOp,
    SocketOrder,
    TimeOrder,
    ViewChangeOrder,
    decode,
    encode,
    merge_msg_orders,
)

__all__ = [
    "BirthId",
    "Header",
    "MalformedMessage",
    "Message",
    "MessageType",
    "MsgOrder",
    "MutexOrder",
    "OpMeta",
    "OrderEntry",
    "OrderType",
    "Role",
    "SocketOp",
    "SocketOrder",
    "TimeOrder",
    "ViewChangeOrder",
    "decode",
    "encode",
    "merge_msg_orders",
]

from replicast import buffers, conn
from replicast.wire import Header, Message, MessageType, Role


def test_fresh_clock_first_stamp_is_one():
    ws = buffers.WatermarkState()
    assert ws.stamp_outgoing() == 1


def test_lamport_rule_after_observation():
    ws = buffers.WatermarkState()
    ws.observe(10)
    assert ws.stamp_outgoing() == 11


def test_backup_adopts_primary_timestamp():
    ws = buffers.WatermarkState()
    ws.my_timestamp = 3
    assert ws.stamp_as(7) == 7
    assert ws.my_timestamp == 7
    # a lower primary timestamp never rolls the local clock back
    assert ws.stamp_as(5) == 5
    assert ws.my_timestamp == 7


def test_back_field_primary_takes_group_minimum():
    ws = buffers.WatermarkState()
    ws.per_backup = {2: 7, 3: 12}
    assert buffers.back_field(ws, True, own_watermark=9,
                              backup_precedences=[2, 3]) == 7


def test_back_field_backup_passthrough():
    ws = buffers.WatermarkState()
    assert buffers.back_field(ws, False, own_watermark=5) == 5


def test_back_field_no_backups_is_own_watermark():
    ws = buffers.WatermarkState()
    assert buffers.back_field(ws, True, own_watermark=9,
                              backup_precedences=[]) == 9


def test_group_watermark_never_regresses():
    ws = buffers.WatermarkState()
    ws.per_backup = {2: 8}
    assert buffers.group_watermark(ws, 9, [2]) == 8
    ws.per_backup = {2: 8, 3: 0}   # newly added backup has not reported
    assert buffers.group_watermark(ws, 9, [2, 3]) == 8


def test_timestamp_watermark_is_min_over_connections():
    a = conn.ConnectionState((1, 2, 1, Role.CLIENT))
    b = conn.ConnectionState((3, 2, 1, Role.CLIENT))
    a.recv_gapfree_ts, b.recv_gapfree_ts = 9, 4
    assert buffers.timestamp_watermark([a, b]) == 4
    assert buffers.timestamp_watermark([]) == 0


def _sent(cs, msn, ts):
    h = Header(MessageType.REQUEST, *cs.key, 1, 1, msn, 0, 0, 0, ts)
    conn.record_sent(cs, Message(h), now_us=0)


def test_garbage_collect_both_rules():
    ws = buffers.WatermarkState()
    ws.my_group_watermark = 5
    out = conn.ConnectionState((2, 1, 1, Role.SERVER))
    out.remote_group_watermark = 4
    _sent(out, 1, ts=4)    # covered by remote watermark
    _sent(out, 2, ts=6)    # retained
    inbound = conn.ConnectionState((1, 2, 1, Role.CLIENT))
    h = Header(MessageType.REQUEST, 1, 2, 1, Role.CLIENT, 1, 1, 1, 0, 0, 0, 5)
    conn.receive_app_message(inbound, Message(h))
    conn.mark_delivered_next(inbound)
    removed = buffers.garbage_collect(ws, [out, inbound], my_group_id=2)
    assert removed == 2
    assert list(out.sent) == [(1, 2)]
    assert inbound.delivered == {}

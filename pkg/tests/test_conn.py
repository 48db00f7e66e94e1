from replicast import conn
from replicast.wire import Header, Message, MessageType, Role


KEY = (1, 2, 1, Role.CLIENT)


def app_msg(msn, view=1, ts=None, payload=b"x"):
    h = Header(
        msg_type=MessageType.REQUEST, source_group=1, dest_group=2,
        conn_seq=1, role=Role.CLIENT, view=view, precedence=1, msg_seq=msn,
        ack_view=0, ack=0, back=0, timestamp=ts if ts is not None else msn,
    )
    return Message(h, (), payload)


def fresh():
    cs = conn.ConnectionState(KEY)
    cs.outbound_view = 1
    return cs


def test_first_send_gets_msn_one():
    cs = fresh()
    assert cs.next_msg_seq() == 1
    assert cs.next_msg_seq() == 2


def test_gap_creates_placeholder_and_nack():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    outcome, missing = conn.receive_app_message(cs, app_msg(3))
    assert outcome == conn.Receive.GAP
    assert missing == (2,)
    assert cs.nacks == {2}
    assert cs.received_up_to == 1
    assert cs.received[(1, 2)] is None


def test_retransmission_fills_placeholder():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    conn.receive_app_message(cs, app_msg(3))
    outcome, _ = conn.receive_app_message(cs, app_msg(2))
    assert outcome == conn.Receive.ACCEPTED
    assert cs.nacks == set()
    assert cs.received_up_to == 3


def test_duplicate_discarded_without_state_change():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    before = (dict(cs.received), cs.received_up_to, set(cs.nacks))
    outcome, _ = conn.receive_app_message(cs, app_msg(1))
    assert outcome == conn.Receive.DUPLICATE
    assert (dict(cs.received), cs.received_up_to, set(cs.nacks)) == before


def test_stale_and_future_views_dropped():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1, view=2))
    assert conn.receive_app_message(cs, app_msg(1, view=1))[0] \
        == conn.Receive.STALE_VIEW
    assert conn.receive_app_message(cs, app_msg(1, view=3))[0] \
        == conn.Receive.FUTURE_VIEW


def test_primary_delivery_skips_placeholder():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(2))
    assert conn.deliverable(cs) is None          # head is a placeholder
    conn.receive_app_message(cs, app_msg(1))
    m = conn.deliverable(cs)
    assert m.header.msg_seq == 1
    conn.mark_delivered_next(cs)
    assert conn.deliverable(cs).header.msg_seq == 2


def test_backup_take_ordered_exact_message():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    conn.receive_app_message(cs, app_msg(2))
    assert conn.take_ordered(cs, 1, 1).header.msg_seq == 1
    # ordering a message not yet received yields nothing
    assert conn.take_ordered(cs, 1, 4) is None


def test_reveal_missing_extends_placeholders():
    cs = fresh()
    cs.inbound_view = 1
    conn.receive_app_message(cs, app_msg(1))
    missing = conn.reveal_missing(cs, 3)
    assert missing == (2, 3)
    assert cs.nacks == {2, 3}


def test_ack_covers_all_prior_messages():
    cs = fresh()
    for msn in (1, 2, 3):
        conn.record_sent(cs, app_msg(msn), now_us=0)
    assert conn.apply_ack(cs, 1, 2) == 2
    assert cs.sent[(1, 1)].acked and cs.sent[(1, 2)].acked
    assert not cs.sent[(1, 3)].acked


def test_due_retransmits_only_unacked_past_timeout():
    cs = fresh()
    conn.record_sent(cs, app_msg(1), now_us=0)
    conn.record_sent(cs, app_msg(2), now_us=0)
    conn.apply_ack(cs, 1, 1)
    due = conn.due_retransmits(cs, now_us=50_000, timeout_us=40_000)
    assert [e.msg.header.msg_seq for e in due] == [2]
    assert conn.due_retransmits(cs, now_us=10_000, timeout_us=40_000) == []


def test_logged_only_copies_never_retransmit():
    cs = fresh()
    conn.record_sent(cs, app_msg(1), now_us=0, logged_only=True)
    assert conn.due_retransmits(cs, now_us=10**6, timeout_us=1) == []


def test_gc_sent_boundary_is_inclusive():
    cs = fresh()
    conn.record_sent(cs, app_msg(1, ts=4), now_us=0)
    conn.record_sent(cs, app_msg(2, ts=6), now_us=0)
    cs.remote_group_watermark = 4
    assert conn.gc_sent(cs) == [(1, 1)]
    assert (1, 2) in cs.sent


def test_gc_delivered_respects_group_watermark():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1, ts=6))
    conn.mark_delivered_next(cs)
    assert conn.gc_delivered(cs, group_watermark=5) == []
    assert conn.gc_delivered(cs, group_watermark=6) == [(1, 1)]


def test_find_for_retransmit_searches_sent_and_received():
    cs = fresh()
    conn.record_sent(cs, app_msg(3), now_us=0)
    found = conn.find_for_retransmit(cs, 1, [3])
    assert [m.header.msg_seq for m in found] == [3]
    # a delivered inbound message can also serve a local nack
    conn.receive_app_message(cs, app_msg(1))
    conn.mark_delivered_next(cs)
    assert conn.find_for_retransmit(cs, 1, [1])[0].header.msg_seq == 1
    # garbage-collected message: nothing to serve
    assert conn.find_for_retransmit(cs, 1, [9]) == []


def test_first_ack_arming_and_stop():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    conn.note_received_progress(cs, now_us=0, delay_us=20_000)
    assert not cs.first_ack_stopped
    assert not conn.first_ack_due(cs, 10_000)
    assert conn.first_ack_due(cs, 20_000)
    conn.stop_first_ack(cs, ack=1)
    assert cs.first_ack_stopped
    # duplicate stop is idempotent
    conn.stop_first_ack(cs, ack=1)
    assert cs.first_ack_stopped


def test_own_app_send_carries_ack_and_disarms():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    conn.note_received_progress(cs, now_us=0, delay_us=20_000)
    conn.ack_carried_by_send(cs, ack=1)
    assert cs.first_ack_stopped
    # but not once a FirstAck is already in flight
    conn.receive_app_message(cs, app_msg(2))
    conn.note_received_progress(cs, now_us=0, delay_us=20_000)
    cs.first_ack_started = True
    conn.ack_carried_by_send(cs, ack=2)
    assert not cs.first_ack_stopped


def test_view_reset_discards_after_gap_free_point():
    cs = fresh()
    conn.receive_app_message(cs, app_msg(1))
    conn.receive_app_message(cs, app_msg(2))
    conn.receive_app_message(cs, app_msg(5))   # 3, 4 missing
    flushed = conn.reset_inbound_for_view(cs, new_view=2)
    assert flushed == 1                        # message 5 dropped
    assert cs.nacks == set()
    assert cs.inbound_view == 2 and cs.received_up_to == 0
    # gap-free but undelivered messages stay for later ordered delivery
    assert cs.received[(1, 1)].header.msg_seq == 1
    # idempotent on a second identical reset
    assert conn.reset_inbound_for_view(cs, new_view=2) == 0


def test_renumber_after_cut():
    cs = fresh()
    for msn in (1, 2, 3, 4, 5):
        conn.record_sent(cs, app_msg(msn, ts=100 + msn), now_us=0)
    moved = conn.renumber_sent_after_cut(cs, old_view=1, new_view=2,
                                         cut_msn=3, precedence=2)
    assert [e.msg.header.msg_seq for e in moved] == [1, 2]
    assert [e.msg.header.timestamp for e in moved] == [104, 105]
    assert all(e.msg.header.view == 2 for e in moved)
    assert cs.msg_seq_count == 2
    # messages the remote already had stay, marked acked, for watermark GC
    assert cs.sent[(1, 3)].acked and not cs.sent[(1, 3)].logged_only
    assert (1, 4) not in cs.sent

import pytest

from replicast.determinizer import (
    ERR_BUSY,
    ERR_WOULD_BLOCK,
    OK,
    EntryStream,
    Recorder,
    ReplayQueues,
    VirtualGroupClock,
    op_key,
    record_at_primary,
)
from replicast.wire import OpMeta, OrderEntry, OrderType, SocketOp, TimeOrder


def test_first_trylock_success_recorded():
    rec = Recorder(view=1)
    meta, entry = record_at_primary(rec, 1, ("mutex", 7),
                                    lambda: OpMeta(OK))
    assert meta.status == OK
    assert entry.body.task == 1 and entry.body.mutex == 7
    assert entry.body.count == 1
    assert (entry.view, entry.order_seq) == (1, 1)


def test_second_trylock_busy_recorded_with_error():
    rec = Recorder(view=1)
    record_at_primary(rec, 1, ("mutex", 7), lambda: OpMeta(OK))
    meta, entry = record_at_primary(rec, 1, ("mutex", 7),
                                    lambda: OpMeta(ERR_BUSY))
    assert meta.status == ERR_BUSY
    assert entry.body.count == 2
    assert entry.order_seq == 2


def test_counts_are_per_task_and_operation():
    rec = Recorder(view=1)
    _, e1 = record_at_primary(rec, 1, ("mutex", 7), lambda: OpMeta(OK))
    _, e2 = record_at_primary(rec, 2, ("mutex", 7), lambda: OpMeta(OK))
    _, e3 = record_at_primary(rec, 1, ("mutex", 8), lambda: OpMeta(OK))
    _, e4 = record_at_primary(rec, 1, ("mutex", 7), lambda: OpMeta(OK))
    assert [e.body.count for e in (e1, e2, e3, e4)] == [1, 1, 1, 2]
    assert [e.order_seq for e in (e1, e2, e3, e4)] == [1, 2, 3, 4]


def test_clock_entry_carries_value():
    rec = Recorder(view=1)
    meta, entry = record_at_primary(rec, 1, ("clock", 0),
                                    lambda: OpMeta(OK, (12345,)))
    assert entry.order_type == OrderType.TIME_ORDER
    assert entry.body.meta.values == (12345,)


def test_socket_entries_record_outcomes():
    rec = Recorder(view=1)
    meta, entry = record_at_primary(
        rec, 1, ("sock", 4, SocketOp.READ), lambda: OpMeta(ERR_WOULD_BLOCK))
    assert entry.body.op == SocketOp.READ
    assert entry.body.meta.status == ERR_WOULD_BLOCK
    # select/poll metadata: events, rw mask, remaining timeout
    meta, entry = record_at_primary(
        rec, 1, ("sock", 4, SocketOp.SELECT_POLL),
        lambda: OpMeta(OK, (1, 0b01, 3)))
    assert entry.body.meta.values == (1, 0b01, 3)
    assert entry.body.count == 2


# --- replay ----------------------------------------------------------------

def entries_for(*specs):
    """specs: (task, okey, count, meta) -> recorded order entries"""
    rec = Recorder(view=1)
    out = []
    for task, okey, meta in specs:
        out.append(record_at_primary(rec, task, okey, lambda m=meta: m)[1])
    return out


def test_ingest_creates_queue_and_names_head_task():
    rq = ReplayQueues()
    (e,) = entries_for((1, ("mutex", 7), OpMeta(OK)))
    woken = rq.ingest(e)
    assert woken == 1
    assert rq.head(("mutex", 7)) is e


def test_head_only_consumption_order():
    # the primary recorded task 2 before task 1 on the same mutex
    e2, e1 = entries_for((2, ("mutex", 7), OpMeta(OK)),
                         (1, ("mutex", 7), OpMeta(OK)))
    rq = ReplayQueues()
    rq.ingest(e2)
    rq.ingest(e1)
    assert not rq.head_matches(1, ("mutex", 7))   # task 1 must wait
    assert rq.head_matches(2, ("mutex", 7))
    rq.consume(2, ("mutex", 7))
    assert rq.head_matches(1, ("mutex", 7))       # woken in queue order


def test_count_mismatch_blocks():
    (e,) = entries_for((1, ("mutex", 7), OpMeta(OK)))
    rq = ReplayQueues()
    # pretend task 1 already consumed one claim of mutex 7
    rq.counts[(1, ("mutex", 7))] = 1
    rq.ingest(e)
    assert not rq.head_matches(1, ("mutex", 7))


def test_disjoint_operations_consume_independently():
    ea, eb = entries_for((1, ("mutex", 7), OpMeta(OK)),
                         (2, ("mutex", 8), OpMeta(OK)))
    rq = ReplayQueues()
    rq.ingest(ea)
    rq.ingest(eb)
    # task 2 can go even though task 1's globally-earlier tuple is unconsumed
    assert rq.head_matches(2, ("mutex", 8))
    rq.consume(2, ("mutex", 8))
    assert rq.head_matches(1, ("mutex", 7))


def test_replay_busy_error_returned_without_call():
    (e,) = entries_for((1, ("mutex", 7), OpMeta(ERR_BUSY)))
    rq = ReplayQueues()
    rq.ingest(e)
    assert rq.head_matches(1, ("mutex", 7))
    got = rq.consume(1, ("mutex", 7))
    assert got.body.meta.status == ERR_BUSY


# --- virtual group clock ----------------------------------------------------

def test_backup_offset_tracking():
    vgc = VirtualGroupClock()
    assert vgc.replay_at_backup(95, local_physical=100) == 95
    assert vgc.offset == -5


def test_promoted_backup_continues_group_time():
    vgc = VirtualGroupClock()
    vgc.replay_at_backup(95, local_physical=100)
    vgc.promote()
    assert vgc.read_at_primary(local_physical=110) == 105
    assert vgc.read_at_primary(local_physical=111) == 106


def test_promoted_clock_never_rolls_backward():
    vgc = VirtualGroupClock()
    vgc.replay_at_backup(95, local_physical=50)   # offset +45
    vgc.promote()
    assert vgc.read_at_primary(local_physical=49) >= 95


def test_original_primary_reads_physical_clock():
    vgc = VirtualGroupClock()
    a = vgc.read_at_primary(100)
    b = vgc.read_at_primary(101)
    assert (a, b) == (100, 101)


# --- entry stream reassembly -------------------------------------------------

def make_entry(view, seq):
    return OrderEntry(OrderType.TIME_ORDER, 1, view, seq,
                      TimeOrder(1, 0, seq, OpMeta(OK, (seq,))))


def test_stream_reorders_and_dedups():
    s = EntryStream(view=1, next_seq=1)
    assert s.offer(make_entry(1, 2)) == []
    got = s.offer(make_entry(1, 1))
    assert [e.order_seq for e in got] == [1, 2]
    assert s.offer(make_entry(1, 1)) == []        # duplicate dropped
    assert s.frontier() == (1, 2)


def test_stream_view_switch_drops_stale():
    s = EntryStream(view=1, next_seq=1)
    s.offer(make_entry(1, 5))                     # never becomes consumable
    s.switch_view(2, 1)
    assert s.offer(make_entry(1, 5)) == []
    got = s.offer(make_entry(2, 1))
    assert [(e.view, e.order_seq) for e in got] == [(2, 1)]


def test_op_key_rejects_view_change_entries():
    from replicast.wire import ViewChangeOrder
    vc = OrderEntry(OrderType.VIEW_CHANGE_ORDER, 1, 2, 1,
                    ViewChangeOrder(1, 9, 2, 3))
    with pytest.raises(ValueError):
        op_key(vc)

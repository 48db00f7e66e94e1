from replicast import membership as ms
from replicast.wire import BirthId


def births(n):
    return [BirthId("h%d" % i, 1, 0) for i in range(n)]


def three():
    return ms.bootstrap_view(5, births(3))


def test_bootstrap_ranks_follow_precedence():
    gv = three()
    assert gv.precedences() == [1, 2, 3]
    assert [m.rank for m in gv.members] == [1, 2, 3]
    assert gv.primary_precedence == 1
    assert gv.view == 1


def test_add_member_gets_next_precedence_and_last_rank():
    gv = ms.add_member(three(), BirthId("h9", 1, 7))
    assert gv.precedences() == [1, 2, 3, 4]
    assert gv.members[-1].rank == 4


def test_precedence_not_reused_after_removal():
    gv = three()
    gv = ms.remove_member(gv, gv.members[1].birth)   # drop precedence 2
    assert gv.precedences() == [1, 3]
    assert [m.rank for m in gv.members] == [1, 2]    # ranks shift up
    gv = ms.add_member(gv, BirthId("h9", 1, 7))
    assert gv.precedences() == [1, 3, 4]


def test_watch_timeouts_increase_with_rank():
    base, step = 10_000, 10_000
    t2 = ms.primary_watch_us(2, base, step)
    t3 = ms.primary_watch_us(3, base, step)
    t4 = ms.primary_watch_us(4, base, step)
    assert (t2, t3, t4) == (10_000, 30_000, 50_000)


def test_proposal_excludes_primary_and_lower_precedences():
    gv = three()
    kept = ms.proposal_members(gv, my_precedence=2)
    assert [m.precedence for m in kept] == [2, 3]
    assert [m.rank for m in kept] == [1, 2]
    # the rank-3 backup, having seen nothing, excludes precedence 2 as well
    kept = ms.proposal_members(gv, my_precedence=3)
    assert [m.precedence for m in kept] == [3]


def test_should_propose_blocked_by_lower_precedence_proposal():
    assert ms.should_propose([], my_pvn=1, my_precedence=2)
    assert not ms.should_propose([(1, 2)], my_pvn=1, my_precedence=3)
    # stale proposal for an older view does not block
    assert ms.should_propose([(1, 2)], my_pvn=2, my_precedence=3)
    # a higher-precedence proposal does not block a lower one
    assert ms.should_propose([(1, 3)], my_pvn=1, my_precedence=2)


def test_classify_proposal_rules():
    # included and strictly higher than the current primary: adopt
    assert ms.classify_proposal(True, 2, 1) == "adopt"
    # superseded by an even higher precedence after adopting 2
    assert ms.classify_proposal(True, 3, 2) == "adopt"
    # late lower proposal ignored once a higher one was adopted
    assert ms.classify_proposal(True, 2, 3) == "ignore"
    # excluded and outranked: reset and rejoin
    assert ms.classify_proposal(False, 3, 1) == "reset"
    # excluded but our own candidacy outranks the proposer: ignore
    assert ms.classify_proposal(False, 2, 1, candidacy=3) == "ignore"
    # our candidacy loses to a higher-precedence proposer
    assert ms.classify_proposal(False, 3, 1, candidacy=2) == "reset"


def election(precedence=2):
    gv = three()
    prop = ms.Proposal(5, 1, precedence,
                       ms.proposal_members(gv, precedence))
    return ms.Election(prop)


def test_election_concludes_on_full_acks():
    el = election(2)
    assert el.awaited() == {3}
    assert el.record_ack(3) is True


def test_election_singleton_concludes_immediately():
    el = election(3)
    assert el.awaited() == set()


def test_election_prunes_silent_members():
    gv = ms.bootstrap_view(5, births(4))
    prop = ms.Proposal(5, 1, 2, ms.proposal_members(gv, 2))
    el = ms.Election(prop)
    el.record_ack(3)
    gone = el.prune_silent()
    assert gone == {4}
    assert [m.precedence for m in el.proposal.members] == [2, 3]
    assert el.retransmission_count == 0


def test_pending_change_ack_bookkeeping():
    gv = ms.add_member(three(), BirthId("h9", 1, 7))
    pc = ms.PendingChange("add", gv.members[-1].birth, gv, change_seq=1)
    assert pc.awaited() == {2, 3, 4}
    assert pc.record_ack(2, need_state=False) is False
    assert pc.record_ack(4, need_state=True) is False
    assert pc.need_state
    assert pc.record_ack(3, need_state=False) is True


def test_pending_change_prune():
    gv = ms.add_member(three(), BirthId("h9", 1, 7))
    pc = ms.PendingChange("add", gv.members[-1].birth, gv, change_seq=1)
    pc.record_ack(4, need_state=True)
    gone = pc.prune_silent()
    assert gone == {2, 3}
    assert [m.precedence for m in pc.view.members] == [1, 4]


def test_view_json_roundtrip():
    gv = ms.add_member(three(), BirthId("h9", 4, 7))
    assert ms.view_from_json(gv.as_json()) == gv

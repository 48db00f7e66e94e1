"""Leader-determined group membership: precedences, ranks, elections.

The primary of a group decides additions and removals; a failed primary is
replaced through a one-round election in which the surviving backup with the
lowest precedence proposes itself and collects explicit acknowledgments.
Precedences grow monotonically with join order and never repeat; ranks are
consecutive positions in precedence order (the primary is rank one) and set
the fault-detection timeouts.

This module holds the value types and the pure decision rules; the replica
engine drives them and owns all message traffic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .wire import BirthId

#: Retransmission-count guard for proposal/commit messages.
MAX_COUNT = 5
#: FirstAcks tolerated for one message before flow control engages.
MAX_ACK = 8


@dataclass(frozen=True)
class Member:
    birth: BirthId
    precedence: int
    rank: int


@dataclass(frozen=True)
class GroupView:
    group_id: int
    view: int                      # primary view number, >= 1
    members: tuple                 # Member tuple, rank order
    primary_precedence: int

    def precedences(self):
        return [m.precedence for m in self.members]

    def backups(self):
        return [m for m in self.members if m.precedence != self.primary_precedence]

    def member_for(self, birth: BirthId):
        for m in self.members:
            if m.birth == birth:
                return m
        return None

    def by_precedence(self, precedence: int):
        for m in self.members:
            if m.precedence == precedence:
                return m
        return None

    def next_precedence(self) -> int:
        return max((m.precedence for m in self.members), default=0) + 1

    def as_json(self):
        return {
            "group": self.group_id,
            "view": self.view,
            "primary": self.primary_precedence,
            "members": [[list(m.birth.as_tuple()), m.precedence, m.rank]
                        for m in self.members],
        }


def view_from_json(d) -> GroupView:
    members = tuple(
        Member(BirthId(b[0], b[1], b[2]), prec, rank)
        for (b, prec, rank) in d["members"])
    return GroupView(d["group"], d["view"], members, d["primary"])


def with_ranks(members) -> tuple:
    """Assign consecutive ranks in precedence order (primary first)."""
    ordered = sorted(members, key=lambda m: m.precedence)
    return tuple(replace(m, rank=i + 1) for i, m in enumerate(ordered))


def bootstrap_view(group_id: int, births) -> GroupView:
    """An established membership: precedences follow the given order."""
    members = with_ranks(
        Member(b, i + 1, 0) for i, b in enumerate(births))
    return GroupView(group_id, 1, members, 1)


def add_member(gv: GroupView, birth: BirthId) -> GroupView:
    prec = gv.next_precedence()
    members = with_ranks(gv.members + (Member(birth, prec, 0),))
    return replace(gv, members=members)


def remove_member(gv: GroupView, birth: BirthId) -> GroupView:
    members = with_ranks(m for m in gv.members if m.birth != birth)
    return replace(gv, members=members)


def primary_watch_us(rank: int, base_us: int, step_us: int) -> int:
    """Primary fault-detection timeout for a backup of the given rank.

    Strictly increasing in rank: each lower-ranked backup is allowed one
    inaction period plus one period of timer skew before the next rank
    concludes that both it and the primary have failed.
    """
    return base_us + 2 * step_us * (rank - 2)


@dataclass(frozen=True)
class Proposal:
    """A ProposePrimary as seen on the wire."""
    group_id: int
    pvn: int                       # proposer's current view number
    precedence: int
    members: tuple                 # proposed Member tuple (ranked)
    entry_frontier: tuple = (0, 0)  # proposer's contiguous (view, seq)
    update_seq: int = 0            # proposer's applied update counter


def proposal_members(gv: GroupView, my_precedence: int) -> tuple:
    """Membership a self-appointed primary proposes: itself plus every backup
    with a higher precedence; the old primary and slower (lower-precedence)
    backups are excluded as faulty."""
    keep = [m for m in gv.members if m.precedence >= my_precedence]
    return with_ranks(keep)


def should_propose(seen_proposals, my_pvn: int, my_precedence: int) -> bool:
    """A backup proposes only if no still-credible proposal from a
    lower-precedence backup covers this view."""
    return not any(pvn >= my_pvn and prec < my_precedence
                   for (pvn, prec) in seen_proposals)


def classify_proposal(in_membership: bool, proposal_precedence: int,
                      primary_precedence: int, candidacy: int = 0) -> str:
    """Outcome of receiving a ProposePrimary: 'adopt', 'reset' or 'ignore'.

    `candidacy` is the member's own precedence when it has an election of its
    own in flight (its claim then outranks lower proposals).
    """
    threshold = max(primary_precedence, candidacy)
    if proposal_precedence <= threshold:
        return "ignore"
    return "adopt" if in_membership else "reset"


@dataclass
class Election:
    """Proposer-side progress of a primary change."""

    proposal: Proposal
    acks: set = field(default_factory=set)     # precedences heard from
    retransmission_count: int = 0
    next_retx_us: int = 0
    phase: str = "electing"                    # electing | recovering | done

    def awaited(self):
        return {m.precedence for m in self.proposal.members
                if m.precedence != self.proposal.precedence} - self.acks

    def record_ack(self, precedence: int) -> bool:
        """Returns True when the election just concluded."""
        self.acks.add(precedence)
        return self.phase == "electing" and not self.awaited()

    def prune_silent(self):
        """Drop members that never acknowledged; re-rank the remainder."""
        gone = self.awaited()
        members = with_ranks(m for m in self.proposal.members
                             if m.precedence not in gone)
        self.proposal = replace(self.proposal, members=members)
        self.retransmission_count = 0
        return gone


@dataclass
class PendingChange:
    """Primary-side commit of a backup addition or removal."""

    kind: str                      # add | remove
    target: BirthId
    view: GroupView                # membership being committed
    change_seq: int
    acks: set = field(default_factory=set)
    retransmission_count: int = 0
    next_retx_us: int = 0
    need_state: bool = False

    def awaited(self):
        want = {m.precedence for m in self.view.members
                if m.precedence != self.view.primary_precedence}
        if self.kind == "add":
            pass                   # the joiner must acknowledge too
        return want - self.acks

    def record_ack(self, precedence: int, need_state: bool) -> bool:
        self.acks.add(precedence)
        if need_state:
            self.need_state = True
        return not self.awaited()

    def prune_silent(self):
        gone = self.awaited()
        members = with_ranks(m for m in self.view.members
                             if m.precedence not in gone)
        self.view = replace(self.view, members=members)
        self.retransmission_count = 0
        return gone

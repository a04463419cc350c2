# services/consensus_service.py
"""Tip-cut consensus.

Each slot runs Prepare then Commit voting rounds over one cut; a quorum is
n - f votes. In pipelined mode votes go to every replica and a replica begins
slot s+1 as soon as it accepts the Prepare for slot s. In serialized mode
votes go to the leader, the leader relays each certificate, and slot s+1
begins only once slot s commits.

A slot that makes no progress within its timer collects timeout votes; n - f
of them form a timeout certificate that moves the slot to the next view. The
certificate carries the highest PrepareQC its signers reported, and the next
leader must re-propose that cut.

A CommitQC with all n votes finalizes the slot. With fewer, the view leader
runs a confirm round: 2f+1 acks form a confirm certificate that finalizes it,
and a confirm timeout sends the slot to view change instead.

A cut for slot s is only voted once slot s-1 has a CommitQC and its cut is
known; no lane position may fall below that cut.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from loguru import logger

from config import (CONFIRM_GRACE_MS, CUT_IDLE_MS, INCLUSION_GRACE_MS, TIMEOUT_BACKOFF,
                    TIMEOUT_CAP_MS, TIMEOUT_MS)
from models import (Behavior, Confirm, ConsensusVote, CutRequest, CutResponse, Prepare, QcAnnounce,
                    QcKind, QuorumCert, TcAnnounce, TimeoutCert, TimeoutVote, TipCut)
from services.commitment_service import encode_record
from services.crypto_service import KeyRegistry, digest, digest_parts, verify_distinct


def quorum_size(n: int, f: int) -> int:
    return n - f


def confirm_threshold(f: int) -> int:
    return 2 * f + 1


# ---------------------------------------------------------------------------
# Leader selection
# ---------------------------------------------------------------------------

class LeaderSchedule:
    """Stake-weighted proposer rotation.

    Every step each replica's priority grows by its stake; the highest
    priority wins (lowest id on ties) and the winner's priority drops by the
    total stake. Step k names the leader for k = slot + view.
    """

    def __init__(self, stakes: dict):
        self.ids = sorted(stakes)
        self.stakes = dict(stakes)
        self.total = sum(self.stakes.values())
        if self.total <= 0:
            raise ValueError("total stake must be positive")
        self._priority = {r: 0 for r in self.ids}
        self._sequence = []

    def leader(self, view: int) -> int:
        while len(self._sequence) <= view:
            for r in self.ids:
                self._priority[r] += self.stakes[r]
            winner = max(self.ids, key=lambda r: (self._priority[r], -r))
            self._priority[winner] -= self.total
            self._sequence.append(winner)
        return self._sequence[view]

    def leader_for(self, slot: int, view: int) -> int:
        return self.leader(slot + view)


def select_leader(view: int, stakes: dict) -> int:
    return LeaderSchedule(stakes).leader(view)


# ---------------------------------------------------------------------------
# Cuts and certificates
# ---------------------------------------------------------------------------

def cut_digest(slot: int, tips, state_records=()) -> bytes:
    """Digest over slot, tips and state records. View and proposer are excluded."""
    parts = [b'tip-cut', slot.to_bytes(8, 'big')]
    for tip in tips:
        if tip is None:
            parts.append(b'')
        else:
            parts.append(tip.lane.to_bytes(4, 'big') + tip.pos.to_bytes(8, 'big') + tip.car_digest)
    for record in state_records:
        parts.append(encode_record(record, len(tips)))
    return digest_parts(*parts)


def make_cut(slot: int, view: int, tips, proposer: int, state_records=()) -> TipCut:
    tips = tuple(tips)
    records = tuple(state_records)
    return TipCut(slot, view, tips, proposer, cut_digest(slot, tips, records), records)


def vote_message(kind: QcKind, slot: int, view: int, cut_digest_: bytes) -> bytes:
    return digest_parts(b'consensus-vote', kind.value.encode(), slot.to_bytes(8, 'big'),
                        view.to_bytes(8, 'big'), cut_digest_)


def timeout_message(slot: int, view: int) -> bytes:
    return digest_parts(b'timeout', slot.to_bytes(8, 'big'), view.to_bytes(8, 'big'))


def _threshold(kind: QcKind, n: int, f: int) -> int:
    return confirm_threshold(f) if kind == QcKind.CONFIRM else quorum_size(n, f)


def form_qc(kind: QcKind, slot: int, view: int, cut_digest_: bytes, votes, registry: KeyRegistry,
            n: int, f: int) -> Optional[QuorumCert]:
    msg = vote_message(kind, slot, view, cut_digest_)
    valid = {}
    for sig in votes:
        if sig.signer not in valid and registry.verify(sig, msg):
            valid[sig.signer] = sig
    if len(valid) < _threshold(kind, n, f):
        return None
    return QuorumCert(kind, slot, view, cut_digest_, tuple(valid[s] for s in sorted(valid)))


def verify_qc(qc: QuorumCert, registry: KeyRegistry, n: int, f: int) -> bool:
    msg = vote_message(qc.kind, qc.slot, qc.view, qc.cut_digest)
    return len(verify_distinct(registry, qc.votes, msg)) >= _threshold(qc.kind, n, f)


def form_timeout_cert(slot: int, view: int, votes, registry: KeyRegistry, n: int, f: int) -> Optional[TimeoutCert]:
    """TC from timeout votes; high_prepare is the highest valid PrepareQC reported"""
    msg = timeout_message(slot, view)
    valid = {}
    high = None
    for vote in votes:
        if vote.sig.signer in valid or not registry.verify(vote.sig, msg):
            continue
        valid[vote.sig.signer] = vote.sig
        hp = vote.high_prepare
        if hp is not None and hp.kind == QcKind.PREPARE and hp.slot == slot and hp.view <= view \
                and (high is None or hp.view > high.view) and verify_qc(hp, registry, n, f):
            high = hp
    if len(valid) < quorum_size(n, f):
        return None
    return TimeoutCert(slot, view, high, tuple(valid[s] for s in sorted(valid)))


def verify_tc(tc: TimeoutCert, registry: KeyRegistry, n: int, f: int) -> bool:
    if len(verify_distinct(registry, tc.votes, timeout_message(tc.slot, tc.view))) < quorum_size(n, f):
        return False
    hp = tc.high_prepare
    if hp is None:
        return True
    return hp.kind == QcKind.PREPARE and hp.slot == tc.slot and hp.view <= tc.view and verify_qc(hp, registry, n, f)


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

@dataclass
class Block:
    height: int
    slot: int
    txs: list
    duplicates: list = field(default_factory=list)
    cars: list = field(default_factory=list)  # (lane, pos)


class CarMissing(Exception):
    def __init__(self, car_digest, signers):
        super().__init__(car_digest.hex())
        self.car_digest = car_digest
        self.signers = signers


def lane_segment(tip, cursor_pos: int, lookup: Callable) -> list:
    """Cars above cursor_pos up to the tip, lowest first, found by walking parent refs"""
    if tip is None or tip.pos <= cursor_pos:
        return []
    chain = []
    wanted = tip.car_digest
    while True:
        car = lookup(wanted)
        if car is None:
            raise CarMissing(wanted, tip.poa.signers)
        chain.append(car)
        if car.pos <= cursor_pos + 1 or car.pos == 0:
            break
        wanted = car.parent_ref
    chain.reverse()
    return [car for car in chain if car.pos > cursor_pos]


def linearize_cut(cut: TipCut, height: int, cursor: list, lookup: Callable, seen: set) -> Block:
    """Expand one committed cut; advances cursor and seen only when every car is present"""
    segments = [lane_segment(cut.tips[lane], cursor[lane], lookup) for lane in range(len(cut.tips))]
    block = Block(height, cut.slot, [])
    for lane, cars in enumerate(segments):
        for car in cars:
            block.cars.append((lane, car.pos))
            for raw in car.batch:
                tx_id = digest(raw)
                if tx_id in seen:
                    block.duplicates.append(tx_id)
                    continue
                seen.add(tx_id)
                block.txs.append(raw)
        if cars:
            cursor[lane] = max(cursor[lane], cars[-1].pos)
    return block


def linearize(cuts, lookup: Callable, n: int):
    """Blocks for a contiguous sequence of committed cuts, in slot order"""
    cursor = [-1] * n
    seen = set()
    return [linearize_cut(cut, i + 1, cursor, lookup, seen) for i, cut in enumerate(cuts)]


# ---------------------------------------------------------------------------
# Per-replica engine
# ---------------------------------------------------------------------------

@dataclass
class SlotState:
    slot: int
    view: int = 0
    begun: bool = False
    cuts: dict = field(default_factory=dict)
    proposal_ms: dict = field(default_factory=dict)  # (view, digest) -> send time
    accepted: Optional[TipCut] = None
    voted: set = field(default_factory=set)
    votes: dict = field(default_factory=dict)  # (kind, view, digest) -> {signer: sig}
    prepare_qc: Optional[QuorumCert] = None
    lock: Optional[QuorumCert] = None
    commit_qc: Optional[QuorumCert] = None
    confirm_cert: Optional[QuorumCert] = None
    proof: Optional[QuorumCert] = None  # full CommitQC or confirm certificate
    confirm_armed: set = field(default_factory=set)
    entry_tc: Optional[TimeoutCert] = None
    proposed: set = field(default_factory=set)
    idle_armed: set = field(default_factory=set)
    timeout_votes: dict = field(default_factory=dict)
    timed_out: set = field(default_factory=set)
    stash: list = field(default_factory=list)
    cut_wanted: Optional[bytes] = None
    cut_sources: tuple = ()
    cut_attempt: int = 0


class ConsensusEngine:
    """One replica's consensus state across all live slots.

    The engine only talks to the outside through ctx (send, broadcast,
    set_timer, trace, now). on_commit(ctx, slot, cut, qc) fires once per slot.
    """

    def __init__(self, replica_id: int, n: int, f: int, signer, registry: KeyRegistry,
                 schedule: LeaderSchedule, tips, state=None, *, pipelining=True,
                 timeout_ms=TIMEOUT_MS, backoff=TIMEOUT_BACKOFF, timeout_cap_ms=TIMEOUT_CAP_MS,
                 cut_idle_ms=CUT_IDLE_MS, confirm_grace_ms=CONFIRM_GRACE_MS,
                 inclusion_grace_ms=INCLUSION_GRACE_MS, faults=(), missed_slot=None, on_commit=None):
        self.id = replica_id
        self.n = n
        self.f = f
        self.q = quorum_size(n, f)
        self.signer = signer
        self.registry = registry
        self.schedule = schedule
        self.tips = tips
        self.state = state
        self.pipelining = pipelining
        self.timeout_ms = timeout_ms
        self.backoff = backoff
        self.timeout_cap_ms = timeout_cap_ms
        self.cut_idle_ms = cut_idle_ms
        self.confirm_grace_ms = confirm_grace_ms
        self.inclusion_grace_ms = inclusion_grace_ms
        self.faults = tuple(faults)
        self.missed_slot = missed_slot
        self.on_commit = on_commit
        self.slots = {}
        self.committed = {}
        self.prefix_slot = 0
        self.prefix_positions = [-1] * n
        self.committed_tips = [None] * n
        self.paused = False
        self.stats = Counter()

    # --- helpers -----------------------------------------------------------

    def _slot(self, slot) -> SlotState:
        st = self.slots.get(slot)
        if st is None:
            st = self.slots[slot] = SlotState(slot)
        return st

    def leader_of(self, slot, view):
        return self.schedule.leader_for(slot, view)

    def _fault(self, behavior, now):
        for spec in self.faults:
            if spec.behavior == behavior and spec.active(now):
                return spec
        return None

    def timeout_for(self, view):
        return min(self.timeout_ms * (self.backoff ** view), self.timeout_cap_ms)

    def _arm_timeout(self, ctx, st):
        ctx.set_timer(self.timeout_for(st.view), ('slot-timeout', st.slot, st.view))

    def _vote_target(self, ctx, st, vote):
        if self.pipelining:
            ctx.broadcast(vote)
        else:
            ctx.send(self.leader_of(st.slot, vote.view), vote)

    # --- slots and proposals ------------------------------------------------

    def begin_slot(self, ctx, slot):
        st = self._slot(slot)
        if st.begun or self.paused:
            return
        st.begun = True
        self._arm_timeout(ctx, st)
        self._maybe_propose(ctx, st)
        self._replay_stash(ctx, st)

    def _replay_stash(self, ctx, st: SlotState):
        stash, st.stash = st.stash, []
        for src, msg, send_ms in stash:
            self.on_prepare(ctx, src, msg, send_ms)

    def on_tips_advanced(self, ctx):
        for slot, st in list(self.slots.items()):
            if slot >= self.prefix_slot and st.begun and st.proof is None and st.view not in st.proposed:
                self._maybe_propose(ctx, st)

    # --- per-lane floors ------------------------------------------------------

    def _settled_cut(self, slot) -> Optional[TipCut]:
        """Cut slot will commit: known once it has a CommitQC, full or not"""
        done = self.committed.get(slot)
        if done is not None:
            return done[0]
        st = self.slots.get(slot)
        if st is None or st.commit_qc is None:
            return None
        return st.cuts.get(st.commit_qc.cut_digest)

    def floor_positions(self, slot) -> Optional[tuple]:
        """Lowest acceptable position per lane for a cut in slot; None until slot - 1 is settled"""
        if slot == 0:
            return tuple(self.prefix_positions)
        prev = self._settled_cut(slot - 1)
        if prev is None:
            return None
        return tuple(max(a, b) for a, b in zip(prev.positions(), self.prefix_positions))

    def _settled(self, ctx, slot):
        nxt = self.slots.get(slot + 1)
        if nxt is not None and nxt.begun and nxt.stash:
            self._replay_stash(ctx, nxt)

    def _carry_tips(self, slot) -> tuple:
        """Tips a new cut for slot must not fall below"""
        prev_cut = self._settled_cut(slot - 1)
        if prev_cut is None:
            prev = self.slots.get(slot - 1)
            prev_cut = prev.accepted if prev is not None else None
        return prev_cut.tips if prev_cut is not None else tuple(self.committed_tips)

    def _fresh_tips(self, ctx, slot):
        tips = list(self.tips.snapshot())
        carry = self._carry_tips(slot)
        for lane in range(self.n):
            for known in (self.committed_tips[lane], carry[lane]):
                if known is not None and (tips[lane] is None or known.pos > tips[lane].pos):
                    tips[lane] = known
        if self._fault(Behavior.OMIT_CERTIFIED_TIP, ctx.now):
            lane = (self.id + 1) % self.n
            tips[lane] = carry[lane]
        return tips

    def _maybe_propose(self, ctx, st: SlotState, idle=False):
        slot, view = st.slot, st.view
        if not st.begun or st.proof is not None or self.paused or view in st.proposed:
            return
        if self.leader_of(slot, view) != self.id:
            return
        silent = self._fault(Behavior.SILENT_LEADER, ctx.now)
        if silent is not None and (not silent.views or view in silent.views):
            st.proposed.add(view)
            ctx.trace('silent_leader', slot=slot, view=view)
            return
        if view == 0 and self.missed_slot is not None and self.missed_slot(slot):
            st.proposed.add(view)
            ctx.trace('missed_slot', slot=slot)
            return

        high = st.entry_tc.high_prepare if st.entry_tc is not None else None
        if high is not None:
            cut = st.cuts.get(high.cut_digest)
            if cut is None:
                self._request_cut(ctx, st, high.cut_digest, high.signers)
                return
            self._send_prepare(ctx, st, replace(cut, view=view, proposer=self.id))
            return

        tips = self._fresh_tips(ctx, slot)
        reference = [t.pos if t is not None else -1 for t in self._carry_tips(slot)]
        advanced = any(t is not None and t.pos > p for t, p in zip(tips, reference))
        if not advanced and not idle:
            if view not in st.idle_armed:
                st.idle_armed.add(view)
                ctx.set_timer(self.cut_idle_ms, ('cut-idle', slot, view))
            return
        records = self.state.embed_in_cut(slot + 1) if self.state is not None else ()
        cut = make_cut(slot, view, tips, self.id, records)
        if self._fault(Behavior.EQUIVOCATE_CUT, ctx.now):
            self._equivocate(ctx, st, cut)
            return
        self._send_prepare(ctx, st, cut)

    def _send_prepare(self, ctx, st, cut):
        st.proposed.add(cut.view)
        ctx.trace('propose', slot=cut.slot, view=cut.view, cut=cut.digest.hex(), positions=list(cut.positions()))
        ctx.broadcast(Prepare(cut, st.entry_tc))

    def _equivocate(self, ctx, st, cut):
        """Send cut to the lower half of the replicas and a conflicting one to the rest"""
        tips = list(cut.tips)
        carry = self._carry_tips(cut.slot)
        for lane in range(self.n):
            if tips[lane] is not None and tips[lane] != carry[lane]:
                tips[lane] = carry[lane]
                break
        other = make_cut(cut.slot, cut.view, tips, self.id, cut.state_records)
        st.proposed.add(cut.view)
        ctx.trace('equivocate_cut', slot=cut.slot, view=cut.view, cuts=[cut.digest.hex(), other.digest.hex()])
        for dst in range(self.n):
            ctx.send(dst, Prepare(cut if dst < self.n // 2 else other, st.entry_tc))

    # --- prepare -----------------------------------------------------------

    def on_prepare(self, ctx, src: int, msg: Prepare, send_ms: float):
        cut = msg.cut
        slot = cut.slot
        if slot in self.committed:
            return
        st = self._slot(slot)
        if not st.begun or self.floor_positions(slot) is None:
            st.stash.append((src, msg, send_ms))
            return
        if cut.view < st.view:
            return
        if cut.view > st.view:
            tc = msg.justify
            if tc is None or tc.slot != slot or tc.view != cut.view - 1 or not verify_tc(tc, self.registry, self.n, self.f):
                self._reject(ctx, cut, 'unjustified view')
                return
            self._enter_view(ctx, st, cut.view, tc)
        elif cut.view > 0 and st.entry_tc is None and msg.justify is not None \
                and msg.justify.view == cut.view - 1 and verify_tc(msg.justify, self.registry, self.n, self.f):
            st.entry_tc = msg.justify

        reason = self._check_prepare(ctx, st, src, cut)
        if reason is not None:
            self._reject(ctx, cut, reason)
            return

        st.cuts[cut.digest] = cut
        st.proposal_ms[(cut.view, cut.digest)] = send_ms
        st.accepted = cut
        for tip in cut.tips:
            if tip is not None:
                self.tips.observe(tip, ctx.now)
        st.voted.add((QcKind.PREPARE, cut.view))
        sig = self.signer.sign(vote_message(QcKind.PREPARE, slot, cut.view, cut.digest))
        self._vote_target(ctx, st, ConsensusVote(QcKind.PREPARE, slot, cut.view, cut.digest, sig))
        if st.cut_wanted == cut.digest:
            self._cut_arrived(ctx, st)
        elif st.commit_qc is not None and st.commit_qc.cut_digest == cut.digest:
            self._settled(ctx, slot)
        if self.pipelining:
            self.begin_slot(ctx, slot + 1)
        for kind in (QcKind.PREPARE, QcKind.COMMIT):
            self._check_quorum(ctx, st, kind, cut.view, cut.digest)

    def _reject(self, ctx, cut, reason):
        self.stats['rejected_prepares'] += 1
        ctx.trace('prepare_rejected', slot=cut.slot, view=cut.view, reason=reason)

    def _check_prepare(self, ctx, st: SlotState, src: int, cut: TipCut) -> Optional[str]:
        if self.paused:
            return 'paused'
        if src != self.leader_of(cut.slot, cut.view) or cut.proposer != src:
            return 'wrong proposer'
        if (QcKind.PREPARE, cut.view) in st.voted:
            return 'already voted'
        if len(cut.tips) != self.n:
            return 'bad width'
        if cut.digest != cut_digest(cut.slot, cut.tips, cut.state_records):
            return 'bad digest'
        for lane, tip in enumerate(cut.tips):
            if tip is not None and (tip.lane != lane or not self.tips.verify(tip)):
                return 'invalid poa'
        for record in cut.state_records:
            if self.state is not None and not self.state.verify_record(record):
                return 'bad state record'

        high = st.entry_tc.high_prepare if st.entry_tc is not None else None
        if high is not None and cut.digest != high.cut_digest:
            return 'ignores high prepare'
        if st.lock is not None and cut.digest != st.lock.cut_digest and not (high is not None and high.view >= st.lock.view):
            return 'locked'
        for pos, floor in zip(cut.positions(), self.floor_positions(cut.slot)):
            if pos < floor:
                return 'non-monotonic'

        for lane, tip in enumerate(cut.tips):
            pos = tip.pos if tip is not None else -1
            if self.tips.overdue(lane, pos, ctx.now, self.inclusion_grace_ms):
                self.stats['omitted_tip_flags'] += 1
                ctx.trace('omitted_tip', slot=cut.slot, view=cut.view, lane=lane, leader=cut.proposer)
        return None

    # --- votes and certificates ----------------------------------------------

    def on_vote(self, ctx, src: int, vote: ConsensusVote):
        if vote.sig.signer != src:
            return
        st = self._slot(vote.slot)
        if not self.registry.verify(vote.sig, vote_message(vote.kind, vote.slot, vote.view, vote.cut_digest)):
            self.stats['bad_votes'] += 1
            return
        bucket = st.votes.setdefault((vote.kind, vote.view, vote.cut_digest), {})
        bucket[src] = vote.sig
        if vote.kind == QcKind.CONFIRM:
            self._check_confirm(ctx, st, vote.view, vote.cut_digest)
        else:
            self._check_quorum(ctx, st, vote.kind, vote.view, vote.cut_digest)

    def _check_quorum(self, ctx, st: SlotState, kind: QcKind, view: int, cut_digest_: bytes):
        bucket = st.votes.get((kind, view, cut_digest_), {})
        if len(bucket) < self.q:
            return
        if kind == QcKind.PREPARE:
            if st.prepare_qc is not None and st.prepare_qc.view >= view:
                return
            if not self.pipelining and self.leader_of(st.slot, view) != self.id:
                return
            qc = form_qc(kind, st.slot, view, cut_digest_, bucket.values(), self.registry, self.n, self.f)
            if qc is not None:
                self._on_prepare_qc(ctx, st, qc)
        elif st.proof is None:
            if not self.pipelining and self.leader_of(st.slot, view) != self.id:
                return
            qc = form_qc(kind, st.slot, view, cut_digest_, bucket.values(), self.registry, self.n, self.f)
            if qc is not None:
                self._on_commit_qc(ctx, st, qc)

    def _on_prepare_qc(self, ctx, st: SlotState, qc: QuorumCert):
        if st.prepare_qc is None or qc.view > st.prepare_qc.view:
            st.prepare_qc = qc
        if not self.pipelining and self.leader_of(st.slot, qc.view) == self.id:
            ctx.broadcast(QcAnnounce(qc))
            return  # the leader's own commit vote comes back through the broadcast
        self._vote_commit(ctx, st, qc)

    def _vote_commit(self, ctx, st: SlotState, qc: QuorumCert):
        if qc.view != st.view or st.proof is not None:
            return
        if (QcKind.COMMIT, qc.view) in st.voted or qc.view in st.timed_out:
            return
        st.voted.add((QcKind.COMMIT, qc.view))
        st.lock = qc
        sig = self.signer.sign(vote_message(QcKind.COMMIT, st.slot, qc.view, qc.cut_digest))
        self._vote_target(ctx, st, ConsensusVote(QcKind.COMMIT, st.slot, qc.view, qc.cut_digest, sig))

    def _on_commit_qc(self, ctx, st: SlotState, qc: QuorumCert):
        """All n commit votes finalize at once; n - f of them leave the slot to the confirm round"""
        known = st.commit_qc
        if known is None or qc.view > known.view or (qc.view == known.view and len(qc.votes) > len(known.votes)):
            st.commit_qc = qc
        if st.commit_qc.cut_digest in st.cuts:
            self._settled(ctx, st.slot)
        elif not st.stash:
            self._request_cut(ctx, st, st.commit_qc.cut_digest, st.commit_qc.signers)
        leader = self.leader_of(st.slot, qc.view) == self.id
        if len(qc.votes) >= self.n:
            if leader:
                self.stats['fast_commits'] += 1
                if not self.pipelining:
                    ctx.broadcast(QcAnnounce(qc))
            self._commit(ctx, st, qc)
        elif leader and qc.view not in st.confirm_armed:
            st.confirm_armed.add(qc.view)
            ctx.set_timer(self.confirm_grace_ms, ('confirm', st.slot, qc.view))

    def on_qc(self, ctx, src: int, qc: QuorumCert):
        if not verify_qc(qc, self.registry, self.n, self.f):
            return
        st = self._slot(qc.slot)
        if st.proof is not None:
            return
        if qc.kind == QcKind.PREPARE:
            if st.prepare_qc is None or qc.view > st.prepare_qc.view:
                st.prepare_qc = qc
            self._vote_commit(ctx, st, qc)
        elif qc.kind == QcKind.COMMIT:
            self._on_commit_qc(ctx, st, qc)
        else:
            st.confirm_cert = qc
            self._commit(ctx, st, qc)

    def _commit(self, ctx, st: SlotState, proof: QuorumCert):
        """Finalize the slot on proof, a full CommitQC or a confirm certificate"""
        if st.proof is not None:
            return
        st.proof = proof
        if st.commit_qc is None or st.commit_qc.cut_digest != proof.cut_digest:
            st.commit_qc = proof
        cut = st.cuts.get(proof.cut_digest)
        if cut is None:
            self._request_cut(ctx, st, proof.cut_digest, proof.signers)
            return
        self._finish_commit(ctx, st, cut, st.commit_qc)

    def _finish_commit(self, ctx, st: SlotState, cut: TipCut, qc: QuorumCert):
        self.committed[st.slot] = (cut, qc)
        prepare = st.prepare_qc if st.prepare_qc is not None and st.prepare_qc.cut_digest == qc.cut_digest else None
        high = st.entry_tc.high_prepare if st.entry_tc is not None else None
        fresh = high is None or high.cut_digest != qc.cut_digest
        ctx.trace('commit', slot=st.slot, view=qc.view, cut=qc.cut_digest.hex(),
                  positions=list(cut.positions()), leader=self.leader_of(st.slot, qc.view),
                  proposal_ms=st.proposal_ms.get((qc.view, qc.cut_digest), st.proposal_ms.get((cut.view, cut.digest))),
                  prepare=prepare.bitmap() if prepare else 0, commit=qc.bitmap(), fresh=fresh)
        for lane, tip in enumerate(cut.tips):
            if tip is not None:
                self.tips.observe(tip, ctx.now)
                current = self.committed_tips[lane]
                if current is None or tip.pos > current.pos:
                    self.committed_tips[lane] = tip
        while self.prefix_slot in self.committed:
            prefix_cut = self.committed[self.prefix_slot][0]
            self.prefix_positions = [max(a, b) for a, b in zip(self.prefix_positions, prefix_cut.positions())]
            self.prefix_slot += 1

        if self.on_commit is not None:
            self.on_commit(ctx, st.slot, cut, qc)
        self._settled(ctx, st.slot)
        self.begin_slot(ctx, st.slot + 1)

    # --- confirm phase -------------------------------------------------------

    def on_confirm_timer(self, ctx, slot, view):
        """Grace period over without all n commit votes: ask for confirmations"""
        st = self._slot(slot)
        qc = st.commit_qc
        if st.proof is not None or qc is None or qc.view != view or st.view != view:
            return
        self.stats['confirm_rounds'] += 1
        ctx.trace('confirm', slot=slot, view=view, commit_votes=len(qc.votes))
        ctx.broadcast(Confirm(qc))
        ctx.set_timer(self.timeout_for(view), ('confirm-timeout', slot, view))

    def on_confirm(self, ctx, src: int, msg: Confirm):
        qc = msg.qc
        if qc.kind != QcKind.COMMIT or src != self.leader_of(qc.slot, qc.view) \
                or not verify_qc(qc, self.registry, self.n, self.f):
            return
        st = self._slot(qc.slot)
        if st.proof is None:
            if qc.view in st.timed_out:
                return
            self._on_commit_qc(ctx, st, qc)
        sig = self.signer.sign(vote_message(QcKind.CONFIRM, qc.slot, qc.view, qc.cut_digest))
        ctx.send(src, ConsensusVote(QcKind.CONFIRM, qc.slot, qc.view, qc.cut_digest, sig))

    def _check_confirm(self, ctx, st: SlotState, view, cut_digest_):
        if st.confirm_cert is not None or self.leader_of(st.slot, view) != self.id:
            return
        bucket = st.votes.get((QcKind.CONFIRM, view, cut_digest_), {})
        if len(bucket) < confirm_threshold(self.f):
            return
        cert = form_qc(QcKind.CONFIRM, st.slot, view, cut_digest_, bucket.values(), self.registry, self.n, self.f)
        if cert is None:
            return
        st.confirm_cert = cert
        self.stats['confirm_certs'] += 1
        ctx.trace('confirm_cert', slot=st.slot, view=view, cut=cut_digest_.hex(), confirm=cert.bitmap())
        ctx.broadcast(QcAnnounce(cert))
        self._commit(ctx, st, cert)

    def on_confirm_timeout(self, ctx, slot, view):
        st = self._slot(slot)
        if st.proof is not None or st.view != view:
            return
        self.stats['confirm_timeouts'] += 1
        ctx.trace('confirm_timeout', slot=slot, view=view)
        self._send_timeout(ctx, st)

    # --- view change ---------------------------------------------------------

    def on_slot_timeout(self, ctx, slot, view):
        st = self._slot(slot)
        if st.proof is not None or st.view != view or self.paused:
            return
        self._send_timeout(ctx, st)

    def _send_timeout(self, ctx, st: SlotState):
        if st.view in st.timed_out:
            return
        st.timed_out.add(st.view)
        self.stats['timeouts'] += 1
        ctx.trace('timeout', slot=st.slot, view=st.view)
        sig = self.signer.sign(timeout_message(st.slot, st.view))
        ctx.broadcast(TimeoutVote(st.slot, st.view, st.prepare_qc, sig))

    def on_timeout_vote(self, ctx, src: int, vote: TimeoutVote):
        if vote.sig.signer != src:
            return
        st = self._slot(vote.slot)
        if st.proof is not None:
            ctx.send(src, QcAnnounce(st.proof))
            return
        if vote.view < st.view or not self.registry.verify(vote.sig, timeout_message(vote.slot, vote.view)):
            return
        bucket = st.timeout_votes.setdefault(vote.view, {})
        bucket[src] = vote
        if vote.view == st.view and len(bucket) >= self.f + 1 and st.begun:
            self._send_timeout(ctx, st)
        if len(bucket) >= self.q:
            tc = form_timeout_cert(vote.slot, vote.view, bucket.values(), self.registry, self.n, self.f)
            if tc is not None and tc.view + 1 > st.view:
                ctx.broadcast(TcAnnounce(tc))
                self._enter_view(ctx, st, tc.view + 1, tc)

    def on_tc(self, ctx, src: int, tc: TimeoutCert):
        st = self._slot(tc.slot)
        if st.proof is not None or tc.view + 1 <= st.view:
            return
        if verify_tc(tc, self.registry, self.n, self.f):
            self._enter_view(ctx, st, tc.view + 1, tc)

    def _enter_view(self, ctx, st: SlotState, view: int, tc: TimeoutCert):
        if view <= st.view:
            return
        st.view = view
        st.entry_tc = tc
        if tc.high_prepare is not None and (st.prepare_qc is None or tc.high_prepare.view > st.prepare_qc.view):
            st.prepare_qc = tc.high_prepare
        self.stats['view_changes'] += 1
        leader = self.leader_of(st.slot, view)
        ctx.trace('view_change', slot=st.slot, view=view, leader=leader)
        logger.debug(f"Replica {self.id} slot {st.slot} entered view {view}, leader {leader}")
        if st.begun:
            self._arm_timeout(ctx, st)
            self._maybe_propose(ctx, st)

    # --- cut fetch -----------------------------------------------------------

    def _request_cut(self, ctx, st: SlotState, wanted: bytes, signers):
        if st.cut_wanted == wanted:
            return
        st.cut_wanted = wanted
        st.cut_sources = tuple(s for s in sorted(signers) if s != self.id)
        st.cut_attempt = 0
        self.stats['cut_fetches'] += 1
        self._ask_cut(ctx, st)

    def _ask_cut(self, ctx, st: SlotState):
        if not st.cut_sources:
            return
        target = st.cut_sources[st.cut_attempt % len(st.cut_sources)]
        ctx.send(target, CutRequest(st.slot, st.cut_wanted))
        ctx.set_timer(self.cut_idle_ms, ('cut-fetch', st.slot, st.cut_attempt))

    def on_cut_fetch_timer(self, ctx, slot, attempt):
        st = self._slot(slot)
        if st.cut_wanted is None or st.cut_attempt != attempt:
            return
        st.cut_attempt += 1
        self._ask_cut(ctx, st)

    def on_cut_request(self, ctx, src: int, req: CutRequest):
        st = self.slots.get(req.slot)
        cut = st.cuts.get(req.cut_digest) if st is not None else None
        if cut is not None:
            ctx.send(src, CutResponse(cut))

    def on_cut_response(self, ctx, src: int, resp: CutResponse):
        cut = resp.cut
        st = self.slots.get(cut.slot)
        if st is None or st.cut_wanted != cut.digest:
            return
        if cut_digest(cut.slot, cut.tips, cut.state_records) != cut.digest:
            return
        st.cuts[cut.digest] = cut
        self._cut_arrived(ctx, st)

    def _cut_arrived(self, ctx, st: SlotState):
        st.cut_wanted = None
        if st.proof is not None and st.slot not in self.committed:
            cut = st.cuts.get(st.proof.cut_digest)
            if cut is not None:
                self._finish_commit(ctx, st, cut, st.commit_qc)
                return
        if st.commit_qc is not None and st.commit_qc.cut_digest in st.cuts:
            self._settled(ctx, st.slot)
        self._maybe_propose(ctx, st)

    # --- dispatch ------------------------------------------------------------

    def on_timer(self, ctx, token):
        kind = token[0]
        if kind == 'slot-timeout':
            self.on_slot_timeout(ctx, token[1], token[2])
        elif kind == 'cut-idle':
            st = self._slot(token[1])
            if st.view == token[2]:
                self._maybe_propose(ctx, st, idle=True)
        elif kind == 'confirm':
            self.on_confirm_timer(ctx, token[1], token[2])
        elif kind == 'confirm-timeout':
            self.on_confirm_timeout(ctx, token[1], token[2])
        elif kind == 'cut-fetch':
            self.on_cut_fetch_timer(ctx, token[1], token[2])

    def handle(self, ctx, src: int, payload, send_ms: float) -> bool:
        """Route a consensus message; False when payload is not one"""
        if isinstance(payload, Prepare):
            self.on_prepare(ctx, src, payload, send_ms)
        elif isinstance(payload, ConsensusVote):
            self.on_vote(ctx, src, payload)
        elif isinstance(payload, QcAnnounce):
            self.on_qc(ctx, src, payload.qc)
        elif isinstance(payload, Confirm):
            self.on_confirm(ctx, src, payload)
        elif isinstance(payload, TimeoutVote):
            self.on_timeout_vote(ctx, src, payload)
        elif isinstance(payload, TcAnnounce):
            self.on_tc(ctx, src, payload.tc)
        elif isinstance(payload, CutRequest):
            self.on_cut_request(ctx, src, payload)
        elif isinstance(payload, CutResponse):
            self.on_cut_response(ctx, src, payload)
        else:
            return False
        return True


def missed_slot_picker(seed: int, rate: float):
    """Deterministic per-slot coin: True means the view-0 leader skips the slot"""
    if not rate:
        return None
    threshold = int(rate * (1 << 64))

    def missed(slot):
        draw = hashlib.sha256(b'missed-slot' + seed.to_bytes(8, 'big') + slot.to_bytes(8, 'big')).digest()
        return int.from_bytes(draw[:8], 'big') < threshold
    return missed

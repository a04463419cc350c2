from collections import Counter

import pytest

from models import (ZERO_DIGEST, Confirm, ConsensusVote, CutRequest, CutResponse, PoACert, Prepare, QcAnnounce,
                    QcKind, TcAnnounce, TimeoutVote, TipRef)
from services.codec_service import make_car
from services.consensus_service import (CarMissing, ConsensusEngine, LeaderSchedule, confirm_threshold,
                                        form_qc, form_timeout_cert, linearize, linearize_cut, make_cut,
                                        missed_slot_picker, quorum_size, select_leader, timeout_message,
                                        verify_qc, verify_tc, vote_message)
from services.crypto_service import KeyRegistry, digest
from services.lane_service import TipTracker, assemble_poa, car_vote_message
from services.replica import ReplicaContext

CUT = b'\x11' * 32
OTHER = b'\x22' * 32


def votes(registry, kind, slot, view, cut, signers):
    return [registry.sign(r, vote_message(kind, slot, view, cut)) for r in signers]


def timeout_vote(registry, r, slot, view, high=None):
    return TimeoutVote(slot, view, high, registry.sign(r, timeout_message(slot, view)))


# ---------------------------------------------------------------------------
# Thresholds and certificates
# ---------------------------------------------------------------------------

def test_quorum_arithmetic():
    assert quorum_size(4, 1) == 3
    assert confirm_threshold(1) == 3
    assert quorum_size(7, 2) == 5
    assert quorum_size(16, 5) == 11


@pytest.mark.parametrize('kind', [QcKind.PREPARE, QcKind.COMMIT, QcKind.CONFIRM])
def test_certificates_form_at_exactly_three_of_four(registry, kind):
    assert form_qc(kind, 0, 0, CUT, votes(registry, kind, 0, 0, CUT, [0, 1]), registry, 4, 1) is None
    qc = form_qc(kind, 0, 0, CUT, votes(registry, kind, 0, 0, CUT, [0, 1, 3]), registry, 4, 1)
    assert qc is not None
    assert qc.signers == (0, 1, 3)
    assert qc.bitmap() == 0b1011
    assert verify_qc(qc, registry, 4, 1)


def test_qc_ignores_duplicates_and_mismatched_votes(registry):
    mixed = votes(registry, QcKind.PREPARE, 0, 0, CUT, [0, 0, 1]) + votes(registry, QcKind.PREPARE, 0, 0, OTHER, [2])
    assert form_qc(QcKind.PREPARE, 0, 0, CUT, mixed, registry, 4, 1) is None
    wrong_view = votes(registry, QcKind.PREPARE, 0, 1, CUT, [2])
    assert form_qc(QcKind.PREPARE, 0, 0, CUT, mixed + wrong_view, registry, 4, 1) is None


def test_qc_does_not_verify_under_other_keys(registry):
    qc = form_qc(QcKind.COMMIT, 3, 0, CUT, votes(registry, QcKind.COMMIT, 3, 0, CUT, [0, 1, 2]), registry, 4, 1)
    assert not verify_qc(qc, KeyRegistry(4, 99), 4, 1)


def test_timeout_cert_carries_highest_valid_prepare(registry):
    low = form_qc(QcKind.PREPARE, 5, 0, CUT, votes(registry, QcKind.PREPARE, 5, 0, CUT, [0, 1, 2]), registry, 4, 1)
    high = form_qc(QcKind.PREPARE, 5, 1, OTHER, votes(registry, QcKind.PREPARE, 5, 1, OTHER, [1, 2, 3]),
                   registry, 4, 1)
    foreign = form_qc(QcKind.PREPARE, 4, 2, CUT, votes(registry, QcKind.PREPARE, 4, 2, CUT, [1, 2, 3]),
                      registry, 4, 1)
    tvotes = [timeout_vote(registry, 0, 5, 2, low), timeout_vote(registry, 1, 5, 2, high),
              timeout_vote(registry, 2, 5, 2, foreign)]
    tc = form_timeout_cert(5, 2, tvotes, registry, 4, 1)
    assert tc.high_prepare == high
    assert verify_tc(tc, registry, 4, 1)
    assert form_timeout_cert(5, 2, tvotes[:2], registry, 4, 1) is None


# ---------------------------------------------------------------------------
# Leader schedule
# ---------------------------------------------------------------------------

def test_equal_stakes_rotate():
    schedule = LeaderSchedule({r: 1 for r in range(4)})
    assert [schedule.leader(k) for k in range(8)] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert schedule.leader_for(2, 3) == schedule.leader(5)


def test_leader_frequency_follows_stake():
    schedule = LeaderSchedule({0: 3, 1: 1, 2: 1, 3: 1})
    counts = Counter(schedule.leader(k) for k in range(600))
    assert counts == {0: 300, 1: 100, 2: 100, 3: 100}


def test_select_leader_matches_schedule():
    stakes = {0: 2, 1: 5, 2: 1, 3: 1}
    schedule = LeaderSchedule(stakes)
    assert [select_leader(k, stakes) for k in range(20)] == [schedule.leader(k) for k in range(20)]


def test_leader_schedule_needs_stake():
    with pytest.raises(ValueError):
        LeaderSchedule({0: 0, 1: 0})


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

def tip_of(car):
    return TipRef(car.lane, car.pos, car.digest, PoACert(car.digest, ()))


@pytest.fixture
def lanes():
    c00 = make_car(0, 0, ZERO_DIGEST, [b't1'])
    c01 = make_car(0, 1, c00.digest, [b't2', b't3'])
    c10 = make_car(1, 0, ZERO_DIGEST, [b't3', b't4'])
    return c00, c01, c10


def test_cut_digest_ignores_view_and_proposer(lanes):
    tips = [tip_of(lanes[0]), None]
    assert make_cut(4, 0, tips, 1).digest == make_cut(4, 3, tips, 2).digest
    assert make_cut(4, 0, tips, 1).digest != make_cut(5, 0, tips, 1).digest


def test_linearize_orders_by_lane_then_position_and_dedupes(lanes):
    c00, c01, c10 = lanes
    archive = {car.digest: car for car in lanes}
    cuts = [make_cut(0, 0, [tip_of(c00), None], 0), make_cut(1, 0, [tip_of(c01), tip_of(c10)], 1),
            make_cut(2, 0, [tip_of(c00), tip_of(c10)], 0)]
    first, second, third = linearize(cuts, archive.get, 2)
    assert (first.height, first.txs, first.cars) == (1, [b't1'], [(0, 0)])
    assert second.txs == [b't2', b't3', b't4']
    assert second.cars == [(0, 1), (1, 0)]
    assert second.duplicates == [digest(b't3')]
    assert third.txs == [] and third.cars == []


def test_linearize_walks_whole_prefix_under_a_tip(lanes):
    c00, c01, _ = lanes
    archive = {car.digest: car for car in lanes}
    (block,) = linearize([make_cut(0, 0, [tip_of(c01), None], 0)], archive.get, 2)
    assert block.txs == [b't1', b't2', b't3']


def test_missing_car_leaves_cursor_untouched(lanes):
    c00, c01, c10 = lanes
    archive = {c01.digest: c01, c10.digest: c10}
    cursor, seen = [-1, -1], set()
    with pytest.raises(CarMissing) as info:
        linearize_cut(make_cut(0, 0, [tip_of(c01), tip_of(c10)], 0), 1, cursor, archive.get, seen)
    assert info.value.car_digest == c00.digest
    assert cursor == [-1, -1]
    assert seen == set()


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@pytest.fixture
def commits():
    return []


def engine_for(registry, replica_id, commits, **kwargs):
    stakes = {r: 1 for r in range(4)}
    return ConsensusEngine(replica_id, 4, 1, registry.signer_for(replica_id), registry, LeaderSchedule(stakes),
                           TipTracker(4, registry, 1), None,
                           on_commit=lambda ctx, slot, cut, qc: commits.append((slot, cut.digest)), **kwargs)


def ctx_at(replica_id, now=0.0):
    return ReplicaContext(replica_id, 4, now)


def reasons(ctx):
    return [fields['reason'] for kind, fields in ctx.events if kind == 'prepare_rejected']


def cast(registry, engine, ctx, kind, cut_digest, signers, slot=0, view=0):
    for r, sig in zip(signers, votes(registry, kind, slot, view, cut_digest, signers)):
        engine.on_vote(ctx, r, ConsensusVote(kind, slot, view, cut_digest, sig))


def certified(registry, lane, pos):
    car = make_car(lane, pos, ZERO_DIGEST, [b'tx-%d-%d' % (lane, pos)])
    msg = car_vote_message(lane, pos, car.digest)
    poa = assemble_poa([registry.sign(r, msg) for r in (0, 1)], car.digest, lane, pos, registry, f=1)
    return TipRef(lane, pos, car.digest, poa)


def test_timeout_grows_with_backoff_up_to_cap(registry, commits):
    engine = engine_for(registry, 0, commits, timeout_ms=2000, backoff=2.0, timeout_cap_ms=5000)
    assert [engine.timeout_for(v) for v in range(4)] == [2000, 4000, 5000, 5000]
    flat = engine_for(registry, 0, commits)
    assert flat.timeout_for(7) == flat.timeout_for(0)


def test_pipelined_slot_commits_after_two_vote_rounds(registry, commits):
    engine = engine_for(registry, 1, commits)
    ctx = ctx_at(1)
    engine.begin_slot(ctx, 0)
    assert ctx.timers == [(2000.0, ('slot-timeout', 0, 0))]

    cut = make_cut(0, 0, [None] * 4, 0)
    ctx = ctx_at(1, 50.0)
    engine.on_prepare(ctx, 0, Prepare(cut), 0.0)
    sent = [payload for _, payload in ctx.outbox if isinstance(payload, ConsensusVote)]
    assert len(sent) == 4 and sent[0].kind == QcKind.PREPARE
    assert engine.slots[1].begun

    ctx = ctx_at(1, 100.0)
    for r, sig in zip((0, 2, 3), votes(registry, QcKind.PREPARE, 0, 0, cut.digest, (0, 2, 3))):
        engine.on_vote(ctx, r, ConsensusVote(QcKind.PREPARE, 0, 0, cut.digest, sig))
    commit_votes = [p for _, p in ctx.outbox if isinstance(p, ConsensusVote) and p.kind == QcKind.COMMIT]
    assert len(commit_votes) == 4
    assert commits == []

    ctx = ctx_at(1, 150.0)
    cast(registry, engine, ctx, QcKind.COMMIT, cut.digest, (0, 1, 2, 3))
    assert commits == [(0, cut.digest)]
    (commit,) = [fields for kind, fields in ctx.events if kind == 'commit']
    assert commit['proposal_ms'] == 0.0
    assert commit['prepare'] == 0b1101
    assert commit['commit'] == 0b1111
    assert commit['fresh']
    assert not ctx.timers


def test_serialized_votes_go_to_leader_only(registry, commits):
    engine = engine_for(registry, 1, commits, pipelining=False)
    engine.begin_slot(ctx_at(1), 0)
    ctx = ctx_at(1, 50.0)
    engine.on_prepare(ctx, 0, Prepare(make_cut(0, 0, [None] * 4, 0)), 0.0)
    assert [(dst, type(p).__name__) for dst, p in ctx.outbox] == [(0, 'ConsensusVote')]
    assert 1 not in engine.slots


def test_prepare_rejections(registry, commits):
    engine = engine_for(registry, 1, commits)
    engine.begin_slot(ctx_at(1), 0)
    ctx = ctx_at(1)
    engine.on_prepare(ctx, 2, Prepare(make_cut(0, 0, [None] * 4, 2)), 0.0)
    engine.on_prepare(ctx, 0, Prepare(make_cut(0, 0, [None] * 3, 0)), 0.0)
    engine.prefix_positions = [3, -1, -1, -1]
    engine.on_prepare(ctx, 0, Prepare(make_cut(0, 0, [None] * 4, 0)), 0.0)
    assert reasons(ctx) == ['wrong proposer', 'bad width', 'non-monotonic']
    assert engine.stats['rejected_prepares'] == 3
    assert not ctx.outbox


def test_early_prepare_waits_for_slot_start(registry, commits):
    engine = engine_for(registry, 1, commits, pipelining=False)
    ctx = ctx_at(1)
    engine.on_prepare(ctx, 0, Prepare(make_cut(0, 0, [None] * 4, 0)), 0.0)
    assert not ctx.outbox
    engine.begin_slot(ctx, 0)
    assert any(isinstance(p, ConsensusVote) for _, p in ctx.outbox)


def test_timeout_votes_join_and_form_certificate(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    ctx = ctx_at(2, 2000.0)
    engine.on_timeout_vote(ctx, 0, timeout_vote(registry, 0, 0, 0))
    assert not ctx.outbox
    engine.on_timeout_vote(ctx, 1, timeout_vote(registry, 1, 0, 0))
    mine = [p for _, p in ctx.outbox if isinstance(p, TimeoutVote)]
    assert mine and mine[0].sig.signer == 2

    ctx = ctx_at(2, 2050.0)
    engine.on_timeout_vote(ctx, 3, timeout_vote(registry, 3, 0, 0))
    assert engine.slots[0].view == 1
    assert any(isinstance(p, TcAnnounce) for _, p in ctx.outbox)
    assert ('view_change', {'slot': 0, 'view': 1, 'leader': 1}) in ctx.events
    assert (2050.0 + 2000.0, ('slot-timeout', 0, 1)) in ctx.timers


def test_prepare_for_later_view_needs_certificate(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    ctx = ctx_at(2)
    cut = make_cut(0, 1, [None] * 4, 1)
    engine.on_prepare(ctx, 1, Prepare(cut), 0.0)
    assert reasons(ctx) == ['unjustified view']

    tc = form_timeout_cert(0, 0, [timeout_vote(registry, r, 0, 0) for r in (0, 1, 3)], registry, 4, 1)
    ctx = ctx_at(2)
    engine.on_prepare(ctx, 1, Prepare(cut, tc), 0.0)
    assert engine.slots[0].view == 1
    assert any(isinstance(p, ConsensusVote) for _, p in ctx.outbox)


def test_committed_replica_answers_timeouts_with_commit_certificate(registry, commits):
    engine = engine_for(registry, 1, commits)
    engine.begin_slot(ctx_at(1), 0)
    cut = make_cut(0, 0, [None] * 4, 0)
    engine.on_prepare(ctx_at(1), 0, Prepare(cut), 0.0)
    qc = form_qc(QcKind.COMMIT, 0, 0, cut.digest, votes(registry, QcKind.COMMIT, 0, 0, cut.digest, (0, 1, 2, 3)),
                 registry, 4, 1)
    engine.on_qc(ctx_at(1), 0, qc)
    assert commits == [(0, cut.digest)]
    ctx = ctx_at(1)
    engine.on_timeout_vote(ctx, 3, timeout_vote(registry, 3, 0, 0))
    assert ctx.outbox == [(3, QcAnnounce(qc))]


def test_missed_slot_picker():
    assert missed_slot_picker(1, 0.0) is None
    picker = missed_slot_picker(1, 1 / 90)
    misses = [slot for slot in range(9000) if picker(slot)]
    assert 60 <= len(misses) <= 140
    assert misses == [slot for slot in range(9000) if missed_slot_picker(1, 1 / 90)(slot)]


# ---------------------------------------------------------------------------
# Confirm round, locks and per-lane floors
# ---------------------------------------------------------------------------

def commit_quorum_at_leader(registry, commits):
    """Leader 0 holding a CommitQC with three of four votes"""
    engine = engine_for(registry, 0, commits)
    engine.begin_slot(ctx_at(0), 0)
    cut = make_cut(0, 0, [None] * 4, 0)
    ctx = ctx_at(0, 10.0)
    engine.on_prepare(ctx, 0, Prepare(cut), 0.0)
    cast(registry, engine, ctx, QcKind.PREPARE, cut.digest, (0, 1, 2))
    cast(registry, engine, ctx, QcKind.COMMIT, cut.digest, (0, 1, 2))
    return engine, cut, ctx


def test_three_commit_votes_then_three_confirms_commit(registry, commits):
    engine, cut, ctx = commit_quorum_at_leader(registry, commits)
    assert commits == []
    assert (110.0, ('confirm', 0, 0)) in ctx.timers

    ctx = ctx_at(0, 110.0)
    engine.on_timer(ctx, ('confirm', 0, 0))
    confirms = [(dst, p) for dst, p in ctx.outbox if isinstance(p, Confirm)]
    assert [dst for dst, _ in confirms] == [0, 1, 2, 3]
    assert len(confirms[0][1].qc.votes) == 3
    assert (2110.0, ('confirm-timeout', 0, 0)) in ctx.timers

    ctx = ctx_at(0, 120.0)
    cast(registry, engine, ctx, QcKind.CONFIRM, cut.digest, (0, 1))
    assert commits == []
    cast(registry, engine, ctx, QcKind.CONFIRM, cut.digest, (2,))
    assert commits == [(0, cut.digest)]
    (cert,) = [fields for kind, fields in ctx.events if kind == 'confirm_cert']
    assert cert['confirm'] == 0b0111
    announced = [p.qc for _, p in ctx.outbox if isinstance(p, QcAnnounce)]
    assert len(announced) == 4 and announced[0].kind == QcKind.CONFIRM
    assert engine.stats['confirm_certs'] == 1

    ctx = ctx_at(0, 2110.0)
    engine.on_timer(ctx, ('confirm-timeout', 0, 0))
    assert not ctx.outbox


def test_two_confirms_time_out_into_the_next_view(registry, commits):
    engine, cut, _ = commit_quorum_at_leader(registry, commits)
    ctx = ctx_at(0, 110.0)
    engine.on_timer(ctx, ('confirm', 0, 0))
    cast(registry, engine, ctx, QcKind.CONFIRM, cut.digest, (0, 1))
    assert commits == []

    ctx = ctx_at(0, 2110.0)
    engine.on_timer(ctx, ('confirm-timeout', 0, 0))
    assert ('confirm_timeout', {'slot': 0, 'view': 0}) in ctx.events
    mine = [p for _, p in ctx.outbox if isinstance(p, TimeoutVote)]
    assert len(mine) == 4
    assert mine[0].high_prepare.cut_digest == cut.digest

    ctx = ctx_at(0, 2150.0)
    engine.on_timeout_vote(ctx, 0, mine[0])
    for r in (1, 2):
        engine.on_timeout_vote(ctx, r, timeout_vote(registry, r, 0, 0))
    st = engine.slots[0]
    assert st.view == 1
    assert st.entry_tc.high_prepare.cut_digest == cut.digest
    assert any(isinstance(p, TcAnnounce) for _, p in ctx.outbox)
    assert engine.stats['confirm_timeouts'] == 1
    assert commits == []


def test_waiting_replica_commits_on_confirm_certificate(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    cut = make_cut(0, 0, [None] * 4, 0)
    engine.on_prepare(ctx_at(2), 0, Prepare(cut), 0.0)
    ctx = ctx_at(2, 100.0)
    cast(registry, engine, ctx, QcKind.COMMIT, cut.digest, (0, 1, 3))
    assert commits == []
    assert not ctx.timers

    cert = form_qc(QcKind.CONFIRM, 0, 0, cut.digest, votes(registry, QcKind.CONFIRM, 0, 0, cut.digest, (0, 1, 3)),
                   registry, 4, 1)
    engine.on_qc(ctx, 0, cert)
    assert commits == [(0, cut.digest)]
    ctx = ctx_at(2, 3000.0)
    engine.on_timeout_vote(ctx, 3, timeout_vote(registry, 3, 0, 0))
    assert ctx.outbox == [(3, QcAnnounce(cert))]


def test_replica_acks_confirm_from_the_leader_only(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    cut = make_cut(0, 0, [None] * 4, 0)
    engine.on_prepare(ctx_at(2), 0, Prepare(cut), 0.0)
    qc = form_qc(QcKind.COMMIT, 0, 0, cut.digest, votes(registry, QcKind.COMMIT, 0, 0, cut.digest, (0, 1, 3)),
                 registry, 4, 1)
    ctx = ctx_at(2, 200.0)
    engine.on_confirm(ctx, 1, Confirm(qc))
    assert not ctx.outbox
    engine.on_confirm(ctx, 0, Confirm(qc))
    (ack,) = ctx.outbox
    assert ack[0] == 0
    assert (ack[1].kind, ack[1].cut_digest) == (QcKind.CONFIRM, cut.digest)
    assert commits == []


def test_timed_out_replica_casts_no_commit_vote(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    cut = make_cut(0, 0, [None] * 4, 0)
    engine.on_prepare(ctx_at(2), 0, Prepare(cut), 0.0)
    ctx = ctx_at(2, 2000.0)
    engine.on_timer(ctx, ('slot-timeout', 0, 0))
    assert [type(p).__name__ for _, p in ctx.outbox] == ['TimeoutVote'] * 4

    prepared = form_qc(QcKind.PREPARE, 0, 0, cut.digest, votes(registry, QcKind.PREPARE, 0, 0, cut.digest, (0, 1, 3)),
                       registry, 4, 1)
    ctx = ctx_at(2, 2010.0)
    engine.on_qc(ctx, 0, prepared)
    assert ctx.outbox == []
    assert engine.slots[0].lock is None

    qc = form_qc(QcKind.COMMIT, 0, 0, cut.digest, votes(registry, QcKind.COMMIT, 0, 0, cut.digest, (0, 1, 3)),
                 registry, 4, 1)
    engine.on_confirm(ctx, 0, Confirm(qc))
    assert ctx.outbox == []


def test_next_view_leader_reproposes_the_high_prepare(registry, commits):
    cut = make_cut(0, 0, [None] * 4, 0)
    prepared = form_qc(QcKind.PREPARE, 0, 0, cut.digest, votes(registry, QcKind.PREPARE, 0, 0, cut.digest, (0, 2, 3)),
                       registry, 4, 1)
    tc = form_timeout_cert(0, 0, [timeout_vote(registry, r, 0, 0, prepared) for r in (0, 2, 3)], registry, 4, 1)

    engine = engine_for(registry, 1, commits)
    engine.begin_slot(ctx_at(1), 0)
    engine.on_prepare(ctx_at(1), 0, Prepare(cut), 0.0)
    ctx = ctx_at(1, 2100.0)
    engine.on_tc(ctx, 0, tc)
    sent = [p for dst, p in ctx.outbox if dst == 1 and isinstance(p, Prepare) and p.cut.slot == 0]
    (prepare,) = sent
    assert prepare.cut.digest == cut.digest
    assert (prepare.cut.view, prepare.cut.proposer) == (1, 1)
    assert prepare.justify == tc

    fresh = engine_for(registry, 1, commits)
    fresh.begin_slot(ctx_at(1), 0)
    ctx = ctx_at(1, 2100.0)
    fresh.on_tc(ctx, 0, tc)
    assert ctx.outbox == [(0, CutRequest(0, cut.digest))]
    ctx = ctx_at(1, 2120.0)
    fresh.on_cut_response(ctx, 0, CutResponse(cut))
    assert [p.cut.digest for dst, p in ctx.outbox if isinstance(p, Prepare)] == [cut.digest] * 4


def test_locked_replica_rejects_a_conflicting_cut(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    locked = make_cut(0, 0, [None] * 4, 0)
    engine.on_prepare(ctx_at(2), 0, Prepare(locked), 0.0)
    prepared = form_qc(QcKind.PREPARE, 0, 0, locked.digest,
                       votes(registry, QcKind.PREPARE, 0, 0, locked.digest, (0, 1, 3)), registry, 4, 1)
    engine.on_qc(ctx_at(2, 50.0), 0, prepared)
    assert engine.slots[0].lock == prepared

    tc = form_timeout_cert(0, 0, [timeout_vote(registry, r, 0, 0) for r in (0, 1, 3)], registry, 4, 1)
    other = make_cut(0, 1, [certified(registry, 0, 0), None, None, None], 1)
    assert other.digest != locked.digest
    ctx = ctx_at(2, 2100.0)
    engine.on_prepare(ctx, 1, Prepare(other, tc), 2050.0)
    assert reasons(ctx) == ['locked']
    assert not [p for _, p in ctx.outbox if isinstance(p, ConsensusVote)]


def test_next_slot_cut_waits_for_the_previous_commit_certificate(registry, commits):
    engine = engine_for(registry, 2, commits)
    engine.begin_slot(ctx_at(2), 0)
    first = make_cut(0, 0, [certified(registry, 0, 5), None, None, None], 0)
    engine.on_prepare(ctx_at(2), 0, Prepare(first), 0.0)
    assert engine.slots[1].begun
    assert engine.floor_positions(1) is None

    stale = make_cut(1, 0, [certified(registry, 0, 4), None, None, None], 1)
    ctx = ctx_at(2, 60.0)
    engine.on_prepare(ctx, 1, Prepare(stale), 50.0)
    assert not ctx.outbox and not reasons(ctx)

    ctx = ctx_at(2, 100.0)
    cast(registry, engine, ctx, QcKind.COMMIT, first.digest, (0, 1, 3))
    assert engine.floor_positions(1) == (5, -1, -1, -1)
    assert reasons(ctx) == ['non-monotonic']
    assert commits == []

    good = make_cut(1, 0, [certified(registry, 0, 6), None, None, None], 1)
    ctx = ctx_at(2, 110.0)
    engine.on_prepare(ctx, 1, Prepare(good), 100.0)
    assert [p.cut_digest for _, p in ctx.outbox if isinstance(p, ConsensusVote)] == [good.digest] * 4

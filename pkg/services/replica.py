# services/replica.py
"""One simulated replica.

A Replica owns its lane, its voter state, its consensus engine, its store and
its executor. It never holds a reference to another replica: everything it
says leaves through the ReplicaContext outbox and the network delivers it.
"""

from __future__ import annotations

from typing import Optional

from loguru import logger

from config import COLD_AFTER_BLOCKS, MAX_STATE_LAG, RETRY_BUDGET
from exceptions import InvariantViolation
from models import (Behavior, CarProposal, CarVote, FaultSpec, FetchRequest, FetchResponse, NetConfig,
                    PoaAnnounce, SyncRequest, Toggles)
from services.codec_service import encode_transaction
from services.commitment_service import (SnapshotIndexer, StateConsensus, attest, attestation_from_tx,
                                         attestation_tx)
from services.consensus_service import (CarMissing, ConsensusEngine, LeaderSchedule, linearize_cut,
                                        missed_slot_picker)
from services.crypto_service import KeyRegistry
from services.execution_service import Genesis, exec_block_sequential, preprocess_batch
from services.lane_service import Fetcher, LaneOwner, LaneVoter, TipTracker
from services.parallel_executor import DeterministicScheduler, ParallelExecutor
from services.storage_service import CarArchive, FlatStore

LANE_TICK = ('lane-tick',)


class ReplicaContext:
    """Everything a handler may do to the outside world, buffered until the handler returns"""

    def __init__(self, replica_id: int, n: int, now: float):
        self.replica_id = replica_id
        self.n = n
        self.now = now
        self.outbox = []
        self.timers = []
        self.events = []

    def send(self, dst: int, payload):
        self.outbox.append((dst, payload))

    def broadcast(self, payload):
        for dst in range(self.n):
            self.outbox.append((dst, payload))

    def set_timer(self, delay_ms: float, token):
        self.timers.append((self.now + delay_ms, token))

    def trace(self, kind: str, **fields):
        self.events.append((kind, fields))


class Replica:
    def __init__(self, replica_id: int, config: NetConfig, registry: KeyRegistry, genesis: Genesis,
                 toggles: Toggles = Toggles(), faults=(), wal_path: Optional[str] = None):
        self.id = replica_id
        self.n = config.n
        self.f = config.f
        self.seed = config.seed
        self.toggles = toggles
        self.faults = tuple(spec for spec in faults if spec.replica == replica_id)
        self.crashed = False
        self.signer = registry.signer_for(replica_id)
        self.registry = registry
        stakes = config.stake_map()

        self.archive = CarArchive()
        self.owner = LaneOwner(replica_id, registry, self.f, toggles.batch_cap)
        self.voter = LaneVoter(replica_id, self.signer, self.archive)
        self.tips = TipTracker(self.n, registry, self.f)
        self.fetcher = Fetcher(replica_id, self.archive)
        self.state_consensus = StateConsensus(registry, stakes, MAX_STATE_LAG)
        self.schedule = LeaderSchedule(stakes)
        self.engine = ConsensusEngine(
            replica_id, self.n, self.f, self.signer, registry, self.schedule, self.tips, self.state_consensus,
            pipelining=toggles.pipelining, timeout_ms=toggles.timeout_ms, backoff=toggles.timeout_backoff,
            timeout_cap_ms=toggles.timeout_cap_ms, cut_idle_ms=toggles.cut_idle_ms,
            confirm_grace_ms=toggles.confirm_grace_ms, inclusion_grace_ms=toggles.inclusion_grace_ms,
            faults=self.faults, missed_slot=missed_slot_picker(config.seed, toggles.missed_slot_rate),
            on_commit=self._on_commit)

        self.chain_id = genesis.chain_id
        self.clients = genesis.registry()
        self.store = FlatStore(wal_path, cold_after=COLD_AFTER_BLOCKS)
        self.store.apply_block(0, dict(genesis.state.items()))
        self.world = genesis.state.copy()
        self.executor = None
        if toggles.exec_workers > 1:
            scheduler = DeterministicScheduler(config.seed * 1000 + replica_id)
            self.executor = ParallelExecutor(toggles.exec_workers, RETRY_BUDGET, scheduler)
        self.indexer = SnapshotIndexer(toggles.snapshot_interval) if toggles.snapshot_interval else None

        self.committed_cuts = {}
        self.next_exec_slot = 0
        self.cursor = [-1] * self.n
        self.seen_txs = set()
        self.executed = {}  # height -> commitment
        self.occ_aborts = 0

    def __repr__(self):
        return f"Replica({self.id}, height={self.height})"

    @property
    def height(self):
        return self.store.last_height

    def fault(self, behavior: Behavior) -> Optional[FaultSpec]:
        for spec in self.faults:
            if spec.behavior == behavior:
                return spec
        return None

    def _active(self, behavior, now):
        spec = self.fault(behavior)
        return spec is not None and spec.active(now)

    # --- lifecycle ---------------------------------------------------------

    def start(self, ctx: ReplicaContext):
        ctx.set_timer(self.toggles.car_interval_ms, LANE_TICK)
        self.engine.begin_slot(ctx, 0)

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()
        if self.indexer is not None:
            self.indexer.shutdown()
        self.store.close()

    def submit(self, ctx: ReplicaContext, raw: bytes):
        self.owner.submit(raw)

    # --- dispatch ----------------------------------------------------------

    def on_message(self, ctx: ReplicaContext, src: int, payload, send_ms: float):
        if isinstance(payload, CarProposal):
            self._on_car(ctx, src, payload.car)
        elif isinstance(payload, CarVote):
            tip = self.owner.on_vote(payload)
            if tip is not None:
                ctx.trace('poa', lane=tip.lane, pos=tip.pos, signers=list(tip.poa.signers))
                ctx.broadcast(PoaAnnounce(tip))
        elif isinstance(payload, PoaAnnounce):
            if self.tips.observe(payload.tip, ctx.now):
                self.engine.on_tips_advanced(ctx)
        elif isinstance(payload, SyncRequest):
            if not self._active(Behavior.WITHHOLD_BATCH, ctx.now) and payload.lane == self.id:
                for car in self.owner.cars_between(payload.from_pos, payload.to_pos):
                    ctx.send(src, CarProposal(car))
        elif isinstance(payload, FetchRequest):
            if not self._active(Behavior.WITHHOLD_BATCH, ctx.now):
                response = self.fetcher.serve(payload)
                if response is not None:
                    ctx.send(src, response)
        elif isinstance(payload, FetchResponse):
            if self.fetcher.on_response(payload) is not None:
                self._drain_execution(ctx)
        elif not self.engine.handle(ctx, src, payload, send_ms):
            logger.warning(f"Replica {self.id} dropped unknown payload {type(payload).__name__} from {src}")

    def on_timer(self, ctx: ReplicaContext, token):
        if token == LANE_TICK:
            self._lane_tick(ctx)
            ctx.set_timer(self.toggles.car_interval_ms, LANE_TICK)
        elif token[0] == 'fetch':
            self.fetcher.on_timer(ctx, token[1], token[2])
        else:
            self.engine.on_timer(ctx, token)

    # --- lane ----------------------------------------------------------------

    def _on_car(self, ctx, src, car):
        if car.lane != src:
            return
        outcome = self.voter.vote_on_car(car)
        if outcome.rejected == 'equivocation':
            ctx.trace('lane_equivocation', lane=car.lane, pos=car.pos)
        for voted, sig in outcome.votes:
            ctx.send(voted.lane, CarVote(voted.lane, voted.pos, sig))
        if outcome.sync is not None:
            lane, from_pos, to_pos = outcome.sync
            ctx.send(lane, SyncRequest(lane, from_pos, to_pos))

    def _lane_tick(self, ctx):
        owner = self.owner
        # one car in flight at a time; the next waits for the previous PoA
        if owner.next_pos > 0 and (owner.tip is None or owner.tip.car.pos < owner.next_pos - 1):
            return
        if not owner.pending:
            return
        car = owner.propose_car(owner.take_batch())
        if self._active(Behavior.EQUIVOCATE_LANE, ctx.now):
            twin = owner.propose_conflicting(tuple(car.batch) + (b'equivocate' + car.pos.to_bytes(8, 'big'),))
            ctx.trace('equivocate_lane', lane=self.id, pos=car.pos)
            for dst in range(self.n):
                ctx.send(dst, CarProposal(car if dst < self.n // 2 or twin is None else twin))
            return
        if self._active(Behavior.WITHHOLD_BATCH, ctx.now):
            # only f+1 holders: this replica and f others
            for dst in [self.id] + [(self.id + k) % self.n for k in range(1, self.f + 1)]:
                ctx.send(dst, CarProposal(car))
            return
        ctx.broadcast(CarProposal(car))

    # --- execution -----------------------------------------------------------

    def _on_commit(self, ctx, slot, cut, qc):
        self.committed_cuts[slot] = cut
        self._drain_execution(ctx)

    def _drain_execution(self, ctx):
        while self.next_exec_slot in self.committed_cuts:
            slot = self.next_exec_slot
            cut = self.committed_cuts[slot]
            height = slot + 1
            try:
                block = linearize_cut(cut, height, self.cursor, self.archive.get, self.seen_txs)
            except CarMissing as missing:
                self.fetcher.fetch_missing(ctx, missing.car_digest, missing.signers)
                return
            self._execute(ctx, slot, cut, block)
            self.next_exec_slot += 1
            del self.committed_cuts[slot]

    def _execute(self, ctx, slot, cut, block):
        prepared = preprocess_batch(block.txs, self.clients, self.chain_id)
        for tx in prepared.system_txs:
            att = attestation_from_tx(tx)
            if att is not None:
                self.state_consensus.observe(att)

        if self.executor is not None:
            final, receipts, stats = self.executor.execute(self.world, prepared.txs, block.height)
            occ = stats.counters()
        else:
            final, receipts = exec_block_sequential(self.world, prepared.txs, block.height)
            occ = {'executions': len(prepared.txs), 'aborts': 0, 'fallbacks': 0, 'max_incarnation': 0}
        self.occ_aborts += occ['aborts']

        writes = {}
        for receipt in receipts:
            writes.update(receipt.writes)
        self.store.apply_block(block.height, writes)
        if self.store.commitment != final.commitment:
            raise InvariantViolation(
                f"replica {self.id} store commitment diverged from executed state at height {block.height}",
                self.seed, ctx.now)
        self.world = final
        commitment = final.commitment
        self.executed[block.height] = commitment

        state = self.state_consensus
        newly = state.on_cut_committed(cut.state_records, slot, block.height)
        state.note_executed(block.height, commitment)
        state.check_stall(block.height)
        for record in newly:
            if state.diverged(record.height):
                ctx.trace('diverged', height=record.height)
        if state.halted and not self.engine.paused:
            self.engine.paused = True
            ctx.trace('halted', height=state.halted_at, phi=str(state.phi))
            logger.warning(f"Replica {self.id} paused consensus at height {block.height}")

        attested = commitment
        wrong = self.fault(Behavior.WRONG_STATE_ROOT)
        if wrong is not None and wrong.active(ctx.now):
            attested = (int.from_bytes(commitment, 'big') ^ wrong.bias).to_bytes(len(commitment), 'big')
        att = attest(self.signer, block.height, attested)
        self.owner.submit(encode_transaction(attestation_tx(att, self.chain_id)), front=True)

        ctx.trace('exec', height=block.height, slot=slot, txs=len(prepared.txs), cars=len(block.cars),
                  positions=list(self.cursor),
                  duplicates=[d.hex() for d in block.duplicates], failed=sum(1 for r in receipts if not r.ok),
                  rejected=len(prepared.rejected), commitment=commitment.hex(), **occ,
                  balance=str(final.total_balance()), lag=max((r.delay for r in newly), default=None),
                  executed=[r.tx_digest.hex() for r in receipts])
        if self.indexer is not None:
            self.indexer.maybe_schedule(final)
        self.store.demote_cold(block.height)

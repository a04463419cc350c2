# services/network_service.py
"""Discrete-event network.

Virtual time only moves here. Events are processed in (time, sequence)
order, where the sequence number is assigned when the event is scheduled,
so a run is a pure function of its configuration, workload and seed.

Messages between distinct replicas take a delay drawn from the pre-GST model
before gst_ms and from the post-GST model afterwards. A message sent before
GST still arrives no later than gst_ms plus the post-GST bound. Messages a
replica sends to itself arrive immediately.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger

from config import PRE_GST_DELAY_FACTOR
from exceptions import InvariantViolation, ScenarioError, TipcutError
from models import Behavior, DelayModel, Envelope, NetConfig, Toggles
from services.crypto_service import KeyRegistry
from services.metrics_service import summarize
from services.replica import Replica, ReplicaContext

INCLUSION_SLOTS = 3


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

class Tracer:
    """Line-delimited JSON trace; the digest covers the exact bytes written"""

    def __init__(self, records=None):
        self.records = list(records or [])

    def record(self, at_ms: float, replica: Optional[int], kind: str, fields: dict):
        rec = {'t': at_ms, 'replica': replica, 'kind': kind}
        rec.update(fields)
        self.records.append(rec)

    def lines(self):
        for rec in self.records:
            yield json.dumps(rec, sort_keys=True, separators=(',', ':'))

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b'\n')
        return h.hexdigest()

    def write(self, path):
        with open(path, 'w') as fh:
            for line in self.lines():
                fh.write(line + '\n')

    @classmethod
    def load(cls, path) -> 'Tracer':
        with open(path) as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def of_kind(self, kind):
        return [rec for rec in self.records if rec['kind'] == kind]


# ---------------------------------------------------------------------------
# In-run invariant monitors
# ---------------------------------------------------------------------------

class Monitors:
    """Checks safety properties as trace events stream past"""

    def __init__(self, config: NetConfig, genesis_balance: int, bound_ms: float):
        self.config = config
        self.faulty = set(config.faulty())
        self.genesis_balance = genesis_balance
        self.bound_ms = bound_ms
        self.committed = {}  # slot -> cut digest
        self.commitments = {}  # height -> commitment
        self.cursors = {}  # replica -> last linearized positions
        self.committed_pos = [-1] * config.n
        self.pending_tips = {lane: [] for lane in range(config.n)}  # lane -> [pos, certified_ms, slots]
        self.counted_slots = set()
        self.slot_positions = {}  # slot -> committed positions
        self.inclusion_slots = set()

    def observe(self, at_ms, replica, kind, fields):
        if kind == 'commit':
            self._on_commit(at_ms, fields)
        elif kind == 'exec':
            self._on_exec(at_ms, replica, fields)
        elif kind == 'poa':
            lane = fields['lane']
            if lane not in self.faulty and at_ms >= self.config.gst_ms:
                self.pending_tips[lane].append([fields['pos'], at_ms, 0])

    def _fail(self, message, at_ms):
        raise InvariantViolation(message, self.config.seed, at_ms)

    def _on_commit(self, at_ms, fields):
        slot, cut = fields['slot'], fields['cut']
        known = self.committed.setdefault(slot, cut)
        if known != cut:
            self._fail(f"conflicting commits in slot {slot}: {known[:12]} and {cut[:12]}", at_ms)
        if slot not in self.counted_slots:
            self.counted_slots.add(slot)
            for lane, pos in enumerate(fields['positions']):
                self.committed_pos[lane] = max(self.committed_pos[lane], pos)
            self._check_growth(slot, fields['positions'], at_ms)
        proposal_ms = fields.get('proposal_ms')
        if proposal_ms is None or slot in self.inclusion_slots:
            return
        self.inclusion_slots.add(slot)
        counts = fields['leader'] not in self.faulty and fields.get('fresh', True)
        for lane, pending in self.pending_tips.items():
            keep = []
            for entry in pending:
                pos, certified_ms, slots = entry
                if pos <= self.committed_pos[lane]:
                    continue
                if counts and proposal_ms >= certified_ms + self.bound_ms:
                    entry[2] = slots + 1
                    if entry[2] >= INCLUSION_SLOTS:
                        self._fail(f"certified car lane {lane} pos {pos} missing after {entry[2]} correct-leader slots",
                                   at_ms)
                keep.append(entry)
            self.pending_tips[lane] = keep

    def _check_growth(self, slot, positions, at_ms):
        self.slot_positions[slot] = positions
        for before, after in ((slot - 1, slot), (slot, slot + 1)):
            low, high = self.slot_positions.get(before), self.slot_positions.get(after)
            if low is None or high is None:
                continue
            for lane, (a, b) in enumerate(zip(low, high)):
                if b < a:
                    self._fail(f"lane {lane} committed pos fell from {a} in slot {before} to {b} in slot {after}",
                               at_ms)

    def _on_exec(self, at_ms, replica, fields):
        height = fields['height']
        known = self.commitments.setdefault(height, fields['commitment'])
        if known != fields['commitment']:
            self._fail(f"replica {replica} commitment at height {height} differs from {known[:12]}", at_ms)
        if int(fields['balance']) != self.genesis_balance:
            self._fail(f"replica {replica} balance total {fields['balance']} at height {height} is not conserved",
                       at_ms)
        positions = fields['positions']
        previous = self.cursors.get(replica)
        if previous is not None and any(p < q for p, q in zip(positions, previous)):
            self._fail(f"replica {replica} lane positions moved backwards at height {height}", at_ms)
        self.cursors[replica] = positions


def audit_isolation(replicas, depth=4):
    """Fail when any replica can reach another Replica through its attributes"""
    for replica in replicas:
        seen = {id(replica)}
        frontier = [replica.__dict__]
        for _ in range(depth):
            nxt = []
            for obj in frontier:
                if isinstance(obj, (bytes, str, int, float, bool, type(None))):
                    continue
                if id(obj) in seen:
                    continue
                seen.add(id(obj))
                if isinstance(obj, Replica):
                    raise InvariantViolation(f"replica {replica.id} holds a reference to replica {obj.id}")
                if isinstance(obj, dict):
                    nxt.extend(obj.values())
                elif isinstance(obj, (list, tuple, set, frozenset)):
                    nxt.extend(obj)
                elif hasattr(obj, '__dict__'):
                    nxt.append(obj.__dict__)
            frontier = nxt
    return True


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------

def _sample(rng, model: DelayModel) -> float:
    if model.kind == 'fixed':
        return float(model.min_ms)
    if model.kind == 'uniform':
        return float(rng.uniform(model.min_ms, model.max_ms))
    raise ScenarioError(f"unknown delay model {model.kind!r}")


@dataclass
class RunResult:
    config: NetConfig
    trace: Tracer
    metrics: dict
    replicas: list
    violation: Optional[InvariantViolation] = None
    end_ms: float = 0.0
    envelopes: int = 0
    toggles: Toggles = field(default_factory=Toggles)

    @property
    def ok(self):
        return self.violation is None

    def correct(self):
        faulty = set(self.config.faulty())
        return [r for r in self.replicas if r.id not in faulty]

    def close(self):
        for replica in self.replicas:
            replica.close()


class Network:
    def __init__(self, config: NetConfig, replicas, genesis_balance: int = 0):
        self.config = config
        self.replicas = {r.id: r for r in replicas}
        self.rng = np.random.default_rng(config.seed)
        self.pre_gst = config.pre_gst_delay or DelayModel(
            'uniform', config.delay.min_ms, config.delay.bound_ms * PRE_GST_DELAY_FACTOR)
        self.queue = []
        self.seq = 0
        self.now = 0.0
        self.envelopes = 0
        self.tracer = Tracer()
        self.monitors = Monitors(config, genesis_balance, config.delay.bound_ms)

    def _push(self, at_ms, kind, replica, item):
        heapq.heappush(self.queue, (at_ms, self.seq, kind, replica, item))
        self.seq += 1

    def delay(self, src, dst, send_ms) -> float:
        if src == dst:
            return 0.0
        if send_ms < self.config.gst_ms:
            d = _sample(self.rng, self.pre_gst)
            return min(d, self.config.gst_ms + self.config.delay.bound_ms - send_ms)
        return _sample(self.rng, self.config.delay)

    def _dispatch(self, replica: Replica, handler):
        ctx = ReplicaContext(replica.id, self.config.n, self.now)
        try:
            handler(ctx)
        finally:
            self._drain(replica, ctx)

    def _drain(self, replica, ctx: ReplicaContext):
        for kind, fields in ctx.events:
            self.tracer.record(self.now, replica.id, kind, fields)
            self.monitors.observe(self.now, replica.id, kind, fields)
        for at_ms, token in ctx.timers:
            self._push(at_ms, 'timer', replica.id, token)
        for dst, payload in ctx.outbox:
            deliver_ms = self.now + self.delay(replica.id, dst, self.now)
            env = Envelope(self.envelopes, replica.id, dst, type(payload).__name__, payload, self.now, deliver_ms)
            self.envelopes += 1
            self._push(deliver_ms, 'deliver', dst, env)

    def run(self, workload=None, duration_ms: float = 10_000.0) -> Optional[InvariantViolation]:
        for spec in self.config.faults:
            if spec.behavior == Behavior.CRASH:
                self._push(spec.at_ms, 'crash', spec.replica, None)
        if workload is not None:
            for sub in workload.submissions:
                if sub.at_ms <= duration_ms:
                    self._push(sub.at_ms, 'submit', sub.lane, sub.raw)
        for replica in self.replicas.values():
            self._dispatch(replica, replica.start)

        try:
            while self.queue:
                at_ms, _, kind, target, item = heapq.heappop(self.queue)
                if at_ms > duration_ms:
                    break
                self.now = at_ms
                replica = self.replicas[target]
                if replica.crashed:
                    continue
                if kind == 'deliver':
                    self._dispatch(replica, lambda ctx, e=item: replica.on_message(ctx, e.src, e.payload, e.send_ms))
                elif kind == 'timer':
                    self._dispatch(replica, lambda ctx, t=item: replica.on_timer(ctx, t))
                elif kind == 'submit':
                    self._dispatch(replica, lambda ctx, raw=item: replica.submit(ctx, raw))
                elif kind == 'crash':
                    replica.crashed = True
                    self.tracer.record(self.now, target, 'crash', {})
                    logger.info(f"Replica {target} crashed at {self.now:.0f} ms")
        except InvariantViolation as e:
            return self._violation(e)
        except (ScenarioError, KeyboardInterrupt):
            raise
        except TipcutError as e:
            return self._violation(InvariantViolation(f"{type(e).__name__}: {e}", self.config.seed, self.now))
        self.now = min(self.now, duration_ms)
        return None

    def _violation(self, e: InvariantViolation):
        if e.seed is None:
            e.seed = self.config.seed
        if e.at_ms is None:
            e.at_ms = self.now
        self.tracer.record(self.now, None, 'violation', {'message': str(e)})
        logger.error(f"Invariant violation at {self.now:.1f} ms (seed {e.seed}): {e}")
        return e


def validate_config(config: NetConfig):
    if config.f < 0 or config.n != 3 * config.f + 1:
        raise ScenarioError(f"n must equal 3f+1, got n={config.n} f={config.f}")
    faulty = config.faulty()
    if len(faulty) > config.f and not config.allow_excess_faults:
        raise ScenarioError(f"{len(faulty)} faulty replicas {faulty} exceed f={config.f}")
    for spec in config.faults:
        if not 0 <= spec.replica < config.n:
            raise ScenarioError(f"fault names unknown replica {spec.replica}")
    if config.stakes and len(config.stakes) != config.n:
        raise ScenarioError(f"{len(config.stakes)} stakes for {config.n} replicas")


def build_replicas(config: NetConfig, genesis, toggles: Toggles = Toggles()):
    registry = KeyRegistry(config.n, config.seed)
    return [Replica(r, config, registry, genesis, toggles, config.faults) for r in range(config.n)]


def run(config: NetConfig, replicas, workload=None, duration_ms: float = 10_000.0,
        toggles: Toggles = Toggles(), genesis_balance: Optional[int] = None) -> RunResult:
    """Simulate until duration_ms (or the first invariant violation) and summarize the trace"""
    validate_config(config)
    if genesis_balance is None:
        genesis_balance = replicas[0].world.total_balance() if replicas else 0
    net = Network(config, replicas, genesis_balance)
    violation = net.run(workload, duration_ms)
    if violation is None:
        try:
            audit_isolation(replicas)
        except InvariantViolation as e:
            violation = net._violation(e)
    for replica in replicas:
        replica.store.flush()
    metrics = summarize(net.tracer.records, config, toggles, duration_ms)
    metrics['trace_digest'] = net.tracer.digest()
    metrics['envelopes'] = net.envelopes
    metrics['violation'] = str(violation) if violation is not None else None
    logger.info(f"Run seed={config.seed} finished at {net.now:.0f} ms: {metrics['committed_cuts']} cuts, "
                f"{metrics['view_changes']} view changes, halted={metrics['halted']}")
    return RunResult(config, net.tracer, metrics, list(replicas), violation, net.now, net.envelopes, toggles)

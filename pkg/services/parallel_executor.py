# services/parallel_executor.py
"""Optimistic parallel block execution.

Workers execute transactions speculatively against a versioned view of the
pre-block state plus the writes committed so far. A single committer walks
the block in index order. It validates each executed slot against the
commits that landed after that slot's incarnation began, then commits it or
sends it back for re-execution. Results are identical to
exec_block_sequential.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from loguru import logger

from config import RETRY_BUDGET
from services.codec_service import tx_digest
from services.execution_service import WorldState, exec_block_sequential, run_transaction


class SlotStatus(str, Enum):
    PENDING = 'pending'
    EXECUTING = 'executing'
    EXECUTED = 'executed'
    COMMITTED = 'committed'


@dataclass
class TxSlot:
    index: int
    tx: object
    digest: bytes
    incarnation: int = 0
    status: SlotStatus = SlotStatus.PENDING
    began_at: int = 0  # committed-prefix length when this incarnation started
    receipt: object = None

    @property
    def buffered_writes(self):
        return self.receipt.writes if self.receipt is not None else {}


class VersionedView:
    """Base state plus index-ordered committed writes.

    Commits happen strictly in index order, so every committed write comes from
    a writer below any executing slot.
    """

    def __init__(self, base: WorldState):
        self.base = base
        self.committed_writes = {}  # Location -> (value, writer index)
        self.last_writer = {}
        self.committed_count = 0
        self._lock = threading.Lock()

    def reader(self, index: int) -> Callable:
        def read(loc):
            with self._lock:
                entry = self.committed_writes.get(loc)
            if entry is not None and entry[1] < index:
                return entry[0]
            return self.base.get(loc)
        return read

    def snapshot_count(self):
        with self._lock:
            return self.committed_count

    def commit(self, slot: TxSlot):
        with self._lock:
            for loc, value in slot.receipt.writes.items():
                self.committed_writes[loc] = (value, slot.index)
                self.last_writer[loc] = slot.index
            self.committed_count = slot.index + 1

    def project(self) -> WorldState:
        """Base state with every committed write applied"""
        with self._lock:
            writes = {loc: value for loc, (value, _) in self.committed_writes.items()}
        return self.base.with_writes(writes)


def validate(slot: TxSlot, view: VersionedView) -> bool:
    """False (conflict) when a commit that landed after slot.began_at touched R_i or W_i"""
    receipt = slot.receipt
    for loc in receipt.reads:
        if view.last_writer.get(loc, -1) >= slot.began_at:
            return False
    for loc in receipt.writes:
        if view.last_writer.get(loc, -1) >= slot.began_at:
            return False
    return True


def dependency_edges(receipts) -> set:
    """Pairs (j, i) with j > i and W_i intersecting R_j or W_j"""
    edges = set()
    writers = {}
    for j, receipt in enumerate(receipts):
        touched = set(receipt.reads) | set(receipt.writes)
        for loc in touched:
            for i in writers.get(loc, ()):
                edges.add((j, i))
        for loc in receipt.writes:
            writers.setdefault(loc, []).append(j)
    return edges


@dataclass
class ExecutionStats:
    executions: int = 0
    aborts: int = 0
    fallback: bool = False
    wall_time_s: float = 0.0
    max_incarnation: int = 0

    def to_dict(self):
        return {
            'executions': self.executions,
            'aborts': self.aborts,
            'fallbacks': int(self.fallback),
            'max_incarnation': self.max_incarnation,
            'wall_time_s': round(self.wall_time_s, 6),
        }

    def counters(self):
        """Everything but wall time; these repeat exactly for a given seed"""
        counts = self.to_dict()
        del counts['wall_time_s']
        return counts


class _FallbackRequired(Exception):
    pass


class DeterministicScheduler:
    """Single-threaded interleaving of execute and commit steps drawn from a seed.

    eager=True executes every pending slot before any commit is attempted,
    which forces validation of slots whose dependencies had not committed
    when they ran.
    """

    def __init__(self, seed: int, eager=False, commit_bias=0.3):
        self.rng = np.random.default_rng(seed)
        self.eager = eager
        self.commit_bias = commit_bias

    def pick(self, ready, commit_possible):
        """Return ('commit', None) or ('execute', slot)"""
        if not ready:
            return ('commit', None)
        if commit_possible and not self.eager and self.rng.random() < self.commit_bias:
            return ('commit', None)
        return ('execute', ready[int(self.rng.integers(len(ready)))])


class ParallelExecutor:
    """Optimistic block executor.

    With a scheduler, workers are simulated in one thread in a seeded order,
    which is what replicas use so a seed replays the same trace. Without one
    and workers > 1, attempts run on a real thread pool.
    """

    def __init__(self, workers: int = 1, retry_budget: int = RETRY_BUDGET,
                 scheduler: Optional[DeterministicScheduler] = None, commit_observer=None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.retry_budget = retry_budget
        self.scheduler = scheduler
        self.commit_observer = commit_observer
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix='occ') if workers > 1 and scheduler is None else None

    def shutdown(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)

    def execute(self, state: WorldState, txs, height=None):
        started = time.perf_counter()
        stats = ExecutionStats()
        slots = [TxSlot(i, tx, tx_digest(tx)) for i, tx in enumerate(txs)]
        self._block_size = len(slots)
        view = VersionedView(state)
        try:
            if self.scheduler is not None:
                self._run_deterministic(slots, view, stats)
            else:
                self._run_pooled(slots, view, stats)
            final = view.project()
            receipts = [s.receipt for s in slots]
        except _FallbackRequired:
            logger.warning(f"OCC gave up after {stats.aborts} aborts on {len(slots)} txs, re-running sequentially")
            stats.fallback = True
            final, receipts = exec_block_sequential(state, txs)
        if height is not None:
            final.height = height
        else:
            final.height = state.height
        stats.wall_time_s = time.perf_counter() - started
        return final, receipts, stats

    def _run_incarnation(self, slot: TxSlot, view: VersionedView, stats: ExecutionStats):
        slot.status = SlotStatus.EXECUTING
        slot.incarnation += 1
        slot.began_at = view.snapshot_count()
        slot.receipt = run_transaction(view.reader(slot.index), slot.tx, slot.digest)
        slot.status = SlotStatus.EXECUTED
        return slot

    def _try_commit(self, slot: TxSlot, view: VersionedView, stats: ExecutionStats) -> bool:
        if validate(slot, view):
            view.commit(slot)
            slot.status = SlotStatus.COMMITTED
            if self.commit_observer is not None:
                self.commit_observer(slot.index, view.project())
            return True
        stats.aborts += 1
        slot.status = SlotStatus.PENDING
        if slot.incarnation >= self.retry_budget or stats.aborts > self.retry_budget * self._block_size:
            raise _FallbackRequired()
        return False

    def _run_pooled(self, slots, view, stats):
        def run(slot):
            return self._run_incarnation(slot, view, stats)

        if self._pool is None:
            futures = None
        else:
            futures = {slot.index: self._pool.submit(run, slot) for slot in slots}
        for slot in slots:
            if futures is None:
                run(slot)
            else:
                futures[slot.index].result()
            stats.executions += 1
            while not self._try_commit(slot, view, stats):
                # every predecessor has committed, so this incarnation validates
                run(slot)
                stats.executions += 1
            stats.max_incarnation = max(stats.max_incarnation, slot.incarnation)

    def _run_deterministic(self, slots, view, stats):
        next_commit = 0
        while next_commit < len(slots):
            ready = [s for s in slots[next_commit:] if s.status == SlotStatus.PENDING]
            head = slots[next_commit]
            commit_possible = head.status == SlotStatus.EXECUTED
            action, slot = self.scheduler.pick(ready, commit_possible)
            if action == 'execute':
                self._run_incarnation(slot, view, stats)
                stats.executions += 1
                continue
            if not commit_possible:
                self._run_incarnation(head, view, stats)
                stats.executions += 1
                continue
            if self._try_commit(head, view, stats):
                stats.max_incarnation = max(stats.max_incarnation, head.incarnation)
                next_commit += 1


def exec_block_parallel(state: WorldState, txs, workers: int = 1, retry_budget: int = RETRY_BUDGET,
                        scheduler: Optional[DeterministicScheduler] = None, height=None):
    executor = ParallelExecutor(workers, retry_budget, scheduler)
    try:
        return executor.execute(state, list(txs), height)
    finally:
        executor.shutdown()

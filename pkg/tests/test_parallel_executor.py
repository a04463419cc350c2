import numpy as np
import pytest

from models import Location, Receipt, TxStatus
from services.execution_service import exec_block_sequential
from services.parallel_executor import (DeterministicScheduler, ParallelExecutor, dependency_edges,
                                        exec_block_parallel)
from services.workload_service import random_block


@pytest.mark.parametrize('seed', range(6))
@pytest.mark.parametrize('conflict', [0.0, 0.5, 1.0])
@pytest.mark.parametrize('workers', [1, 4])
def test_parallel_matches_sequential(genesis, seed, conflict, workers):
    rng = np.random.default_rng(seed)
    for _ in range(4):
        block = random_block(rng, genesis.clients, int(rng.integers(1, 60)), conflict)
        expected, expected_receipts = exec_block_sequential(genesis.state, block, 1)
        final, receipts, stats = exec_block_parallel(genesis.state, block, workers=workers, height=1)
        assert final.commitment == expected.commitment
        assert final == expected
        assert receipts == expected_receipts
        assert stats.executions >= len(block)


@pytest.mark.parametrize('seed', range(10))
def test_deterministic_schedules_match_sequential(genesis, seed):
    rng = np.random.default_rng(100 + seed)
    block = random_block(rng, genesis.clients, int(rng.integers(1, 80)), float(rng.random()))
    expected, expected_receipts = exec_block_sequential(genesis.state, block, 3)
    for eager in (False, True):
        scheduler = DeterministicScheduler(seed, eager=eager)
        final, receipts, _ = exec_block_parallel(genesis.state, block, scheduler=scheduler, height=3)
        assert final == expected
        assert receipts == expected_receipts


def test_eager_schedule_forces_aborts_on_shared_counter(genesis):
    rng = np.random.default_rng(3)
    block = random_block(rng, genesis.clients, 10, conflict=1.0)
    final, _, stats = exec_block_parallel(genesis.state, block, scheduler=DeterministicScheduler(1, eager=True))
    expected, _ = exec_block_sequential(genesis.state, block)
    assert stats.aborts > 0
    assert not stats.fallback
    assert final == expected


def test_zero_retry_budget_falls_back_to_sequential(genesis):
    rng = np.random.default_rng(4)
    block = random_block(rng, genesis.clients, 12, conflict=1.0)
    final, receipts, stats = exec_block_parallel(genesis.state, block, retry_budget=0,
                                                 scheduler=DeterministicScheduler(2, eager=True))
    expected, expected_receipts = exec_block_sequential(genesis.state, block)
    assert stats.fallback
    assert final == expected
    assert receipts == expected_receipts


def test_empty_block(genesis):
    final, receipts, stats = exec_block_parallel(genesis.state, [], workers=2, height=5)
    assert receipts == []
    assert final.height == 5
    assert final.commitment == genesis.state.commitment
    assert stats.aborts == 0


def test_commit_observer_sees_sequential_prefixes(genesis):
    rng = np.random.default_rng(8)
    block = random_block(rng, genesis.clients, 15, conflict=0.5)
    seen = []
    executor = ParallelExecutor(1, scheduler=DeterministicScheduler(8),
                                commit_observer=lambda index, state: seen.append((index, state.commitment)))
    try:
        executor.execute(genesis.state, block)
    finally:
        executor.shutdown()
    assert [index for index, _ in seen] == list(range(len(block)))
    for index, commitment in seen:
        prefix, _ = exec_block_sequential(genesis.state, block[:index + 1])
        assert commitment == prefix.commitment


def test_dependency_edges():
    a, b = Location.balance(b'\x01' * 20), Location.balance(b'\x02' * 20)
    receipts = [
        Receipt(b'0', TxStatus.SUCCESS, reads=frozenset({a}), writes={a: 1}),
        Receipt(b'1', TxStatus.SUCCESS, reads=frozenset({b}), writes={b: 1}),
        Receipt(b'2', TxStatus.SUCCESS, reads=frozenset({a}), writes={}),
        Receipt(b'3', TxStatus.SUCCESS, reads=frozenset(), writes={b: 2}),
    ]
    assert dependency_edges(receipts) == {(2, 0), (3, 1)}


def test_rejects_zero_workers():
    with pytest.raises(ValueError):
        ParallelExecutor(0)

import numpy as np
import pytest

from exceptions import HeightGapError, StoreFailedError, WalCorruptionError
from models import Location, WalKind
from services.storage_service import FlatStore, dump_wal, scan_wal


def random_blocks(rng, count, keys=40):
    addresses = [rng.bytes(20) for _ in range(keys)]
    blocks = []
    for _ in range(count):
        writes = {}
        for _ in range(int(rng.integers(1, 6))):
            loc = Location.balance(addresses[int(rng.integers(keys))])
            writes[loc] = 0 if rng.random() < 0.15 else int(rng.integers(1, 1 << 48))
        blocks.append(writes)
    return blocks


@pytest.fixture
def filled():
    """A store with 30 blocks applied, plus the commitment after every height"""
    rng = np.random.default_rng(21)
    store = FlatStore()
    oracle = {}
    for height, writes in enumerate(random_blocks(rng, 30)):
        store.apply_block(height, writes)
        oracle[height] = store.commitment
    store.flush()
    yield store, oracle
    store.close()


def test_replay_rebuilds_identical_state(filled):
    store, oracle = filled
    replayed = FlatStore.replay(store.wal.contents())
    try:
        assert replayed.last_height == 29
        assert replayed.commitment == oracle[29]
        assert dict(replayed.items()) == dict(store.items())
        assert replayed.to_state().commitment == oracle[29]
    finally:
        replayed.close()


def test_store_commitment_matches_world_state(filled):
    store, _ = filled
    state = store.to_state()
    assert state.commitment == store.commitment


def test_height_rules(filled):
    store, _ = filled
    assert store.apply_block(10, {}) is False
    with pytest.raises(HeightGapError):
        store.apply_block(32, {})
    assert store.apply_block(30, {}) is True


def test_kill_at_random_offsets_recovers_a_block_boundary(filled):
    store, oracle = filled
    data = store.wal.contents()
    rng = np.random.default_rng(22)
    for cut in sorted(int(c) for c in rng.integers(0, len(data) + 1, size=150)):
        replayed = FlatStore.replay(data[:cut])
        try:
            if replayed.last_height < 0:
                assert replayed.commitment == bytes(32)
                continue
            assert replayed.commitment == oracle[replayed.last_height]
            complete = [r for r in scan_wal(data[:cut]).records if r.kind == WalKind.HEIGHT_MARKER]
            assert replayed.last_height == complete[-1].height
        finally:
            replayed.close()


def test_torn_tail_is_dropped_not_fatal(filled):
    store, oracle = filled
    data = store.wal.contents()
    scan = scan_wal(data[:-3])
    assert scan.torn_offset is not None
    replayed = FlatStore.replay(data[:-3])
    try:
        assert replayed.last_height == 28
        assert replayed.commitment == oracle[28]
    finally:
        replayed.close()


def test_bad_checksum_in_the_middle_is_corruption(filled):
    store, _ = filled
    data = bytearray(store.wal.contents())
    offsets = scan_wal(bytes(data)).offsets
    data[offsets[len(offsets) // 2] + 6] ^= 0xFF
    with pytest.raises(WalCorruptionError) as info:
        FlatStore.replay(bytes(data))
    assert info.value.offset == offsets[len(offsets) // 2]


def test_impossible_frame_length_is_corruption(filled):
    store, _ = filled
    data = bytearray(store.wal.contents())
    data[0] = 0xFF
    with pytest.raises(WalCorruptionError) as info:
        FlatStore.replay(bytes(data))
    assert info.value.offset == 0


def test_length_overrunning_the_log_from_the_middle_is_corruption(filled):
    store, _ = filled
    data = bytearray(store.wal.contents())
    offsets = scan_wal(bytes(data)).offsets
    middle = offsets[len(offsets) // 2]
    data[middle:middle + 4] = len(data).to_bytes(4, 'big')
    with pytest.raises(WalCorruptionError, match='bad frame length') as info:
        scan_wal(bytes(data))
    assert info.value.offset == middle


def test_replayed_store_keeps_appending(filled):
    store, oracle = filled
    replayed = FlatStore.replay(store.wal.contents())
    try:
        replayed.apply_block(30, {Location.balance(b'\x07' * 20): 5})
        replayed.flush()
        again = FlatStore.replay(replayed.wal.contents())
        assert again.last_height == 30
        assert again.commitment == replayed.commitment
        again.close()
    finally:
        replayed.close()


def test_file_backed_wal_truncates_torn_tail(tmp_path):
    path = tmp_path / 'store.wal'
    store = FlatStore(str(path))
    store.apply_block(0, {Location.balance(b'\x01' * 20): 100})
    store.apply_block(1, {Location.balance(b'\x02' * 20): 50})
    store.flush()
    store.close()
    whole = path.read_bytes()
    path.write_bytes(whole + b'\x00\x00\x00\x40partial')

    replayed = FlatStore.replay(path.read_bytes(), path=str(path))
    try:
        assert replayed.last_height == 1
        assert path.read_bytes() == whole
        replayed.apply_block(2, {})
        replayed.flush()
    finally:
        replayed.close()
    final = FlatStore.replay(path.read_bytes())
    assert final.last_height == 2
    final.close()


def test_cold_tier_demotion_keeps_values_readable():
    store = FlatStore(cold_after=3)
    try:
        hot_key, cold_key = Location.balance(b'\x01' * 20), Location.balance(b'\x02' * 20)
        store.apply_block(0, {cold_key: 9, hot_key: 1})
        for height in range(1, 5):
            store.apply_block(height, {hot_key: height + 1})
        assert store.demote_cold() == 1
        assert store.cold_count == 1
        assert store.get(cold_key) == 9
        assert store.cold_reads == 1
        store.apply_block(5, {cold_key: 10})
        assert store.cold_count == 0
        assert store.get(cold_key) == 10
    finally:
        store.close()


def test_io_failure_makes_store_read_only():
    store = FlatStore()
    try:
        store.apply_block(0, {})
        store.wal.error = OSError('disk full')
        with pytest.raises(StoreFailedError):
            store.apply_block(1, {})
        assert store.failed
    finally:
        store.wal.error = None
        store.close()


def test_dump_wal_groups_by_height(filled):
    store, _ = filled
    data = store.wal.contents()
    lines = dump_wal(data + b'\x00\x00')
    markers = [line for line in lines if line.startswith('== height')]
    assert len(markers) == 30
    assert lines[-1].startswith('torn-tail at offset')

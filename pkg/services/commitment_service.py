# services/commitment_service.py
"""Delayed state consensus.

The state commitment is an additive hash accumulator: the wrapping 256-bit
sum of digest(entry) over all flat-state entries. It is order independent and
each write updates it in O(1). Entry encoding is

    kind(1) | address(20) | [slot key(32)] | value(32, big-endian)

Membership proofs come from a sorted snapshot index whose Merkle root is
bound to the commitment and height by an anchor digest.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Optional

from loguru import logger
from sortedcontainers import SortedDict

from config import MAX_STATE_LAG
from exceptions import InvariantViolation
from models import (SYSTEM_TX_TYPE, WORD_LEN, Location, Signature, StateAttestation,
                    StateQuorumRecord, Transaction)
from services.crypto_service import KeyRegistry, digest, digest_parts, replica_address

MOD = 1 << 256


# ---------------------------------------------------------------------------
# Accumulator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateCommitment:
    value: bytes
    height: int

    @property
    def as_int(self):
        return int.from_bytes(self.value, 'big')


def encode_entry(loc: Location, value: int) -> bytes:
    return loc.encode() + value.to_bytes(WORD_LEN, 'big')


def entry_digest(loc: Location, value: int) -> int:
    return int.from_bytes(digest(encode_entry(loc, value)), 'big')


def update_commitment_value(c: int, old_entry=None, new_entry=None) -> int:
    if old_entry is not None:
        c = (c - entry_digest(*old_entry)) % MOD
    if new_entry is not None:
        c = (c + entry_digest(*new_entry)) % MOD
    return c


def commit_of_state(state) -> StateCommitment:
    """Full recompute over every entry; the audit path for incremental updates"""
    total = 0
    for loc, value in state.items():
        if value:
            total = (total + entry_digest(loc, value)) % MOD
    return StateCommitment(total.to_bytes(WORD_LEN, 'big'), state.height)


def update_commitment(c: StateCommitment, old_entry=None, new_entry=None) -> StateCommitment:
    value = update_commitment_value(c.as_int, old_entry, new_entry)
    return StateCommitment(value.to_bytes(WORD_LEN, 'big'), c.height)


# ---------------------------------------------------------------------------
# Attestations and tally
# ---------------------------------------------------------------------------

def attestation_message(height: int, commitment: bytes) -> bytes:
    return digest_parts(b'state-root', height.to_bytes(8, 'big'), commitment)


def attest(signer, height: int, commitment: bytes) -> StateAttestation:
    sig = signer.sign(attestation_message(height, commitment))
    return StateAttestation(height, commitment, sig.signer, sig)


def verify_attestation(registry: KeyRegistry, att: StateAttestation) -> bool:
    return att.sig.signer == att.signer and registry.verify(att.sig, attestation_message(att.height, att.commitment))


def attestation_tx(att: StateAttestation, chain_id: int) -> Transaction:
    """System transaction carrying an attestation through the attester's own lane"""
    payload = (att.height.to_bytes(8, 'big') + att.commitment + att.signer.to_bytes(4, 'big')
               + att.sig.tag)
    return Transaction(tx_type=SYSTEM_TX_TYPE, chain_id=chain_id, sender=replica_address(att.signer),
                       to=None, value=0, nonce=att.height, gas_limit=0, gas_price=0, input=payload)


def attestation_from_tx(tx: Transaction) -> Optional[StateAttestation]:
    data = tx.input
    if tx.tx_type != SYSTEM_TX_TYPE or len(data) != 8 + WORD_LEN + 4 + WORD_LEN:
        return None
    height = int.from_bytes(data[:8], 'big')
    commitment = data[8:8 + WORD_LEN]
    signer = int.from_bytes(data[8 + WORD_LEN:12 + WORD_LEN], 'big')
    tag = data[12 + WORD_LEN:]
    return StateAttestation(height, commitment, signer, Signature(signer, tag))


class TallyOutcome(str, Enum):
    COMMITTED = 'committed'
    PENDING = 'pending'
    HALTED = 'halted'


@dataclass
class TallyResult:
    outcome: TallyOutcome
    record: Optional[StateQuorumRecord] = None
    phi: Fraction = Fraction(0)
    duplicates: int = 0


def tally(attestations, stakes: dict, total_stake: int) -> TallyResult:
    """Tally attestations for one height.

    Committed when one commitment holds >= 2/3 of total stake; halted when the
    stake attesting any other commitment exceeds 1/3; pending otherwise.
    """
    first = {}
    duplicates = 0
    for att in attestations:
        if att.signer in first:
            duplicates += 1
            continue
        first[att.signer] = att
    if not first:
        return TallyResult(TallyOutcome.PENDING)

    groups = {}
    for att in first.values():
        groups.setdefault(att.commitment, []).append(att)
    weight = {c: sum(stakes.get(a.signer, 0) for a in group) for c, group in groups.items()}
    best = max(weight, key=lambda c: (weight[c], c))
    attested = sum(weight.values())
    phi = Fraction(attested - weight[best], total_stake)

    if 3 * weight[best] >= 2 * total_stake:
        group = sorted(groups[best], key=lambda a: a.signer)
        record = StateQuorumRecord(group[0].height, best, tuple(a.sig for a in group),
                                   Fraction(weight[best], total_stake))
        return TallyResult(TallyOutcome.COMMITTED, record, phi, duplicates)
    if 3 * (attested - weight[best]) > total_stake:
        return TallyResult(TallyOutcome.HALTED, None, phi, duplicates)
    return TallyResult(TallyOutcome.PENDING, None, phi, duplicates)


def encode_record(record: StateQuorumRecord, n: int) -> bytes:
    """height(8) | commitment(32) | bitmap_len(2) | signer bitmap | tags (ascending signer)"""
    bitmap = 0
    for s in record.signers:
        bitmap |= 1 << s
    width = (n + 7) // 8
    tags = b''.join(sig.tag for sig in sorted(record.attestations, key=lambda s: s.signer))
    return (record.height.to_bytes(8, 'big') + record.commitment + width.to_bytes(2, 'big')
            + bitmap.to_bytes(width, 'little') + tags)


def verify_record(registry: KeyRegistry, record: StateQuorumRecord, stakes: dict, total_stake: int) -> bool:
    msg = attestation_message(record.height, record.commitment)
    seen = set()
    for sig in record.attestations:
        if sig.signer in seen or not registry.verify(sig, msg):
            return False
        seen.add(sig.signer)
    return 3 * sum(stakes.get(s, 0) for s in seen) >= 2 * total_stake


class StateConsensus:
    """Per-replica bookkeeping for the delayed state-root pipeline"""

    def __init__(self, registry: KeyRegistry, stakes: dict, max_lag=MAX_STATE_LAG):
        self.registry = registry
        self.stakes = stakes
        self.total_stake = sum(stakes.values())
        self.max_lag = max_lag
        self._pending = {}
        self._quorate = {}
        self.committed = {}
        self.executed = {}
        self.halted_at = None
        self.phi = Fraction(0)
        self.duplicates = 0
        self.rejected = 0
        self.max_lag_seen = 0

    @property
    def halted(self):
        return self.halted_at is not None

    def note_executed(self, height, commitment):
        self.executed[height] = commitment

    def observe(self, att: StateAttestation) -> TallyOutcome:
        if att.height in self.committed or att.height in self._quorate:
            return TallyOutcome.COMMITTED
        if not verify_attestation(self.registry, att):
            self.rejected += 1
            return TallyOutcome.PENDING
        bucket = self._pending.setdefault(att.height, [])
        if any(a.signer == att.signer for a in bucket):
            self.duplicates += 1
            return TallyOutcome.PENDING
        bucket.append(att)
        result = tally(bucket, self.stakes, self.total_stake)
        if result.outcome == TallyOutcome.COMMITTED:
            self._quorate[att.height] = result.record
            del self._pending[att.height]
        elif result.outcome == TallyOutcome.HALTED and self.halted_at is None:
            self.halted_at = att.height
            self.phi = result.phi
            logger.warning(f"State consensus halted at height {att.height}: phi={result.phi}")
        return result.outcome

    def ready_records(self):
        """Quorate records not yet committed through a cut, oldest first"""
        return tuple(self._quorate[h] for h in sorted(self._quorate) if h not in self.committed)

    def verify_record(self, record: StateQuorumRecord) -> bool:
        return verify_record(self.registry, record, self.stakes, self.total_stake)

    def embed_in_cut(self, block_height):
        """Records to attach to the cut that will produce block_height"""
        records = self.ready_records()
        for record in records:
            if block_height - record.height >= self.max_lag:
                raise InvariantViolation(
                    f"state root for height {record.height} would commit at lag {block_height - record.height}")
        return records

    def on_cut_committed(self, records, slot: int, block_height: int):
        newly = []
        for record in records:
            if record.height in self.committed:
                continue
            delay = block_height - record.height
            if delay >= self.max_lag:
                raise InvariantViolation(f"state lag {delay} for height {record.height} reached {self.max_lag}")
            done = replace(record, committed_at=slot, delay=delay)
            self.committed[record.height] = done
            self._quorate.pop(record.height, None)
            self._pending.pop(record.height, None)
            self.max_lag_seen = max(self.max_lag_seen, delay)
            newly.append(done)
        return newly

    def check_stall(self, current_height):
        if self.halted:
            return
        for height in self.executed:
            if height not in self.committed and current_height - height >= self.max_lag:
                raise InvariantViolation(f"no state quorum for height {height} after {current_height - height} blocks")

    def diverged(self, height):
        """True when this replica's own commitment differs from the committed one"""
        record = self.committed.get(height)
        mine = self.executed.get(height)
        return record is not None and mine is not None and mine != record.commitment


# ---------------------------------------------------------------------------
# Snapshot index and batch membership proofs
# ---------------------------------------------------------------------------

EMPTY_ROOT = digest(b'tipcut-empty-index')


def _leaf_hash(key: bytes, value: int) -> bytes:
    return digest(b'\x00' + key + value.to_bytes(WORD_LEN, 'big'))


def _node_hash(left: bytes, right: bytes) -> bytes:
    return digest(b'\x01' + left + right)


def _build_levels(leaves):
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        nxt = [_node_hash(prev[i], prev[i + 1]) for i in range(0, len(prev) - 1, 2)]
        if len(prev) % 2:
            nxt.append(prev[-1])
        levels.append(nxt)
    return levels


def _path(levels, index):
    path = []
    for level in levels[:-1]:
        sibling = index ^ 1
        if sibling < len(level):
            path.append(level[sibling])
        index //= 2
    return tuple(path)


def _root_from_path(leaf, index, leaf_count, path):
    node, size, i = leaf, leaf_count, 0
    while size > 1:
        sibling = index ^ 1
        if sibling < size:
            if i >= len(path):
                return None
            node = _node_hash(path[i], node) if index & 1 else _node_hash(node, path[i])
            i += 1
        index //= 2
        size = (size + 1) // 2
    return node if i == len(path) else None


def anchor_digest(height, commitment, index_root, leaf_count) -> bytes:
    return digest_parts(b'anchor', height.to_bytes(8, 'big'), commitment, index_root,
                        leaf_count.to_bytes(8, 'big'))


class SnapshotIndex:
    """Sorted (encoded location -> value) view of the state at one height"""

    def __init__(self, state, commitment: bytes = None):
        self.height = state.height
        self.commitment = commitment if commitment is not None else commit_of_state(state).value
        self.entries = SortedDict({loc.encode(): value for loc, value in state.items() if value})
        self._levels = _build_levels([_leaf_hash(k, v) for k, v in self.entries.items()])
        self.root = self._levels[-1][0] if self.entries else EMPTY_ROOT

    def __len__(self):
        return len(self.entries)

    @property
    def anchor(self):
        return anchor_digest(self.height, self.commitment, self.root, len(self))

    def leaf(self, index):
        key, value = self.entries.peekitem(index)
        return LeafProof(index, key, value, _path(self._levels, index))


@dataclass(frozen=True)
class LeafProof:
    index: int
    key: bytes
    value: int
    path: tuple


@dataclass(frozen=True)
class ProofItem:
    key: bytes
    present: bool
    leaves: tuple  # one leaf when present; the adjacent neighbours otherwise


@dataclass(frozen=True)
class BatchProof:
    height: int
    commitment: bytes
    index_root: bytes
    leaf_count: int
    items: tuple

    def value_of(self, loc: Location):
        for item in self.items:
            if item.key == loc.encode():
                return item.leaves[0].value if item.present else None
        raise KeyError(str(loc))


def prove_membership(index: SnapshotIndex, keys) -> BatchProof:
    items = []
    for loc in keys:
        key = loc.encode() if isinstance(loc, Location) else loc
        pos = index.entries.bisect_left(key)
        if key in index.entries:
            items.append(ProofItem(key, True, (index.leaf(pos),)))
            continue
        neighbours = []
        if pos > 0:
            neighbours.append(index.leaf(pos - 1))
        if pos < len(index):
            neighbours.append(index.leaf(pos))
        items.append(ProofItem(key, False, tuple(neighbours)))
    return BatchProof(index.height, index.commitment, index.root, len(index), tuple(items))


def verify_membership(anchor: bytes, proof: BatchProof) -> bool:
    if anchor_digest(proof.height, proof.commitment, proof.index_root, proof.leaf_count) != anchor:
        return False

    def leaf_ok(leaf: LeafProof):
        if not 0 <= leaf.index < proof.leaf_count:
            return False
        root = _root_from_path(_leaf_hash(leaf.key, leaf.value), leaf.index, proof.leaf_count, leaf.path)
        return root == proof.index_root

    for item in proof.items:
        if item.present:
            if len(item.leaves) != 1 or item.leaves[0].key != item.key or not leaf_ok(item.leaves[0]):
                return False
            continue
        if proof.leaf_count == 0:
            if item.leaves or proof.index_root != EMPTY_ROOT:
                return False
            continue
        if not all(leaf_ok(leaf) for leaf in item.leaves):
            return False
        if len(item.leaves) == 2:
            left, right = item.leaves
            if not (right.index == left.index + 1 and left.key < item.key < right.key):
                return False
        elif len(item.leaves) == 1:
            edge = item.leaves[0]
            below_first = edge.index == 0 and item.key < edge.key
            above_last = edge.index == proof.leaf_count - 1 and edge.key < item.key
            if not (below_first or above_last):
                return False
        else:
            return False
    return True


class SnapshotIndexer:
    """Builds snapshot indexes on a background thread; never blocks the caller"""

    def __init__(self, interval: int):
        self.interval = interval
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix='snapshot-index')
        self._lock = threading.Lock()
        self._futures = {}

    def maybe_schedule(self, state):
        if not self.interval or state.height % self.interval:
            return None
        snapshot = state.copy()
        future = self._pool.submit(SnapshotIndex, snapshot)
        with self._lock:
            self._futures[state.height] = future
        logger.debug(f"Scheduled snapshot index for height {state.height}")
        return future

    def index_for(self, height, timeout=None) -> Optional[SnapshotIndex]:
        with self._lock:
            future = self._futures.get(height)
        return future.result(timeout=timeout) if future else None

    def heights(self):
        with self._lock:
            return sorted(self._futures)

    def shutdown(self):
        self._pool.shutdown(wait=True)

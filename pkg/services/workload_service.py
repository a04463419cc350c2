# services/workload_service.py
"""Synthetic client traffic.

Each client account is pinned to one lane (client i submits to replica
i mod n) so its nonces reach consensus in order. A configurable fraction of
transactions is also resubmitted to a second lane to exercise deduplication.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from loguru import logger

from config import DUPLICATE_DELAY_MS, DUPLICATE_FRACTION
from models import Transaction
from services.codec_service import encode_transaction, signing_digest
from services.execution_service import SLoadAdd, SStore, TransferOp, encode_program

TX_KINDS = ('transfer', 'store', 'counter', 'create')
DEFAULT_MIX = {'transfer': 0.6, 'store': 0.2, 'counter': 0.15, 'create': 0.05}
COUNTER_ADDRESS = bytes.fromhex('c0' * 20)


@dataclass
class Submission:
    at_ms: float
    lane: int
    raw: bytes
    duplicate: bool = False


@dataclass
class Workload:
    submissions: list = field(default_factory=list)

    def __len__(self):
        return len(self.submissions)

    def duplicates(self):
        return [s for s in self.submissions if s.duplicate]


def _signed(key, tx: Transaction) -> Transaction:
    return replace(tx, signature=key.sign_digest(signing_digest(tx)))


def make_tx(rng, kind: str, key, nonce: int, chain_id: int, peers) -> Transaction:
    """One client transaction of the given kind, signed by key"""
    to = peers[int(rng.integers(len(peers)))]
    value = int(rng.integers(1, 100))
    program = b''
    if kind == 'store':
        slot = int(rng.integers(16)).to_bytes(32, 'big')
        program = encode_program([SStore(slot, int(rng.integers(1, 1 << 32)))])
    elif kind == 'counter':
        slot = bytes(32)
        to = COUNTER_ADDRESS
        value = 0
        program = encode_program([SLoadAdd(slot, 1, slot)])
    elif kind == 'create':
        to = None
        program = encode_program([SStore(bytes(32), nonce + 1), TransferOp(peers[0], 1)])
    tx = Transaction(2, chain_id, key.address, to, value, nonce, 21000, 1, input=program)
    return _signed(key, tx)


def generate(genesis, n: int, seed: int, duration_ms: float, rate_per_lane: float, mix=None,
             duplicate_fraction=DUPLICATE_FRACTION, duplicate_delay_ms=DUPLICATE_DELAY_MS) -> Workload:
    """Poisson arrivals per lane over [0, duration_ms)"""
    mix = dict(mix or DEFAULT_MIX)
    unknown = set(mix) - set(TX_KINDS)
    if unknown:
        raise ValueError(f"unknown transaction kinds in mix: {sorted(unknown)}")
    weights = np.array([float(mix.get(k, 0.0)) for k in TX_KINDS])
    if weights.sum() <= 0:
        raise ValueError("transaction mix has no positive weight")
    weights = weights / weights.sum()

    workload = Workload()
    if not genesis.clients or rate_per_lane <= 0 or duration_ms <= 0:
        return workload
    rng = np.random.default_rng(seed)
    peers = [key.address for key in genesis.clients]
    by_lane = {lane: [key for i, key in enumerate(genesis.clients) if i % n == lane] for lane in range(n)}
    nonces = {key.address: 0 for key in genesis.clients}

    for lane in range(n):
        keys = by_lane[lane]
        if not keys:
            continue
        t = float(rng.exponential(1000.0 / rate_per_lane))
        while t < duration_ms:
            key = keys[int(rng.integers(len(keys)))]
            kind = TX_KINDS[int(rng.choice(len(TX_KINDS), p=weights))]
            tx = make_tx(rng, kind, key, nonces[key.address], genesis.chain_id, peers)
            nonces[key.address] += 1
            raw = encode_transaction(tx)
            workload.submissions.append(Submission(t, lane, raw))
            if n > 1 and rng.random() < duplicate_fraction:
                other = (lane + 1 + int(rng.integers(n - 1))) % n
                workload.submissions.append(Submission(t + duplicate_delay_ms, other, raw, True))
            t += float(rng.exponential(1000.0 / rate_per_lane))

    workload.submissions.sort(key=lambda s: (s.at_ms, s.lane))
    logger.info(f"Generated {len(workload)} submissions ({len(workload.duplicates())} duplicates) "
                f"for {len(genesis.clients)} clients over {duration_ms:.0f} ms")
    return workload


def random_block(rng, clients, size: int, conflict: float, chain_id: int = 1):
    """A block of signed transactions for executor tests.

    conflict is the probability that a transaction touches the shared
    counter slot; the rest draw a kind uniformly.
    """
    nonces = {key.address: 0 for key in clients}
    peers = [key.address for key in clients]
    txs = []
    for _ in range(size):
        key = clients[int(rng.integers(len(clients)))]
        kind = 'counter' if rng.random() < conflict else TX_KINDS[int(rng.integers(len(TX_KINDS)))]
        txs.append(make_tx(rng, kind, key, nonces[key.address], chain_id, peers))
        nonces[key.address] += 1
    return txs

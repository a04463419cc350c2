# models.py
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Optional

from sqlalchemy import Float, Integer, String, Text
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column

from config import (CAR_BATCH_CAP, CAR_INTERVAL_MS, CONFIRM_GRACE_MS, CUT_IDLE_MS, DEFAULT_SEED, EXEC_WORKERS,
                    INCLUSION_GRACE_MS, POST_GST_DELAY_MS, SNAPSHOT_INTERVAL, TIMEOUT_BACKOFF, TIMEOUT_CAP_MS,
                    TIMEOUT_MS)

ZERO_DIGEST = bytes(32)
ADDRESS_LEN = 20
WORD_LEN = 32
SIGNATURE_LEN = 65
U256_MAX = (1 << 256) - 1
U64_MAX = (1 << 64) - 1

SYSTEM_TX_TYPE = 0x7F


# ---------------------------------------------------------------------------
# Authentication
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    signer: int
    tag: bytes

    def to_dict(self):
        return {'signer': self.signer, 'tag': self.tag.hex()}


# ---------------------------------------------------------------------------
# Transactions and execution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccessListEntry:
    address: bytes
    storage_keys: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class Transaction:
    tx_type: int
    chain_id: int
    sender: bytes
    to: Optional[bytes]
    value: int
    nonce: int
    gas_limit: int
    gas_price: int
    access_list: tuple[AccessListEntry, ...] = ()
    signature: bytes = bytes(SIGNATURE_LEN)
    input: bytes = b''

    @property
    def is_system(self):
        return self.tx_type == SYSTEM_TX_TYPE

    def to_dict(self):
        return {
            'tx_type': self.tx_type,
            'chain_id': self.chain_id,
            'sender': self.sender.hex(),
            'to': self.to.hex() if self.to is not None else None,
            'value': self.value,
            'nonce': self.nonce,
            'gas_limit': self.gas_limit,
            'gas_price': self.gas_price,
            'access_list': [
                {'address': e.address.hex(), 'storage_keys': [k.hex() for k in e.storage_keys]}
                for e in self.access_list
            ],
            'signature': self.signature.hex(),
            'input': self.input.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'Transaction':
        to = data.get('to')
        return cls(
            tx_type=int(data['tx_type']),
            chain_id=int(data['chain_id']),
            sender=bytes.fromhex(data['sender']),
            to=bytes.fromhex(to) if to else None,
            value=int(data.get('value', 0)),
            nonce=int(data.get('nonce', 0)),
            gas_limit=int(data.get('gas_limit', 0)),
            gas_price=int(data.get('gas_price', 0)),
            access_list=tuple(
                AccessListEntry(bytes.fromhex(e['address']),
                                tuple(bytes.fromhex(k) for k in e.get('storage_keys', [])))
                for e in data.get('access_list', [])
            ),
            signature=bytes.fromhex(data.get('signature', '00' * SIGNATURE_LEN)),
            input=bytes.fromhex(data.get('input', '')),
        )


class LocationKind(int, Enum):
    BALANCE = 0
    NONCE = 1
    SLOT = 2


@dataclass(frozen=True, order=True)
class Location:
    """Flat state key; ordered by kind, then address, then slot key"""
    kind: LocationKind
    address: bytes
    key: bytes = b''

    @classmethod
    def balance(cls, address):
        return cls(LocationKind.BALANCE, address)

    @classmethod
    def nonce(cls, address):
        return cls(LocationKind.NONCE, address)

    @classmethod
    def slot(cls, address, key):
        return cls(LocationKind.SLOT, address, key)

    def encode(self) -> bytes:
        return bytes([self.kind]) + self.address + self.key

    @classmethod
    def decode(cls, raw: bytes) -> 'Location':
        kind = LocationKind(raw[0])
        address = raw[1:1 + ADDRESS_LEN]
        key = raw[1 + ADDRESS_LEN:]
        return cls(kind, address, key)

    def __str__(self):
        if self.kind == LocationKind.SLOT:
            return f"Slot({self.address.hex()[:8]},{self.key.hex()[:8]})"
        return f"{self.kind.name.title()}({self.address.hex()[:8]})"


class TxStatus(str, Enum):
    SUCCESS = 'success'
    FAILED = 'failed'


@dataclass
class Receipt:
    tx_digest: bytes
    status: TxStatus
    reason: Optional[str] = None
    reads: frozenset = frozenset()
    writes: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == TxStatus.SUCCESS

    def to_dict(self):
        return {
            'tx_digest': self.tx_digest.hex(),
            'status': self.status.value,
            'reason': self.reason,
            'reads': sorted(str(loc) for loc in self.reads),
            'writes': {str(loc): value for loc, value in sorted(self.writes.items())},
        }


# ---------------------------------------------------------------------------
# Lanes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Car:
    lane: int
    pos: int
    parent_ref: bytes
    batch: tuple[bytes, ...]
    digest: bytes

    def __repr__(self):
        return f"Car(lane={self.lane}, pos={self.pos}, txs={len(self.batch)}, digest={self.digest.hex()[:8]})"


@dataclass(frozen=True)
class PoACert:
    car_digest: bytes
    votes: tuple[Signature, ...]

    @property
    def size(self):
        return len(self.votes)

    @property
    def signers(self):
        return tuple(sorted(v.signer for v in self.votes))


@dataclass(frozen=True)
class TipRef:
    lane: int
    pos: int
    car_digest: bytes
    poa: PoACert


@dataclass(frozen=True)
class LaneTip:
    car: Car
    poa: PoACert


# ---------------------------------------------------------------------------
# Consensus
# ---------------------------------------------------------------------------

class QcKind(str, Enum):
    PREPARE = 'prepare'
    COMMIT = 'commit'
    CONFIRM = 'confirm'


@dataclass(frozen=True)
class StateQuorumRecord:
    height: int
    commitment: bytes
    attestations: tuple[Signature, ...]
    stake_fraction: Fraction = Fraction(0)
    committed_at: Optional[int] = None
    delay: Optional[int] = None

    @property
    def signers(self):
        return tuple(sorted(a.signer for a in self.attestations))

    def to_dict(self):
        return {
            'height': self.height,
            'commitment': self.commitment.hex(),
            'signers': list(self.signers),
            'stake_fraction': str(self.stake_fraction),
            'committed_at': self.committed_at,
            'delay': self.delay,
        }


@dataclass(frozen=True)
class TipCut:
    """Cut contents; view and proposer ride along but are not part of the digest"""
    slot: int
    view: int
    tips: tuple[Optional[TipRef], ...]
    proposer: int
    digest: bytes
    state_records: tuple[StateQuorumRecord, ...] = ()

    def positions(self):
        return tuple(t.pos if t is not None else -1 for t in self.tips)

    def to_dict(self):
        return {
            'slot': self.slot,
            'view': self.view,
            'proposer': self.proposer,
            'digest': self.digest.hex(),
            'tips': [
                None if t is None else {'lane': t.lane, 'pos': t.pos, 'car': t.car_digest.hex()}
                for t in self.tips
            ],
            'state_records': [r.height for r in self.state_records],
        }


@dataclass(frozen=True)
class QuorumCert:
    kind: QcKind
    slot: int
    view: int
    cut_digest: bytes
    votes: tuple[Signature, ...]

    @property
    def signers(self):
        return tuple(sorted(v.signer for v in self.votes))

    def bitmap(self):
        return sum(1 << s for s in self.signers)


@dataclass(frozen=True)
class TimeoutCert:
    slot: int
    view: int
    high_prepare: Optional[QuorumCert]
    votes: tuple[Signature, ...]


@dataclass(frozen=True)
class StateAttestation:
    height: int
    commitment: bytes
    signer: int
    sig: Signature


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

class WalKind(int, Enum):
    WRITE = 1
    HEIGHT_MARKER = 2


@dataclass(frozen=True)
class WalRecord:
    seq: int
    height: int
    kind: WalKind
    key: bytes = b''
    old_value: Optional[bytes] = None
    new_value: Optional[bytes] = None

    def to_dict(self):
        return {
            'seq': self.seq,
            'height': self.height,
            'kind': self.kind.name.lower(),
            'key': self.key.hex(),
            'old': self.old_value.hex() if self.old_value is not None else None,
            'new': self.new_value.hex() if self.new_value is not None else None,
        }


# ---------------------------------------------------------------------------
# Network simulation
# ---------------------------------------------------------------------------

class Behavior(str, Enum):
    CRASH = 'crash'
    SILENT_LEADER = 'silent_leader'
    EQUIVOCATE_LANE = 'equivocate_lane'
    WITHHOLD_BATCH = 'withhold_batch'
    WRONG_STATE_ROOT = 'wrong_state_root'
    OMIT_CERTIFIED_TIP = 'omit_certified_tip'
    EQUIVOCATE_CUT = 'equivocate_cut'


@dataclass(frozen=True)
class FaultSpec:
    replica: int
    behavior: Behavior
    at_ms: float = 0.0
    views: tuple[int, ...] = ()
    bias: int = 1
    window: tuple[float, float] = (0.0, float('inf'))

    def active(self, now_ms):
        start, end = self.window
        return start <= now_ms < end

    def to_dict(self):
        return {'replica': self.replica, 'behavior': self.behavior.value, 'at_ms': self.at_ms,
                'views': list(self.views), 'bias': self.bias, 'window': list(self.window)}


@dataclass(frozen=True)
class DelayModel:
    kind: str = 'fixed'  # fixed | uniform
    min_ms: float = POST_GST_DELAY_MS
    max_ms: float = POST_GST_DELAY_MS

    @property
    def median_ms(self):
        if self.kind == 'fixed':
            return self.min_ms
        return (self.min_ms + self.max_ms) / 2

    @property
    def bound_ms(self):
        return self.min_ms if self.kind == 'fixed' else self.max_ms


@dataclass(frozen=True)
class NetConfig:
    n: int
    f: int
    seed: int = DEFAULT_SEED
    delay: DelayModel = DelayModel()
    pre_gst_delay: Optional[DelayModel] = None
    gst_ms: float = 0.0
    faults: tuple[FaultSpec, ...] = ()
    stakes: tuple[int, ...] = ()
    allow_excess_faults: bool = False

    def stake_map(self):
        stakes = self.stakes or tuple(1 for _ in range(self.n))
        return {r: stakes[r] for r in range(self.n)}

    @property
    def round_trip_ms(self):
        return 2 * self.delay.median_ms

    def faulty(self):
        return sorted({spec.replica for spec in self.faults})


@dataclass(frozen=True)
class Toggles:
    """Protocol knobs a scenario can flip"""
    pipelining: bool = True
    exec_workers: int = EXEC_WORKERS
    timeout_ms: float = TIMEOUT_MS
    timeout_backoff: float = TIMEOUT_BACKOFF
    timeout_cap_ms: float = TIMEOUT_CAP_MS
    cut_idle_ms: float = CUT_IDLE_MS
    car_interval_ms: float = CAR_INTERVAL_MS
    confirm_grace_ms: float = CONFIRM_GRACE_MS
    inclusion_grace_ms: float = INCLUSION_GRACE_MS
    snapshot_interval: int = SNAPSHOT_INTERVAL
    missed_slot_rate: float = 0.0
    batch_cap: int = CAR_BATCH_CAP

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class Envelope:
    id: int
    src: int
    dst: int
    kind: str
    payload: Any
    send_ms: float
    deliver_ms: float


# ---------------------------------------------------------------------------
# Protocol messages (Envelope payloads)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CarProposal:
    car: Car


@dataclass(frozen=True)
class CarVote:
    lane: int
    pos: int
    sig: Signature


@dataclass(frozen=True)
class PoaAnnounce:
    tip: TipRef


@dataclass(frozen=True)
class SyncRequest:
    lane: int
    from_pos: int
    to_pos: int


@dataclass(frozen=True)
class FetchRequest:
    car_digest: bytes


@dataclass(frozen=True)
class FetchResponse:
    car: Car


@dataclass(frozen=True)
class Prepare:
    cut: TipCut
    justify: Optional[TimeoutCert] = None


@dataclass(frozen=True)
class ConsensusVote:
    kind: QcKind
    slot: int
    view: int
    cut_digest: bytes
    sig: Signature


@dataclass(frozen=True)
class QcAnnounce:
    qc: QuorumCert


@dataclass(frozen=True)
class Confirm:
    qc: QuorumCert


@dataclass(frozen=True)
class TimeoutVote:
    slot: int
    view: int
    high_prepare: Optional[QuorumCert]
    sig: Signature


@dataclass(frozen=True)
class TcAnnounce:
    tc: TimeoutCert


@dataclass(frozen=True)
class CutRequest:
    slot: int
    cut_digest: bytes


@dataclass(frozen=True)
class CutResponse:
    cut: TipCut


# ---------------------------------------------------------------------------
# Committed-cut journal
# ---------------------------------------------------------------------------

class Base(DeclarativeBase):
    pass


class CommittedCutRecord(Base):
    __tablename__ = 'committed_cuts'

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    replica: Mapped[int] = mapped_column(Integer, index=True)
    slot: Mapped[int] = mapped_column(Integer, index=True)
    view: Mapped[int] = mapped_column(Integer)
    cut_digest: Mapped[str] = mapped_column(String(64), index=True)
    tips: Mapped[str] = mapped_column(Text)  # JSON list of lane positions
    prepare_signers: Mapped[str] = mapped_column(String(64))
    commit_signers: Mapped[str] = mapped_column(String(64))
    confirm_signers: Mapped[str] = mapped_column(String(64), default='0')
    committed_at_ms: Mapped[float] = mapped_column(Float)

    def __repr__(self):
        return f'<CommittedCut replica={self.replica} slot={self.slot} {self.cut_digest[:8]}>'

    def to_dict(self):
        return {
            'replica': self.replica,
            'slot': self.slot,
            'view': self.view,
            'cut_digest': self.cut_digest,
            'tips': self.tips,
            'prepare_signers': self.prepare_signers,
            'commit_signers': self.commit_signers,
            'confirm_signers': self.confirm_signers,
            'committed_at_ms': self.committed_at_ms,
        }

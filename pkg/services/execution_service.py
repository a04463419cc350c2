# services/execution_service.py
"""Toy deterministic execution over a flat account/slot state.

Program encoding carried in Transaction.input:

    empty, or first byte 0x00      pure transfer of tx.value
    N (1..255) followed by N ops:
        0x01 SSTORE     slot(32) value(32)
        0x02 SLOAD_ADD  slot(32) delta(8) result_slot(32)
        0x03 TRANSFER   address(20) amount(32)

Storage ops act on the target account (tx.to, or the created contract).
TRANSFER moves funds out of the sender.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import yaml
from loguru import logger

from config import MAX_PROGRAM_OPS
from exceptions import DecodeError
from models import (ADDRESS_LEN, U64_MAX, U256_MAX, WORD_LEN, Location, LocationKind, Receipt,
                    Transaction, TxStatus)
from services.codec_service import decode_transaction, signing_digest, tx_digest
from services.commitment_service import update_commitment_value
from services.crypto_service import ClientKey, ClientRegistry, digest_parts

OP_SSTORE = 0x01
OP_SLOAD_ADD = 0x02
OP_TRANSFER = 0x03


# ---------------------------------------------------------------------------
# World state
# ---------------------------------------------------------------------------

class WorldState:
    """Flat map Location -> 256-bit value. Zero values are absent entries."""

    def __init__(self, entries=None, height=0, commitment=None):
        self._entries = {loc: v for loc, v in (entries or {}).items() if v}
        self.height = height
        if commitment is None:
            commitment = 0
            for loc, value in self._entries.items():
                commitment = update_commitment_value(commitment, None, (loc, value))
        self._commitment = commitment

    def get(self, loc: Location) -> int:
        return self._entries.get(loc, 0)

    def balance(self, address):
        return self.get(Location.balance(address))

    def nonce(self, address):
        return self.get(Location.nonce(address))

    def storage(self, address, key):
        return self.get(Location.slot(address, key))

    def items(self):
        return self._entries.items()

    def __len__(self):
        return len(self._entries)

    @property
    def commitment_value(self) -> int:
        return self._commitment

    @property
    def commitment(self) -> bytes:
        return self._commitment.to_bytes(WORD_LEN, 'big')

    def copy(self) -> 'WorldState':
        clone = WorldState.__new__(WorldState)
        clone._entries = dict(self._entries)
        clone.height = self.height
        clone._commitment = self._commitment
        return clone

    def apply_writes(self, writes: dict):
        """In-place update; only used on working copies"""
        for loc, value in writes.items():
            old = self._entries.get(loc)
            old_entry = (loc, old) if old else None
            new_entry = (loc, value) if value else None
            self._commitment = update_commitment_value(self._commitment, old_entry, new_entry)
            if value:
                self._entries[loc] = value
            else:
                self._entries.pop(loc, None)

    def with_writes(self, writes: dict, height=None) -> 'WorldState':
        clone = self.copy()
        clone.apply_writes(writes)
        if height is not None:
            clone.height = height
        return clone

    def total_balance(self):
        return sum(v for loc, v in self._entries.items() if loc.kind == LocationKind.BALANCE)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return self.height == other.height and self._entries == other._entries

    def __repr__(self):
        return f"WorldState(height={self.height}, entries={len(self._entries)}, commitment={self.commitment.hex()[:12]})"


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------

class SStore(NamedTuple):
    slot: bytes
    value: int


class SLoadAdd(NamedTuple):
    slot: bytes
    delta: int
    result_slot: bytes


class TransferOp(NamedTuple):
    address: bytes
    amount: int


class ProgramError(Exception):
    pass


def parse_program(data: bytes):
    if not data or data[0] == 0:
        return []
    count = data[0]
    if count > MAX_PROGRAM_OPS:
        raise ProgramError(f"program has {count} ops, limit is {MAX_PROGRAM_OPS}")
    ops = []
    pos = 1

    def take(size):
        nonlocal pos
        if pos + size > len(data):
            raise ProgramError(f"truncated op at byte {pos}")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    for _ in range(count):
        code = take(1)[0]
        if code == OP_SSTORE:
            ops.append(SStore(take(WORD_LEN), int.from_bytes(take(WORD_LEN), 'big')))
        elif code == OP_SLOAD_ADD:
            ops.append(SLoadAdd(take(WORD_LEN), int.from_bytes(take(8), 'big'), take(WORD_LEN)))
        elif code == OP_TRANSFER:
            ops.append(TransferOp(take(ADDRESS_LEN), int.from_bytes(take(WORD_LEN), 'big')))
        else:
            raise ProgramError(f"unknown opcode 0x{code:02x}")
    if pos != len(data):
        raise ProgramError("trailing bytes after program")
    return ops


def encode_program(ops) -> bytes:
    if not ops:
        return b''
    out = bytearray([len(ops)])
    for op in ops:
        if isinstance(op, SStore):
            out += bytes([OP_SSTORE]) + op.slot + op.value.to_bytes(WORD_LEN, 'big')
        elif isinstance(op, SLoadAdd):
            out += bytes([OP_SLOAD_ADD]) + op.slot + op.delta.to_bytes(8, 'big') + op.result_slot
        elif isinstance(op, TransferOp):
            out += bytes([OP_TRANSFER]) + op.address + op.amount.to_bytes(WORD_LEN, 'big')
        else:
            raise TypeError(f"not an op: {op!r}")
    return bytes(out)


def contract_address(sender: bytes, nonce: int) -> bytes:
    return digest_parts(b'create', sender, nonce.to_bytes(8, 'big'))[12:]


# ---------------------------------------------------------------------------
# Transaction semantics
# ---------------------------------------------------------------------------

class TxAbort(Exception):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class _TxContext:
    """Read tracking plus a private write buffer over a read function"""

    def __init__(self, read: Callable[[Location], int]):
        self._read = read
        self.reads = set()
        self.writes = {}

    def get(self, loc):
        if loc in self.writes:
            return self.writes[loc]
        self.reads.add(loc)
        return self._read(loc)

    def set(self, loc, value):
        self.writes[loc] = value

    def transfer(self, src, dst, amount):
        src_loc, dst_loc = Location.balance(src), Location.balance(dst)
        balance = self.get(src_loc)
        if amount > balance:
            raise TxAbort('insufficient balance')
        self.set(src_loc, balance - amount)
        credited = self.get(dst_loc) + amount
        if credited > U256_MAX:
            raise TxAbort('balance overflow')
        self.set(dst_loc, credited)


def run_transaction(read: Callable[[Location], int], tx: Transaction, digest: bytes = None) -> Receipt:
    """Execute tx against a read function; the state change is Receipt.writes"""
    digest = digest or tx_digest(tx)
    if tx.is_system:
        return Receipt(digest, TxStatus.FAILED, 'system transaction')
    ctx = _TxContext(read)
    nonce_loc = Location.nonce(tx.sender)
    current = ctx.get(nonce_loc)
    if tx.nonce != current or current >= U64_MAX:
        return Receipt(digest, TxStatus.FAILED, 'bad nonce', frozenset(ctx.reads), {})

    ctx.set(nonce_loc, current + 1)
    bumped = dict(ctx.writes)
    target = tx.to if tx.to is not None else contract_address(tx.sender, tx.nonce)
    try:
        ops = parse_program(tx.input)
        ctx.transfer(tx.sender, target, tx.value)
        accumulator = 0
        for op in ops:
            if isinstance(op, SStore):
                ctx.set(Location.slot(target, op.slot), op.value)
            elif isinstance(op, SLoadAdd):
                loaded = ctx.get(Location.slot(target, op.slot))
                accumulator = (accumulator + (loaded & U64_MAX) + op.delta) & U64_MAX
                ctx.set(Location.slot(target, op.result_slot), accumulator)
            else:
                ctx.transfer(tx.sender, op.address, op.amount)
    except ProgramError as e:
        return Receipt(digest, TxStatus.FAILED, f"malformed program: {e}", frozenset(ctx.reads), bumped)
    except TxAbort as e:
        return Receipt(digest, TxStatus.FAILED, e.reason, frozenset(ctx.reads), bumped)
    return Receipt(digest, TxStatus.SUCCESS, None, frozenset(ctx.reads), dict(ctx.writes))


def exec_transaction(state: WorldState, tx: Transaction):
    receipt = run_transaction(state.get, tx)
    return state.with_writes(receipt.writes), receipt


def exec_block_sequential(state: WorldState, txs, height: Optional[int] = None):
    working = state.copy()
    receipts = []
    for tx in txs:
        receipt = run_transaction(working.get, tx)
        working.apply_writes(receipt.writes)
        receipts.append(receipt)
    if height is not None:
        working.height = height
    return working, receipts


# ---------------------------------------------------------------------------
# Block pre-processing
# ---------------------------------------------------------------------------

@dataclass
class PreparedBlock:
    txs: list
    rejected: list  # receipts for transactions that failed admission
    system_txs: list
    undecodable: int = 0


def preprocess_batch(raw_txs, clients: Optional[ClientRegistry], chain_id: Optional[int] = None) -> PreparedBlock:
    """Decode and authenticate a linearized batch before execution"""
    block = PreparedBlock([], [], [])
    for raw in raw_txs:
        try:
            tx = decode_transaction(raw)
        except DecodeError as e:
            logger.debug(f"dropping undecodable transaction: {e}")
            block.undecodable += 1
            continue
        if tx.is_system:
            block.system_txs.append(tx)
            continue
        if chain_id is not None and tx.chain_id != chain_id:
            block.rejected.append(Receipt(tx_digest(tx), TxStatus.FAILED, 'wrong chain id'))
            continue
        if clients is not None and not clients.verify(tx.sender, signing_digest(tx), tx.signature):
            block.rejected.append(Receipt(tx_digest(tx), TxStatus.FAILED, 'invalid signature'))
            continue
        block.txs.append(tx)
    return block


# ---------------------------------------------------------------------------
# Genesis
# ---------------------------------------------------------------------------

@dataclass
class Genesis:
    chain_id: int
    state: WorldState
    clients: list
    client_seed: Optional[int] = None

    def registry(self):
        return ClientRegistry(self.clients)


def load_genesis(source) -> Genesis:
    """Load genesis from a YAML path or an already-parsed dict.

    Schema:
        chain_id: int
        clients: {seed: int, count: int, balance: int}   # derived client accounts
        accounts: [{address: hex, balance: int}]         # explicit accounts
    """
    if isinstance(source, dict):
        data = source
    else:
        with open(source) as fh:
            data = yaml.safe_load(fh) or {}
    entries = {}
    clients = []
    client_spec = data.get('clients')
    if client_spec:
        for i in range(int(client_spec['count'])):
            key = ClientKey.derive(int(client_spec['seed']), i)
            clients.append(key)
            entries[Location.balance(key.address)] = int(client_spec['balance'])
    for account in data.get('accounts', []):
        address = bytes.fromhex(account['address'])
        if len(address) != ADDRESS_LEN:
            raise ValueError(f"genesis address {account['address']} is not 20 bytes")
        entries[Location.balance(address)] = int(account['balance'])
    state = WorldState(entries, height=0)
    logger.info(f"Loaded genesis with {len(entries)} accounts, commitment {state.commitment.hex()[:16]}")
    return Genesis(int(data.get('chain_id', 1)), state, clients,
                   int(client_spec['seed']) if client_spec else None)

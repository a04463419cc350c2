# services/codec_service.py
"""Flat, length-prefixed transaction codec and the car wire format.

Transaction layout (all integers big-endian):

    tx_type(1) | chain_id(8) | sender(20) | to_marker(1) | [to(20)]
    | value(1-byte length L <= 32, then L minimal bytes)
    | nonce(8) | gas_limit(8) | gas_price(1-byte length + minimal bytes)
    | signature(65) | access_list_count(2)
    | per entry: address(20) | key_count(2) | keys(32 each)
    | input (all remaining bytes)

to_marker is 0x00 for contract creation (no address follows) and 0x01 when an
address follows.
"""

from dataclasses import replace

from exceptions import DecodeError, EncodingError
from models import (ADDRESS_LEN, SIGNATURE_LEN, U64_MAX, WORD_LEN, AccessListEntry, Car,
                    Transaction)
from services.crypto_service import digest

TO_CREATE = 0x00
TO_ADDRESS = 0x01
MAX_VARINT_LEN = 32
MAX_COUNT = 0xFFFF

TO_MARKER_OFFSET = 1 + 8 + ADDRESS_LEN
MIN_TX_LEN = 1 + 8 + ADDRESS_LEN + 1 + 1 + 8 + 8 + 1 + SIGNATURE_LEN + 2


def _minimal_bytes(value: int, name: str) -> bytes:
    if value < 0:
        raise EncodingError(f"{name} is negative")
    length = (value.bit_length() + 7) // 8
    if length > MAX_VARINT_LEN:
        raise EncodingError(f"{name} needs {length} bytes, limit is {MAX_VARINT_LEN}")
    return bytes([length]) + value.to_bytes(length, 'big')


def _u64(value: int, name: str) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise EncodingError(f"{name} does not fit 64 bits")
    return value.to_bytes(8, 'big')


def _fixed(raw: bytes, width: int, name: str) -> bytes:
    if len(raw) != width:
        raise EncodingError(f"{name} must be {width} bytes, got {len(raw)}")
    return raw


def encode_transaction(tx: Transaction) -> bytes:
    if not 0 <= tx.tx_type <= 0xFF:
        raise EncodingError("tx_type does not fit one byte")
    out = bytearray()
    out.append(tx.tx_type)
    out += _u64(tx.chain_id, 'chain_id')
    out += _fixed(tx.sender, ADDRESS_LEN, 'sender')
    if tx.to is None:
        out.append(TO_CREATE)
    else:
        out.append(TO_ADDRESS)
        out += _fixed(tx.to, ADDRESS_LEN, 'to')
    out += _minimal_bytes(tx.value, 'value')
    out += _u64(tx.nonce, 'nonce')
    out += _u64(tx.gas_limit, 'gas_limit')
    out += _minimal_bytes(tx.gas_price, 'gas_price')
    out += _fixed(tx.signature, SIGNATURE_LEN, 'signature')
    if len(tx.access_list) > MAX_COUNT:
        raise EncodingError("access list has too many entries")
    out += len(tx.access_list).to_bytes(2, 'big')
    for entry in tx.access_list:
        out += _fixed(entry.address, ADDRESS_LEN, 'access list address')
        if len(entry.storage_keys) > MAX_COUNT:
            raise EncodingError("access list entry has too many storage keys")
        out += len(entry.storage_keys).to_bytes(2, 'big')
        for key in entry.storage_keys:
            out += _fixed(key, WORD_LEN, 'storage key')
    out += tx.input
    return bytes(out)


class PayloadReader:
    """Forward-only cursor over a payload.

    With instrument=True every byte handed out is counted in touches, which
    lets tests check that decoding is a single pass.
    """

    def __init__(self, payload: bytes, instrument=False):
        self.payload = memoryview(payload)
        self.offset = 0
        self.touches = [0] * len(payload) if instrument else None

    def read(self, size: int, field: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise DecodeError(f"truncated {field}", self.offset)
        chunk = bytes(self.payload[self.offset:end])
        if self.touches is not None:
            for i in range(self.offset, end):
                self.touches[i] += 1
        self.offset = end
        return chunk

    def read_int(self, size: int, field: str) -> int:
        return int.from_bytes(self.read(size, field), 'big')

    def read_varint(self, field: str) -> int:
        start = self.offset
        length = self.read_int(1, f"{field} length")
        if length > MAX_VARINT_LEN:
            raise DecodeError(f"{field} length {length} exceeds {MAX_VARINT_LEN}", start)
        raw = self.read(length, field)
        if length and raw[0] == 0:
            raise DecodeError(f"non-minimal {field} encoding", start)
        return int.from_bytes(raw, 'big')

    def rest(self) -> bytes:
        return self.read(len(self.payload) - self.offset, 'input')


def decode_transaction(payload: bytes, reader: PayloadReader = None) -> Transaction:
    r = reader or PayloadReader(payload)
    tx_type = r.read_int(1, 'tx_type')
    chain_id = r.read_int(8, 'chain_id')
    sender = r.read(ADDRESS_LEN, 'sender')
    marker_offset = r.offset
    marker = r.read_int(1, 'to marker')
    if marker == TO_CREATE:
        to = None
    elif marker == TO_ADDRESS:
        to = r.read(ADDRESS_LEN, 'to')
    else:
        raise DecodeError(f"invalid to marker 0x{marker:02x}", marker_offset)
    value = r.read_varint('value')
    nonce = r.read_int(8, 'nonce')
    gas_limit = r.read_int(8, 'gas_limit')
    gas_price = r.read_varint('gas_price')
    signature = r.read(SIGNATURE_LEN, 'signature')
    entries = []
    for _ in range(r.read_int(2, 'access list count')):
        address = r.read(ADDRESS_LEN, 'access list address')
        keys = tuple(r.read(WORD_LEN, 'storage key') for _ in range(r.read_int(2, 'key count')))
        entries.append(AccessListEntry(address, keys))
    return Transaction(
        tx_type=tx_type,
        chain_id=chain_id,
        sender=sender,
        to=to,
        value=value,
        nonce=nonce,
        gas_limit=gas_limit,
        gas_price=gas_price,
        access_list=tuple(entries),
        signature=signature,
        input=r.rest(),
    )


def tx_digest(tx: Transaction) -> bytes:
    return digest(encode_transaction(tx))


def signing_digest(tx: Transaction) -> bytes:
    """Digest the client signs: the encoding with the signature zeroed"""
    return digest(encode_transaction(replace(tx, signature=bytes(SIGNATURE_LEN))))


# ---------------------------------------------------------------------------
# Cars: lane(4) | pos(8) | parent_ref(32) | tx_count(4) | per tx: len(4) | bytes
# ---------------------------------------------------------------------------

def encode_car(lane: int, pos: int, parent_ref: bytes, batch) -> bytes:
    out = bytearray()
    out += lane.to_bytes(4, 'big')
    out += pos.to_bytes(8, 'big')
    out += _fixed(parent_ref, WORD_LEN, 'parent_ref')
    out += len(batch).to_bytes(4, 'big')
    for raw in batch:
        out += len(raw).to_bytes(4, 'big')
        out += raw
    return bytes(out)


def make_car(lane: int, pos: int, parent_ref: bytes, batch) -> Car:
    batch = tuple(batch)
    return Car(lane, pos, parent_ref, batch, digest(encode_car(lane, pos, parent_ref, batch)))


def decode_car(payload: bytes) -> Car:
    r = PayloadReader(payload)
    lane = r.read_int(4, 'lane')
    pos = r.read_int(8, 'pos')
    parent_ref = r.read(WORD_LEN, 'parent_ref')
    count = r.read_int(4, 'tx count')
    batch = tuple(r.read(r.read_int(4, 'tx length'), 'tx bytes') for _ in range(count))
    if r.offset != len(payload):
        raise DecodeError("trailing bytes after car", r.offset)
    return make_car(lane, pos, parent_ref, batch)


def car_digest_matches(car: Car) -> bool:
    return digest(encode_car(car.lane, car.pos, car.parent_ref, car.batch)) == car.digest

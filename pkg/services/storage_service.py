# services/storage_service.py
"""Flat key-value store backed by an append-only write-ahead log.

WAL frame:   len(4 BE) | body | crc32(body)(4 BE)
WAL body:    seq(8) | height(8) | kind(1) | key_len(2) | key
             | old_flag(1) [old(32)] | new_flag(1) [new(32)]

A block is its WRITE records followed by one HEIGHT_MARKER record. Replay
applies whole blocks only; writes after the last marker are dropped.
"""

from __future__ import annotations

import io
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Optional

from loguru import logger

from config import COLD_AFTER_BLOCKS
from exceptions import HeightGapError, StoreFailedError, WalCorruptionError
from models import WORD_LEN, Car, Location, WalKind, WalRecord
from services.codec_service import encode_car
from services.commitment_service import update_commitment_value
from services.execution_service import WorldState

FRAME_HEADER = struct.Struct('>I')
FRAME_TRAILER = struct.Struct('>I')
BODY_HEADER = struct.Struct('>QQBH')
MAX_BODY_LEN = 1 << 20
MIN_BODY_LEN = BODY_HEADER.size + 2
WAL_KINDS = frozenset(k.value for k in WalKind)


# ---------------------------------------------------------------------------
# Record codec
# ---------------------------------------------------------------------------

def _opt_word(value: Optional[bytes]) -> bytes:
    if value is None:
        return b'\x00'
    if len(value) != WORD_LEN:
        raise ValueError(f"WAL values are {WORD_LEN} bytes, got {len(value)}")
    return b'\x01' + value


def encode_record(record: WalRecord) -> bytes:
    body = (BODY_HEADER.pack(record.seq, record.height, record.kind, len(record.key)) + record.key
            + _opt_word(record.old_value) + _opt_word(record.new_value))
    return FRAME_HEADER.pack(len(body)) + body + FRAME_TRAILER.pack(zlib.crc32(body))


def _decode_body(body: bytes, offset: int) -> WalRecord:
    try:
        seq, height, kind, key_len = BODY_HEADER.unpack_from(body, 0)
        pos = BODY_HEADER.size
        key = body[pos:pos + key_len]
        pos += key_len
        values = []
        for _ in range(2):
            flag = body[pos]
            pos += 1
            if flag:
                values.append(body[pos:pos + WORD_LEN])
                pos += WORD_LEN
            else:
                values.append(None)
        if pos != len(body) or len(key) != key_len:
            raise ValueError("length mismatch")
        return WalRecord(seq, height, WalKind(kind), key, values[0], values[1])
    except (struct.error, IndexError, ValueError) as e:
        raise WalCorruptionError(f"malformed WAL record body ({e})", offset)


@dataclass
class WalScan:
    records: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    torn_offset: Optional[int] = None

    @property
    def clean(self):
        return self.torn_offset is None


def _plausible_tail(data: bytes, start: int, length: int, last_seq: int) -> bool:
    """Whether data[start:] can be the cut-off beginning of a body of length bytes"""
    if len(data) - start < BODY_HEADER.size:
        return True
    seq, _, kind, key_len = BODY_HEADER.unpack_from(data, start)
    if seq <= last_seq or kind not in WAL_KINDS:
        return False
    fixed = BODY_HEADER.size + key_len + 2
    if not fixed <= length <= fixed + 2 * WORD_LEN:
        return False
    flag_at = start + BODY_HEADER.size + key_len
    words = 0
    for _ in range(2):
        if flag_at >= len(data):
            return True
        if data[flag_at] not in (0, 1):
            return False
        words += data[flag_at]
        flag_at += 1 + data[flag_at] * WORD_LEN
    return length == fixed + words * WORD_LEN


def scan_wal(data: bytes) -> WalScan:
    """Decode every complete frame.

    An incomplete frame at the end, or a bad checksum on the final frame, is a
    torn tail. A bad checksum with more bytes after it is corruption, and so
    is a length field no frame could have or one that overruns the log with
    bytes that do not begin such a frame.
    """
    scan = WalScan()
    offset = 0
    end = len(data)
    last_seq = -1
    while offset < end:
        if offset + FRAME_HEADER.size > end:
            scan.torn_offset = offset
            break
        (length,) = FRAME_HEADER.unpack_from(data, offset)
        if not MIN_BODY_LEN <= length <= MAX_BODY_LEN:
            raise WalCorruptionError(f"bad frame length {length}", offset)
        frame_end = offset + FRAME_HEADER.size + length + FRAME_TRAILER.size
        if frame_end > end:
            if not _plausible_tail(data, offset + FRAME_HEADER.size, length, last_seq):
                raise WalCorruptionError(f"bad frame length {length}", offset)
            scan.torn_offset = offset
            break
        body = data[offset + FRAME_HEADER.size:frame_end - FRAME_TRAILER.size]
        (crc,) = FRAME_TRAILER.unpack_from(data, frame_end - FRAME_TRAILER.size)
        if zlib.crc32(body) != crc:
            if frame_end == end:
                scan.torn_offset = offset
                break
            raise WalCorruptionError("checksum mismatch", offset)
        record = _decode_body(body, offset)
        if record.seq <= last_seq:
            raise WalCorruptionError(f"sequence went backwards ({record.seq} after {last_seq})", offset)
        last_seq = record.seq
        scan.records.append(record)
        scan.offsets.append(offset)
        offset = frame_end
    return scan


# ---------------------------------------------------------------------------
# Log writer
# ---------------------------------------------------------------------------

class WalWriter:
    """Appends frames to a file (or an in-memory buffer) from a flusher thread.

    append() returns at once; flush() is the barrier that waits until every
    appended frame has reached the sink.
    """

    def __init__(self, path: Optional[str] = None, initial: bytes = b''):
        self.path = path
        if path is None:
            self._sink = io.BytesIO()
            self._sink.write(initial)
        else:
            self._sink = open(path, 'ab')
        self._pending = []
        self._cond = threading.Condition()
        self._appended = 0
        self._written = 0
        self._closed = False
        self.error: Optional[OSError] = None
        self._thread = threading.Thread(target=self._run, name='wal-flusher', daemon=True)
        self._thread.start()

    def append(self, frames: bytes):
        with self._cond:
            if self._closed:
                raise StoreFailedError("WAL writer is closed")
            self._pending.append(frames)
            self._appended += 1
            self._cond.notify_all()
            return self._appended

    def _run(self):
        while True:
            with self._cond:
                while not self._pending and not self._closed:
                    self._cond.wait()
                if not self._pending and self._closed:
                    return
                batch, self._pending = self._pending, []
                target = self._appended
            try:
                if self.error is None:
                    for chunk in batch:
                        self._sink.write(chunk)
                    self._sink.flush()
                    if self.path is not None:
                        os.fsync(self._sink.fileno())
            except OSError as e:
                logger.error(f"WAL write failed: {e}")
                self.error = e
            with self._cond:
                self._written = target
                self._cond.notify_all()

    def flush(self, timeout=None):
        with self._cond:
            target = self._appended
            self._cond.wait_for(lambda: self._written >= target, timeout=timeout)
        if self.error is not None:
            raise StoreFailedError(f"WAL flush failed: {self.error}")

    def contents(self) -> bytes:
        """Bytes that reached the sink so far"""
        if self.path is None:
            return self._sink.getvalue()
        with open(self.path, 'rb') as fh:
            return fh.read()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self._thread.join()
        if self.path is not None:
            self._sink.close()


# ---------------------------------------------------------------------------
# Flat store
# ---------------------------------------------------------------------------

def _word(value: int) -> Optional[bytes]:
    return value.to_bytes(WORD_LEN, 'big') if value else None


class FlatStore:
    """Hot map plus append-only cold file, kept durable by the WAL.

    Height 0 is the genesis block; a fresh store has applied nothing.
    """

    def __init__(self, path: Optional[str] = None, cold_path: Optional[str] = None,
                 cold_after: int = COLD_AFTER_BLOCKS, _wal_bytes: bytes = b''):
        self.hot = {}
        self._cold_index = {}  # Location -> offset of the value in the cold file
        self._cold = io.BytesIO() if cold_path is None else open(cold_path, 'a+b')
        self._touched = {}
        self.cold_after = cold_after
        self.last_height = -1
        self.next_seq = 0
        self.commitment_value = 0
        self.failed = False
        self.cold_reads = 0
        self.wal = WalWriter(path, _wal_bytes)

    # --- reads -------------------------------------------------------------

    def get(self, loc: Location) -> Optional[int]:
        value = self.hot.get(loc)
        if value is not None:
            return value
        offset = self._cold_index.get(loc)
        if offset is None:
            return None
        self.cold_reads += 1
        self._cold.seek(offset)
        return int.from_bytes(self._cold.read(WORD_LEN), 'big')

    def __contains__(self, loc):
        return loc in self.hot or loc in self._cold_index

    def __len__(self):
        return len(self.hot) + len(self._cold_index)

    def items(self):
        for loc, value in self.hot.items():
            yield loc, value
        for loc in list(self._cold_index):
            yield loc, self.get(loc)

    @property
    def cold_count(self):
        return len(self._cold_index)

    @property
    def commitment(self) -> bytes:
        return self.commitment_value.to_bytes(WORD_LEN, 'big')

    def to_state(self):
        return WorldState(dict(self.items()), height=max(self.last_height, 0), commitment=self.commitment_value)

    # --- writes ------------------------------------------------------------

    def apply_block(self, height: int, writes: dict) -> bool:
        """Log then apply one block's writes. Returns False for an already applied height."""
        if self.failed or self.wal.error is not None:
            self.failed = True
            raise StoreFailedError(f"store is read-only after an I/O failure (height {height})")
        if height <= self.last_height:
            logger.debug(f"Height {height} already applied, ignoring")
            return False
        if height != self.last_height + 1:
            raise HeightGapError(f"expected height {self.last_height + 1}, got {height}")

        frames = bytearray()
        for loc in sorted(writes):
            new = writes[loc]
            old = self.get(loc) or 0
            frames += encode_record(WalRecord(self.next_seq, height, WalKind.WRITE, loc.encode(),
                                              _word(old), _word(new)))
            self.next_seq += 1
            self._set(loc, old, new, height)
        frames += encode_record(WalRecord(self.next_seq, height, WalKind.HEIGHT_MARKER))
        self.next_seq += 1
        self.last_height = height
        try:
            self.wal.append(bytes(frames))
        except StoreFailedError:
            self.failed = True
            raise
        return True

    def _set(self, loc, old, new, height):
        self.commitment_value = update_commitment_value(
            self.commitment_value, (loc, old) if old else None, (loc, new) if new else None)
        self._cold_index.pop(loc, None)
        if new:
            self.hot[loc] = new
            self._touched[loc] = height
        else:
            self.hot.pop(loc, None)
            self._touched.pop(loc, None)

    def flush(self, timeout=None):
        try:
            self.wal.flush(timeout)
        except StoreFailedError:
            self.failed = True
            raise

    def demote_cold(self, current_height: Optional[int] = None, after: Optional[int] = None) -> int:
        """Move hot entries untouched for at least `after` blocks to the cold file"""
        current = self.last_height if current_height is None else current_height
        after = self.cold_after if after is None else after
        stale = [loc for loc, h in self._touched.items() if current - h >= after]
        self._cold.seek(0, io.SEEK_END)
        for loc in stale:
            value = self.hot.pop(loc)
            del self._touched[loc]
            key = loc.encode()
            self._cold.write(len(key).to_bytes(2, 'big') + key)
            self._cold_index[loc] = self._cold.tell()
            self._cold.write(value.to_bytes(WORD_LEN, 'big'))
        if stale:
            logger.debug(f"Demoted {len(stale)} entries to the cold tier at height {current}")
        return len(stale)

    def close(self):
        """Stop the WAL flusher; an in-memory store stays readable"""
        self.wal.close()
        if not isinstance(self._cold, io.BytesIO):
            self._cold.close()

    # --- recovery ----------------------------------------------------------

    @classmethod
    def replay(cls, data: bytes, path: Optional[str] = None, cold_after: int = COLD_AFTER_BLOCKS) -> 'FlatStore':
        """Rebuild a store from WAL bytes, stopping at the last complete block"""
        scan = scan_wal(data)
        store = cls.__new__(cls)
        store.hot, store._cold_index, store._touched = {}, {}, {}
        store._cold = io.BytesIO()
        store.cold_after = cold_after
        store.last_height, store.next_seq, store.commitment_value = -1, 0, 0
        store.failed, store.cold_reads = False, 0

        block, block_height, durable_end = [], None, 0
        for record, offset in zip(scan.records, scan.offsets):
            if block_height is not None and record.height != block_height:
                raise WalCorruptionError(f"height {record.height} inside block {block_height}", offset)
            block_height = record.height
            if record.kind == WalKind.WRITE:
                block.append((record, offset))
                continue
            if record.height <= store.last_height:
                raise WalCorruptionError(f"height {record.height} replayed twice", offset)
            for write, write_offset in block:
                loc = Location.decode(write.key)
                current = store.hot.get(loc, 0)
                old = int.from_bytes(write.old_value, 'big') if write.old_value is not None else 0
                if old != current:
                    raise WalCorruptionError(f"old value for {loc} does not chain", write_offset)
                new = int.from_bytes(write.new_value, 'big') if write.new_value is not None else 0
                store._set(loc, old, new, record.height)
            store.last_height = record.height
            store.next_seq = record.seq + 1
            durable_end = offset + len(encode_record(record))
            block, block_height = [], None

        if block or not scan.clean:
            logger.warning(f"WAL replay discarded an incomplete block after offset {durable_end}")
        if path is not None:
            with open(path, 'r+b') as fh:
                fh.truncate(durable_end)
        store.wal = WalWriter(path, data[:durable_end] if path is None else b'')
        logger.info(f"Replayed WAL to height {store.last_height} ({len(store)} entries)")
        return store


def dump_wal(data: bytes):
    """Text lines for every record, grouped by height marker; flags a torn tail"""
    scan = scan_wal(data)
    lines = []
    writes = 0
    for record, offset in zip(scan.records, scan.offsets):
        if record.kind == WalKind.HEIGHT_MARKER:
            lines.append(f"== height {record.height}: {writes} writes (seq {record.seq})")
            writes = 0
            continue
        writes += 1
        loc = Location.decode(record.key)
        old = record.old_value.hex() if record.old_value is not None else '-'
        new = record.new_value.hex() if record.new_value is not None else '-'
        lines.append(f"  seq={record.seq} height={record.height} @{offset} {loc} old={old} new={new}")
    if scan.torn_offset is not None:
        lines.append(f"torn-tail at offset {scan.torn_offset}")
    return lines


# ---------------------------------------------------------------------------
# Car archive
# ---------------------------------------------------------------------------

class CarArchive:
    """Per-replica store of received cars, keyed by digest"""

    def __init__(self):
        self._by_digest = {}
        self.size_bytes = 0

    def put(self, car: Car):
        if car.digest not in self._by_digest:
            self._by_digest[car.digest] = car
            self.size_bytes += len(encode_car(car.lane, car.pos, car.parent_ref, car.batch))

    def get(self, car_digest: bytes) -> Optional[Car]:
        return self._by_digest.get(car_digest)

    def __contains__(self, car_digest):
        return car_digest in self._by_digest

    def __len__(self):
        return len(self._by_digest)

# services/lane_service.py
"""Data-dissemination lanes.

Every replica owns one lane and proposes cars on it. Voters sign a car only
when it extends the last car they voted for in that lane, and f+1 signatures
make a Proof of Availability. A certified tip vouches for the whole lane
prefix below it, because each signer holds that prefix.
"""

from __future__ import annotations

import bisect
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional

from loguru import logger

from config import CAR_BATCH_CAP, FETCH_MAX_ROUNDS, FETCH_TIMEOUT_MS
from exceptions import FetchExhaustedError
from models import (ZERO_DIGEST, Car, CarVote, FetchRequest, FetchResponse, LaneTip, PoACert,
                    Signature, TipRef)
from services.codec_service import car_digest_matches, make_car
from services.crypto_service import KeyRegistry, digest_parts, verify_distinct
from services.storage_service import CarArchive


def car_vote_message(lane: int, pos: int, car_digest: bytes) -> bytes:
    return digest_parts(b'car-vote', lane.to_bytes(4, 'big'), pos.to_bytes(8, 'big'), car_digest)


def assemble_poa(votes, car_digest: bytes, lane: int, pos: int, registry: KeyRegistry, f: int) -> Optional[PoACert]:
    """PoA from the valid, distinct-signer votes, or None below f+1"""
    msg = car_vote_message(lane, pos, car_digest)
    valid = {}
    for sig in votes:
        if sig.signer not in valid and registry.verify(sig, msg):
            valid[sig.signer] = sig
    if len(valid) < f + 1:
        return None
    return PoACert(car_digest, tuple(valid[s] for s in sorted(valid)))


def verify_poa(registry: KeyRegistry, tip: TipRef, f: int) -> bool:
    if tip.poa.car_digest != tip.car_digest:
        return False
    msg = car_vote_message(tip.lane, tip.pos, tip.car_digest)
    return len(verify_distinct(registry, tip.poa.votes, msg)) >= f + 1


def tip_ref(tip: LaneTip) -> TipRef:
    return TipRef(tip.car.lane, tip.car.pos, tip.car.digest, tip.poa)


# ---------------------------------------------------------------------------
# Lane owner
# ---------------------------------------------------------------------------

class LaneOwner:
    def __init__(self, lane: int, registry: KeyRegistry, f: int, batch_cap: int = CAR_BATCH_CAP):
        self.lane = lane
        self.registry = registry
        self.f = f
        self.batch_cap = batch_cap
        self.pending = deque()
        self.cars = {}  # pos -> [Car, ...]; more than one only when equivocating
        self.next_pos = 0
        self.head = ZERO_DIGEST
        self.tip: Optional[LaneTip] = None
        self.heartbeats = 0
        self._votes = {}  # car digest -> {signer: Signature}
        self._certified = set()

    def submit(self, raw: bytes, front=False):
        if front:
            self.pending.appendleft(raw)
        else:
            self.pending.append(raw)

    def take_batch(self):
        batch = []
        while self.pending and len(batch) < self.batch_cap:
            batch.append(self.pending.popleft())
        return batch

    def propose_car(self, batch) -> Car:
        car = make_car(self.lane, self.next_pos, self.head, batch)
        self.cars.setdefault(car.pos, []).append(car)
        self.next_pos += 1
        self.head = car.digest
        if not car.batch:
            self.heartbeats += 1
        return car

    def propose_conflicting(self, batch) -> Optional[Car]:
        """A second car at the last proposed position, on the same parent"""
        if self.next_pos == 0:
            return None
        first = self.cars[self.next_pos - 1][0]
        car = make_car(self.lane, first.pos, first.parent_ref, batch)
        if car.digest == first.digest:
            return None
        self.cars[car.pos].append(car)
        return car

    def cars_between(self, from_pos, to_pos):
        return [self.cars[p][0] for p in range(from_pos, to_pos + 1) if p in self.cars]

    def on_vote(self, vote: CarVote) -> Optional[TipRef]:
        """Collect a vote; returns the new tip when this vote completes a PoA"""
        if vote.lane != self.lane:
            return None
        for car in self.cars.get(vote.pos, ()):
            if not self.registry.verify(vote.sig, car_vote_message(self.lane, car.pos, car.digest)):
                continue
            bucket = self._votes.setdefault(car.digest, {})
            bucket[vote.sig.signer] = vote.sig
            if car.digest in self._certified or len(bucket) < self.f + 1:
                return None
            poa = assemble_poa(bucket.values(), car.digest, self.lane, car.pos, self.registry, self.f)
            if poa is None:
                return None
            self._certified.add(car.digest)
            if self.tip is None or car.pos > self.tip.car.pos:
                self.tip = LaneTip(car, poa)
                return tip_ref(self.tip)
            return None
        return None


# ---------------------------------------------------------------------------
# Voter
# ---------------------------------------------------------------------------

@dataclass
class VoteOutcome:
    votes: list = field(default_factory=list)  # (Car, Signature) pairs, in vote order
    rejected: Optional[str] = None
    sync: Optional[tuple] = None  # (lane, from_pos, to_pos)


class LaneVoter:
    """Per-replica voting state across all lanes"""

    def __init__(self, replica_id: int, signer, archive: CarArchive):
        self.replica_id = replica_id
        self.signer = signer
        self.archive = archive
        self.last_pos = {}
        self.last_digest = {}
        self.voted = {}  # (lane, pos) -> car digest
        self.buffered = {}
        self.rejections = Counter()

    def vote_on_car(self, car: Car) -> VoteOutcome:
        outcome = VoteOutcome()
        reason = self._check(car)
        if reason == 'gap':
            self.buffered.setdefault(car.lane, {}).setdefault(car.pos, car)
            expected = self.last_pos.get(car.lane, -1) + 1
            outcome.sync = (car.lane, expected, car.pos - 1)
        if reason is not None:
            self.rejections[reason] += 1
            outcome.rejected = reason
            return outcome

        self._vote(car, outcome)
        waiting = self.buffered.get(car.lane, {})
        while True:
            nxt = waiting.pop(self.last_pos[car.lane] + 1, None)
            if nxt is None:
                break
            reason = self._check(nxt)
            if reason is not None:
                self.rejections[reason] += 1
                break
            self._vote(nxt, outcome)
        return outcome

    def _check(self, car: Car) -> Optional[str]:
        if not car_digest_matches(car):
            return 'bad digest'
        seen = self.voted.get((car.lane, car.pos))
        if seen is not None:
            return 'duplicate' if seen == car.digest else 'equivocation'
        expected = self.last_pos.get(car.lane, -1) + 1
        if car.pos > expected:
            return 'gap'
        if car.pos < expected:
            return 'stale'
        if car.parent_ref != self.last_digest.get(car.lane, ZERO_DIGEST):
            return 'parent mismatch'
        return None

    def _vote(self, car: Car, outcome: VoteOutcome):
        # the batch is stored before the vote leaves
        self.archive.put(car)
        sig: Signature = self.signer.sign(car_vote_message(car.lane, car.pos, car.digest))
        self.voted[(car.lane, car.pos)] = car.digest
        self.last_pos[car.lane] = car.pos
        self.last_digest[car.lane] = car.digest
        outcome.votes.append((car, sig))


# ---------------------------------------------------------------------------
# Known certified tips
# ---------------------------------------------------------------------------

class TipTracker:
    """Highest certified tip per lane, with the time each position became known"""

    def __init__(self, n: int, registry: KeyRegistry, f: int):
        self.n = n
        self.registry = registry
        self.f = f
        self.tips = [None] * n
        self._history = [([], []) for _ in range(n)]  # per lane: positions, first-known times
        self._verified = set()

    def verify(self, tip: TipRef) -> bool:
        key = (tip.lane, tip.pos, tip.car_digest, tip.poa.signers)
        if key in self._verified:
            return True
        if not 0 <= tip.lane < self.n or not verify_poa(self.registry, tip, self.f):
            return False
        self._verified.add(key)
        return True

    def observe(self, tip: TipRef, now_ms: float) -> bool:
        """Record tip if it is certified and higher than the known one"""
        current = self.tips[tip.lane] if 0 <= tip.lane < self.n else None
        if current is not None and tip.pos <= current.pos:
            return False
        if not self.verify(tip):
            return False
        self.tips[tip.lane] = tip
        positions, times = self._history[tip.lane]
        positions.append(tip.pos)
        times.append(now_ms)
        return True

    def snapshot(self):
        return tuple(self.tips)

    def positions(self):
        return tuple(t.pos if t is not None else -1 for t in self.tips)

    def overdue(self, lane: int, cut_pos: int, now_ms: float, grace_ms: float) -> bool:
        """True when a tip above cut_pos has been known for at least grace_ms"""
        positions, times = self._history[lane]
        i = bisect.bisect_right(positions, cut_pos)
        return i < len(positions) and now_ms - times[i] >= grace_ms


# ---------------------------------------------------------------------------
# Fetching missing cars
# ---------------------------------------------------------------------------

@dataclass
class _FetchState:
    candidates: list
    attempt: int = 0


class Fetcher:
    """Retrieves cars from PoA signers, one signer at a time, in ascending id order.

    Each unanswered request times out and moves on to the next signer; the
    timeout doubles after every full pass over the candidates.
    """

    def __init__(self, replica_id: int, archive: CarArchive, timeout_ms=FETCH_TIMEOUT_MS,
                 max_rounds=FETCH_MAX_ROUNDS):
        self.replica_id = replica_id
        self.archive = archive
        self.timeout_ms = timeout_ms
        self.max_rounds = max_rounds
        self.pending = {}
        self.requests = 0
        self.fetched = 0

    def fetch_missing(self, ctx, car_digest: bytes, signers) -> Optional[Car]:
        car = self.archive.get(car_digest)
        if car is not None:
            return car
        if car_digest in self.pending:
            return None
        candidates = [s for s in sorted(signers) if s != self.replica_id]
        if not candidates:
            raise FetchExhaustedError(f"no signer other than {self.replica_id} holds car {car_digest.hex()[:12]}")
        self.pending[car_digest] = _FetchState(candidates)
        ctx.trace('fetch', car=car_digest.hex())
        self._ask(ctx, car_digest)
        return None

    def _ask(self, ctx, car_digest):
        state = self.pending[car_digest]
        target = state.candidates[state.attempt % len(state.candidates)]
        rounds = state.attempt // len(state.candidates)
        self.requests += 1
        ctx.send(target, FetchRequest(car_digest))
        ctx.set_timer(self.timeout_ms * (2 ** min(rounds, 6)), ('fetch', car_digest, state.attempt))

    def on_timer(self, ctx, car_digest, attempt):
        state = self.pending.get(car_digest)
        if state is None or state.attempt != attempt:
            return
        state.attempt += 1
        if state.attempt >= self.max_rounds * len(state.candidates):
            raise FetchExhaustedError(
                f"car {car_digest.hex()[:12]} unavailable after {state.attempt} requests to {state.candidates}")
        logger.debug(f"Replica {self.replica_id} retrying fetch of {car_digest.hex()[:12]}")
        self._ask(ctx, car_digest)

    def on_response(self, response: FetchResponse) -> Optional[Car]:
        car = response.car
        if car.digest not in self.pending or not car_digest_matches(car):
            return None
        self.archive.put(car)
        del self.pending[car.digest]
        self.fetched += 1
        return car

    def serve(self, request: FetchRequest) -> Optional[FetchResponse]:
        car = self.archive.get(request.car_digest)
        return FetchResponse(car) if car is not None else None

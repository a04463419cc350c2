# services/crypto_service.py
"""Simulated authentication.

Digests are SHA-256. Signatures are HMAC-SHA256 tags keyed by a per-signer
32-byte secret derived from the run seed. Only the owning signer and the
verifier registry ever see a secret.
"""

import hashlib
import hmac

from exceptions import UnknownSignerError
from models import SIGNATURE_LEN, Signature

DIGEST_LEN = 32
TX_SIG_RECOVERY_BYTE = 0x1B


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_parts(*parts: bytes) -> bytes:
    """Digest of length-framed parts, so (a, bc) and (ab, c) never collide"""
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, 'big'))
        h.update(part)
    return h.digest()


def derive_secret(seed: int, domain: str, index: int) -> bytes:
    return digest_parts(b'tipcut-secret', domain.encode(), seed.to_bytes(8, 'big'), index.to_bytes(8, 'big'))


def replica_address(replica_id: int) -> bytes:
    """Account address a replica uses as sender of its system transactions"""
    return digest_parts(b'replica-address', replica_id.to_bytes(4, 'big'))[-20:]


class KeyRegistry:
    """Verifier registry for replica keys.

    A replica's secret is handed out once, to its own Signer, via signer_for().
    """

    def __init__(self, n, seed):
        self.n = n
        self.seed = seed
        self._secrets = {r: derive_secret(seed, 'replica', r) for r in range(n)}

    def signer_for(self, replica_id):
        if replica_id not in self._secrets:
            raise UnknownSignerError(f"replica {replica_id} is not registered")
        return Signer(replica_id, self._secrets[replica_id])

    def sign(self, signer, msg: bytes) -> Signature:
        return self.signer_for(signer).sign(msg)

    def verify(self, sig: Signature, msg: bytes) -> bool:
        secret = self._secrets.get(sig.signer)
        if secret is None:
            return False
        expected = hmac.new(secret, _signed_payload(sig.signer, msg), hashlib.sha256).digest()
        return hmac.compare_digest(expected, sig.tag)


class Signer:
    def __init__(self, replica_id, secret):
        self.replica_id = replica_id
        self._secret = secret

    def sign(self, msg: bytes) -> Signature:
        tag = hmac.new(self._secret, _signed_payload(self.replica_id, msg), hashlib.sha256).digest()
        return Signature(self.replica_id, tag)


def _signed_payload(signer, msg):
    return signer.to_bytes(4, 'big') + msg


def verify_distinct(registry: KeyRegistry, sigs, msg: bytes):
    """Signers of the valid signatures in sigs, each counted once"""
    seen = set()
    for sig in sigs:
        if sig.signer in seen:
            continue
        if registry.verify(sig, msg):
            seen.add(sig.signer)
    return seen


# ---------------------------------------------------------------------------
# Client (account) keys
# ---------------------------------------------------------------------------

class ClientKey:
    def __init__(self, secret: bytes):
        self._secret = secret
        self.address = digest_parts(b'client-address', secret)[-20:]

    @classmethod
    def derive(cls, seed, index):
        return cls(derive_secret(seed, 'client', index))

    def sign_digest(self, signing_digest: bytes) -> bytes:
        tag = hmac.new(self._secret, signing_digest, hashlib.sha256).digest()
        check = hmac.new(self._secret, tag, hashlib.sha256).digest()
        return tag + check + bytes([TX_SIG_RECOVERY_BYTE])

    def secret(self):
        return self._secret


class ClientRegistry:
    """Maps account addresses to client secrets for signature verification"""

    def __init__(self, keys=()):
        self._by_address = {}
        for key in keys:
            self.register(key)

    def register(self, key: ClientKey):
        self._by_address[key.address] = key.secret()

    def __contains__(self, address):
        return address in self._by_address

    def verify(self, address: bytes, signing_digest: bytes, signature: bytes) -> bool:
        secret = self._by_address.get(address)
        if secret is None or len(signature) != SIGNATURE_LEN:
            return False
        tag = hmac.new(secret, signing_digest, hashlib.sha256).digest()
        check = hmac.new(secret, tag, hashlib.sha256).digest()
        expected = tag + check + bytes([TX_SIG_RECOVERY_BYTE])
        return hmac.compare_digest(expected, signature)

"""
sigs.py

Hash-based one-time signatures (Lamport) used for shard serials and coin descriptors.

A private key holds one pair of 32-byte secrets per bit of the SHA-256 message digest.
The public key is the table of their hashes, 2 x 256 entries in secret order. A signature
reveals, for every digest bit, the secret matching the bit; the verifier hashes each
revealed secret and compares it with the table entry the bit selects.
"""
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

SCHEME_ID = "lamport-sha256"
DIGEST_BITS = 256
SECRET_SIZE = 32
PRIVATE_KEY_SIZE = DIGEST_BITS * 2 * SECRET_SIZE
PUBLIC_KEY_SIZE = PRIVATE_KEY_SIZE
SIGNATURE_SIZE = DIGEST_BITS * SECRET_SIZE


class SignatureMisuseError(RuntimeError):
    """Raised when a one-time key is asked to sign a second, different message."""


class _OneTimeGuard:
    """Compare-and-set record of the single digest a key may sign."""

    def __init__(self):
        self._lock = threading.Lock()
        self._digest: Optional[bytes] = None

    def claim(self, digest: bytes):
        with self._lock:
            if self._digest is None:
                self._digest = digest
            elif self._digest != digest:
                raise SignatureMisuseError("one-time key already signed a different message")

    @property
    def used(self) -> bool:
        return self._digest is not None


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    public_key: bytes
    scheme_id: str = SCHEME_ID
    _guard: _OneTimeGuard = field(default_factory=_OneTimeGuard, repr=False, compare=False)

    @property
    def used(self) -> bool:
        return self._guard.used


@dataclass(frozen=True)
class Signature:
    data: bytes
    scheme_id: str = SCHEME_ID

    def hex(self) -> str:
        return self.data.hex()

    @classmethod
    def from_hex(cls, text: str, scheme_id: str = SCHEME_ID) -> "Signature":
        return cls(bytes.fromhex(text), scheme_id)


def _h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _digest_bits(message: bytes):
    digest = _h(message)
    value = int.from_bytes(digest, "big")
    return digest, [(value >> (DIGEST_BITS - 1 - i)) & 1 for i in range(DIGEST_BITS)]


def derive_public_key(private_key: bytes) -> bytes:
    if len(private_key) != PRIVATE_KEY_SIZE:
        raise ValueError(f"private key must be {PRIVATE_KEY_SIZE} bytes")
    return b"".join(_h(private_key[i:i + SECRET_SIZE]) for i in range(0, PRIVATE_KEY_SIZE, SECRET_SIZE))


def keygen(n: int, rng: np.random.Generator) -> KeyPair:
    """
    Generate a fresh one-time key pair.

    Args:
        n (int): security parameter; must be at least 4.
        rng (np.random.Generator): source of the key material.

    Returns:
        KeyPair
    """
    if n < 4:
        raise ValueError(f"security parameter must be at least 4, got {n}")
    master = rng.bytes(SECRET_SIZE)
    private_key = b"".join(_h(master + i.to_bytes(2, "big")) for i in range(2 * DIGEST_BITS))
    return KeyPair(private_key, derive_public_key(private_key))


def sign(key: KeyPair, message: bytes) -> Signature:
    digest, bits = _digest_bits(message)
    key._guard.claim(digest)
    parts = [key.private_key[(2 * i + b) * SECRET_SIZE:(2 * i + b + 1) * SECRET_SIZE]
             for i, b in enumerate(bits)]
    return Signature(b"".join(parts), key.scheme_id)


def verify_sig(public_key: bytes, message: bytes, signature: Union[Signature, bytes]) -> bool:
    """Accept iff the signature opens the right preimages; malformed input is a rejection."""
    if isinstance(signature, Signature):
        if signature.scheme_id != SCHEME_ID:
            return False
        data = signature.data
    elif isinstance(signature, (bytes, bytearray)):
        data = bytes(signature)
    else:
        return False
    if (len(data) != SIGNATURE_SIZE or not isinstance(public_key, (bytes, bytearray))
            or len(public_key) != PUBLIC_KEY_SIZE):
        return False

    _, bits = _digest_bits(message)
    for i, b in enumerate(bits):
        entry = (2 * i + b) * SECRET_SIZE
        if _h(data[i * SECRET_SIZE:(i + 1) * SECRET_SIZE]) != bytes(public_key[entry:entry + SECRET_SIZE]):
            return False
    return True

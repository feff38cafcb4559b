"""
minischeme.py

The hidden-subspace mini-scheme: an in-process oracle registry standing in for the
classical oracle, the state generator G(r), the serial verifier H(s), Mint_M, Verify_M,
the double verifier and the Count procedure.

The registry is the only holder of the secret subspaces. Protocol code reaches them
through verify_serial and verify_m, both of which are metered per caller. The lab_*
helpers and export_registry exist for experiments and debugging only.
"""
import hashlib
import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from gf2 import MAX_DIM, BitVec, CapacityError, DimensionError, Subspace, from_hex_rows, \
    sample_subspace, to_hex_rows
from qsim import MeasurementOutcome, QuantumState, build_subspace_state, verify_state
from sigs import Signature

logger = logging.getLogger(__name__)

STAGE_FORM = "form"
STAGE_SERIAL = "serial"
STAGE_QUANTUM = "quantum"


class SerialFormatError(ValueError):
    """Raised for a serial number of the wrong length or encoding."""


class SerialCollisionError(RuntimeError):
    """Two different r values derived the same serial; the minter draws a fresh r."""


@dataclass(frozen=True)
class Serial:
    value: int
    length: int

    def __post_init__(self):
        if self.length <= 0 or not 0 <= self.value < (1 << self.length):
            raise SerialFormatError(f"serial {self.value} does not fit in {self.length} bits")

    def hex(self) -> str:
        return format(self.value, f"0{(self.length + 3) // 4}x")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes((self.length + 7) // 8, "big")

    @classmethod
    def from_hex(cls, text: str, length: int) -> "Serial":
        try:
            value = int(text, 16)
        except (TypeError, ValueError):
            raise SerialFormatError(f"malformed serial hex {text!r}") from None
        return cls(value, length)

    @classmethod
    def from_bytes(cls, data: bytes, length: int) -> "Serial":
        if len(data) != (length + 7) // 8:
            raise SerialFormatError(f"serial must be {(length + 7) // 8} bytes, got {len(data)}")
        return cls(int.from_bytes(data, "big"), length)


@dataclass(frozen=True)
class ShardCandidate:
    serial: Serial
    state: QuantumState


@dataclass(frozen=True)
class QuantumShard:
    serial: Serial
    state: QuantumState
    signature: Signature
    mint_time: int


def _derive_serial(seed: bytes, r: int, n: int) -> int:
    """First 3n bits of a keyed hash of r."""
    h = hashlib.blake2b(r.to_bytes(3, "big"), key=seed, person=b"qb-serial", digest_size=8)
    return int.from_bytes(h.digest(), "big") >> (64 - 3 * n)


def _derive_subspace(seed: bytes, r: int, n: int) -> Subspace:
    h = hashlib.blake2b(r.to_bytes(3, "big"), key=seed, person=b"qb-subspace", digest_size=16)
    return sample_subspace(n, n // 2, np.random.default_rng(int.from_bytes(h.digest(), "big")))


class OracleRegistry:
    """
    Trusted oracle table keyed by a public 256-bit genesis seed.

    Maps every registered serial to (r, A_r). Mints serialize on a lock; lookups and
    query counting go through the same lock so counts are never lost.
    """

    def __init__(self, seed: bytes, n: int):
        if len(seed) != 32:
            raise ValueError("registry seed must be 32 bytes")
        if n % 2 or not 4 <= n <= MAX_DIM:
            raise DimensionError(f"n must be even and within [4, {MAX_DIM}], got {n}")
        self.seed = bytes(seed)
        self.n = n
        self.query_counter: Counter = Counter()
        self._table: Dict[int, Tuple[Optional[int], Subspace]] = {}
        self._used_r: set = set()
        self._burned_r: set = set()
        self._lock = threading.Lock()

    @classmethod
    def from_rng(cls, rng: np.random.Generator, n: int) -> "OracleRegistry":
        return cls(rng.bytes(32), n)

    @property
    def serial_bits(self) -> int:
        return 3 * self.n

    def __len__(self):
        return len(self._table)

    def queries(self, caller: str = "default") -> int:
        return self.query_counter[caller]

    def _meter(self, caller: str):
        with self._lock:
            self.query_counter[caller] += 1

    def _subspace_for(self, serial: Serial) -> Optional[Subspace]:
        entry = self._table.get(serial.value)
        return entry[1] if entry else None


def generate_state(registry: OracleRegistry, r: BitVec) -> Tuple[Serial, Subspace]:
    """
    G(r): derive and register (s_r, A_r).

    Deterministic in (seed, r). Raises SerialCollisionError when a different r already
    owns the derived serial.
    """
    if r.n != registry.n:
        raise DimensionError(f"r must have {registry.n} bits, got {r.n}")
    value = _derive_serial(registry.seed, r.value, registry.n)
    with registry._lock:
        existing = registry._table.get(value)
        if existing is not None:
            if existing[0] != r.value:
                raise SerialCollisionError(f"serial {value:x} already belongs to another r")
            return Serial(value, registry.serial_bits), existing[1]
        A = _derive_subspace(registry.seed, r.value, registry.n)
        registry._table[value] = (r.value, A)
        registry._used_r.add(r.value)
    return Serial(value, registry.serial_bits), A


def verify_serial(registry: OracleRegistry, s: Serial, caller: str = "default") -> bool:
    """H(s): true iff s is a registered serial. Counts one oracle query."""
    if not isinstance(s, Serial) or s.length != registry.serial_bits:
        raise SerialFormatError(f"serial must be {registry.serial_bits} bits")
    registry._meter(caller)
    return s.value in registry._table


def mint_m(registry: OracleRegistry, n: int, rng: np.random.Generator) -> ShardCandidate:
    """
    Mint_M: draw a fresh r, derive (s, A) and prepare |A>.

    r and A never leave the registry. Collisions and already used r values are
    resampled.
    """
    if n != registry.n:
        raise DimensionError(f"registry was built for n={registry.n}, got n={n}")
    while True:
        if len(registry._used_r) + len(registry._burned_r) >= (1 << n):
            raise CapacityError(f"all {1 << n} values of r are used")
        r = int(rng.integers(0, 1 << n))
        if r in registry._used_r or r in registry._burned_r:
            continue
        try:
            serial, A = generate_state(registry, BitVec(r, n))
        except SerialCollisionError as e:
            logger.warning(f"[Oracle] {e}; drawing a fresh r")
            registry._burned_r.add(r)
            continue
        return ShardCandidate(serial, build_subspace_state(A))


def _well_formed(registry: OracleRegistry, candidate) -> bool:
    serial = getattr(candidate, "serial", None)
    state = getattr(candidate, "state", None)
    return (isinstance(serial, Serial) and serial.length == registry.serial_bits
            and isinstance(state, QuantumState) and state.n == registry.n
            and not state.is_zero)


def verify_m(registry: OracleRegistry, candidate, rng: np.random.Generator,
             caller: str = "default") -> MeasurementOutcome:
    """
    Verify_M: form check, serial check, then a sampled V_A measurement.

    Every failure is a rejection labelled with its stage; the quantum state is only
    touched when the classical checks pass.
    """
    if not isinstance(rng, np.random.Generator):
        raise TypeError("verify_m measures; pass a numpy Generator")
    state = getattr(candidate, "state", None)
    if not _well_formed(registry, candidate):
        if not isinstance(state, QuantumState):
            state = QuantumState.zero(registry.n)
        return MeasurementOutcome(False, 0.0, state, STAGE_FORM)

    if not verify_serial(registry, candidate.serial, caller):
        return MeasurementOutcome(False, 0.0, state, STAGE_SERIAL)

    registry._meter(caller)
    outcome = verify_state(registry._subspace_for(candidate.serial), state, rng)
    if not outcome.accepted:
        return MeasurementOutcome(False, outcome.probability, outcome.post_state, STAGE_QUANTUM)
    return outcome


def verify_2(registry: OracleRegistry, s: Serial, rho1: QuantumState, rho2: QuantumState,
             rng: np.random.Generator, caller: str = "default") -> bool:
    """Double verifier: both alleged copies must pass Verify_M, run one after the other."""
    first = verify_m(registry, ShardCandidate(s, rho1), rng, caller)
    if not first.accepted:
        return False
    return verify_m(registry, ShardCandidate(s, rho2), rng, caller).accepted


def count_accepting(registry: OracleRegistry, candidates: Iterable, rng: np.random.Generator,
                    caller: str = "default") -> int:
    """Count: how many of the alleged coins Verify_M accepts, evaluated in order."""
    return sum(1 for c in candidates if verify_m(registry, c, rng, caller).accepted)


# --- Lab namespace ---

def lab_lookup_subspace(registry: OracleRegistry, serial: Serial) -> Subspace:
    A = registry._subspace_for(serial)
    if A is None:
        raise KeyError(f"serial {serial.hex()} is not registered")
    return A


def lab_prepare_state(registry: OracleRegistry, serial: Serial) -> QuantumState:
    """A fresh copy of |A_s>, as only the registry could prepare it."""
    return build_subspace_state(lab_lookup_subspace(registry, serial))


def lab_recorded_r(registry: OracleRegistry, serial: Serial) -> Optional[int]:
    entry = registry._table.get(serial.value)
    return entry[0] if entry else None


def registry_records(registry: OracleRegistry) -> List[dict]:
    with registry._lock:
        items = sorted(registry._table.items())
    width = (registry.serial_bits + 3) // 4
    return [{"serial": format(value, f"0{width}x"), "rows": to_hex_rows(A)} for value, (_, A) in items]


def export_registry(registry: OracleRegistry, path: Optional[str] = None) -> str:
    """JSON-lines of (serial hex, basis rows); debugging and CLI persistence only."""
    header = {"n": registry.n, "seed": registry.seed.hex()}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(rec, sort_keys=True) for rec in registry_records(registry)]
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
        logger.info(f"[Oracle] Exported {len(registry)} serials to {path}")
    return text


def import_registry(text: str) -> OracleRegistry:
    """Rebuild a registry from export_registry output; recorded r values are not kept."""
    lines = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not lines or "n" not in lines[0]:
        raise ValueError("registry export has no header line")
    header = lines[0]
    registry = OracleRegistry(bytes.fromhex(header["seed"]), int(header["n"]))
    for rec in lines[1:]:
        serial = Serial.from_hex(rec["serial"], registry.serial_bits)
        registry._table[serial.value] = (None, from_hex_rows(rec["rows"], registry.n))
    return registry

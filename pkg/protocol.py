"""
protocol.py

The Quantum Bitcoin scheme on top of the mini-scheme, the signatures and the ledger:
naive single-ledger mint/verify, two-stage shard -> coin minting, composite verification
with the (1 - epsilon - lambda) * m threshold, and the custody layer that keeps exactly
one live handle per coin.
"""
import json
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

import ledger
import minischeme
import sigs
from config import MINT_RETRY_LIMIT, ProtocolConfig
from ledger import Chain, Block, LedgerEntry, Tag, DuplicateSerialError, NotFoundError
from marketplace import Marketplace
from minischeme import OracleRegistry, QuantumShard, Serial
from qsim import QuantumState, load_state, state_records
from sigs import KeyPair, Signature

logger = logging.getLogger(__name__)

STAGE_FORM = "form"
STAGE_LOOKUP = "lookup"
STAGE_SIGNATURE = "signature"
STAGE_QUANTUM = "quantum"
STAGE_DESCRIPTOR_LOOKUP = "descriptor_lookup"
STAGE_DESCRIPTOR_SIGNATURE = "descriptor_signature"
STAGE_SHARD_LOOKUP = "shard_lookup"
STAGE_SHARD_SIGNATURE = "shard_signature"
STAGE_CUSTODY = "custody"

WALLET_HELD = "held"
WALLET_MOVED = "moved"


class ProtocolError(RuntimeError):
    pass


class InsufficientFreshShardsError(ProtocolError):
    pass


class SupplyCapReachedError(ProtocolError):
    pass


class CustodyViolationError(ProtocolError):
    pass


class MintRetryExhaustedError(ProtocolError):
    pass


@dataclass
class QuantumBitcoin:
    shards: List[QuantumShard]
    descriptor_signature: Signature

    @property
    def descriptor(self) -> Tuple[Serial, ...]:
        return tuple(s.serial for s in self.shards)

    @property
    def descriptor_bytes(self) -> bytes:
        return ledger.encode_descriptor([s.to_bytes() for s in self.descriptor])


@dataclass
class ShardResult:
    serial: str
    accepted: bool
    probability: float
    stage: Optional[str] = None


@dataclass
class VerifyReport:
    accepted: bool
    stage: Optional[str] = None
    passes: int = 0
    required: int = 0
    shards: List[ShardResult] = field(default_factory=list)
    detail: str = ""

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "stage": self.stage, "passes": self.passes,
                "required": self.required, "detail": self.detail,
                "shards": [vars(s) for s in self.shards]}


# --- Custody ---

class CustodyToken:
    """Exclusive handle to a coin's quantum states; consumed by transfer or release."""

    def __init__(self, coin: QuantumBitcoin, owner_label: str, vault: "Vault"):
        self._coin = coin
        self.owner_label = owner_label
        self._vault = vault
        self._consumed = False

    @property
    def live(self) -> bool:
        return not self._consumed

    @property
    def coin(self) -> QuantumBitcoin:
        if self._consumed:
            raise CustodyViolationError("token was consumed by a transfer")
        return self._coin

    def __repr__(self):
        return f"CustodyToken(owner={self.owner_label!r}, live={self.live})"


class Vault:
    """Registry of live custody tokens keyed by coin descriptor; at most one per coin."""

    def __init__(self):
        self._live = {}
        self._lock = threading.Lock()

    def issue(self, coin: QuantumBitcoin, owner_label: str) -> CustodyToken:
        key = coin.descriptor_bytes
        with self._lock:
            if key in self._live:
                raise CustodyViolationError("coin already has a live custody token")
            token = CustodyToken(coin, owner_label, self)
            self._live[key] = token
        logger.info(f"[Custody] Issued token for coin to {owner_label!r}")
        return token

    def _claim(self, token: CustodyToken) -> bytes:
        key = token._coin.descriptor_bytes
        if token._consumed or self._live.get(key) is not token:
            raise CustodyViolationError("token is not live")
        token._consumed = True
        return key

    def transfer(self, token: CustodyToken, new_owner_label: str) -> CustodyToken:
        with self._lock:
            key = self._claim(token)
            fresh = CustodyToken(token._coin, new_owner_label, self)
            self._live[key] = fresh
        logger.info(f"[Custody] {token.owner_label!r} -> {new_owner_label!r}")
        return fresh

    def release(self, token: CustodyToken) -> QuantumBitcoin:
        """Consume the token and forget the coin; the caller now holds the only copy."""
        with self._lock:
            key = self._claim(token)
            del self._live[key]
        logger.info(f"[Custody] Released coin held by {token.owner_label!r}")
        return token._coin

    def live_tokens(self) -> int:
        with self._lock:
            return len(self._live)


def _next_timestamp(chain: Chain, config: ProtocolConfig, now: Optional[int]) -> int:
    return chain.tip.timestamp + config.t_block if now is None else now


def keygen_q(config: ProtocolConfig, rng: np.random.Generator) -> KeyPair:
    return sigs.keygen(config.n, rng)


def mint_naive(chain: Chain, registry: OracleRegistry, config: ProtocolConfig, rng: np.random.Generator,
               now: Optional[int] = None, parent: Optional[Block] = None,
               competitor: Optional[Callable[[Chain], None]] = None,
               retry_limit: int = MINT_RETRY_LIMIT) -> QuantumShard:
    """
    Naive Mint_Q: key pair, Mint_M, sign the serial, append it to the shard ledger.

    A failed append starts over from Mint_M with a fresh one-time key. The private key is
    dropped once the serial is signed.
    """
    ts = _next_timestamp(chain, config, now)
    for attempt in range(1, retry_limit + 1):
        key = keygen_q(config, rng)
        candidate = minischeme.mint_m(registry, config.n, rng)
        serial_bytes = candidate.serial.to_bytes()
        signature = sigs.sign(key, serial_bytes)
        entry = LedgerEntry(Tag.SHARD, serial_bytes, key.public_key, ts)
        public_key = key.public_key
        del key
        try:
            block = ledger.append(chain, entry, rng, parent=parent, competitor=competitor)
        except DuplicateSerialError as e:
            logger.warning(f"[Mint] Attempt {attempt}: {e}; starting over")
            continue
        logger.info(f"[Mint] Shard {candidate.serial.hex()} sealed in block {block.height} "
                    f"(key {public_key.hex()[:12]})")
        return QuantumShard(candidate.serial, candidate.state, signature, block.timestamp)
    raise MintRetryExhaustedError(f"no unique serial after {retry_limit} attempts")


def _stage_report(stage: str, detail: str, required: int = 0) -> VerifyReport:
    logger.info(f"[Verify] Rejected at {stage}: {detail}")
    return VerifyReport(False, stage, 0, required, [], detail)


def _require_rng(rng, caller: str):
    if not isinstance(rng, np.random.Generator):
        raise TypeError(f"{caller} measures shard states; pass a numpy Generator")


def _serial_of(config: ProtocolConfig, shard) -> Optional[Serial]:
    serial = getattr(shard, "serial", None)
    return serial if isinstance(serial, Serial) and serial.length == 3 * config.n else None


def verify_naive(chain: Chain, registry: OracleRegistry, candidate: QuantumShard,
                 rng: np.random.Generator) -> VerifyReport:
    """Naive Verify_Q: form, ledger lookup, signature, then a sampled Verify_M."""
    _require_rng(rng, "verify_naive")
    serial = getattr(candidate, "serial", None)
    if (not isinstance(serial, Serial) or serial.length != registry.serial_bits
            or not isinstance(getattr(candidate, "signature", None), Signature)
            or not isinstance(getattr(candidate, "state", None), QuantumState)):
        return _stage_report(STAGE_FORM, "malformed coin", 1)
    try:
        public_key, _ = ledger.lookup(chain, Tag.SHARD, serial.to_bytes())
    except NotFoundError as e:
        return _stage_report(STAGE_LOOKUP, str(e), 1)
    if not sigs.verify_sig(public_key, serial.to_bytes(), candidate.signature):
        return _stage_report(STAGE_SIGNATURE, f"bad signature on {serial.hex()}", 1)
    outcome = minischeme.verify_m(registry, candidate, rng)
    result = ShardResult(serial.hex(), outcome.accepted, outcome.probability, outcome.stage)
    if not outcome.accepted:
        logger.info(f"[Verify] Rejected at {outcome.stage}: {serial.hex()}")
        return VerifyReport(False, outcome.stage, 0, 1, [result], "quantum verification failed")
    return VerifyReport(True, None, 1, 1, [result])


def mint_shard(chain: Chain, registry: OracleRegistry, config: ProtocolConfig, marketplace: Marketplace,
               rng: np.random.Generator, now: Optional[int] = None, parent: Optional[Block] = None,
               competitor: Optional[Callable[[Chain], None]] = None) -> QuantumShard:
    """Stage one: mint a shard exactly like mint_naive and offer it on the marketplace."""
    shard = mint_naive(chain, registry, config, rng, now=now, parent=parent, competitor=competitor)
    marketplace.publish(shard)
    return shard


def select_fresh_shards(chain: Chain, registry: OracleRegistry, config: ProtocolConfig,
                        marketplace: Marketplace, now: int, rng: np.random.Generator) -> List[QuantumShard]:
    """
    Oldest-first shards that are on the active shard ledger, no older than T_max and
    accepted by a sampled Verify_M. Accepted shards carry their post-measurement state;
    rejected ones are spent by the measurement and leave the marketplace.
    """
    _require_rng(rng, "select_fresh_shards")
    selected, spoiled = [], []
    for shard in marketplace.oldest_first():
        try:
            _, minted_at = ledger.lookup(chain, Tag.SHARD, shard.serial.to_bytes())
        except NotFoundError:
            logger.debug(f"[Mint] Shard {shard.serial.hex()} is not on the active chain; skipped")
            continue
        if now - minted_at > config.t_max:
            logger.debug(f"[Mint] Shard {shard.serial.hex()} is {now - minted_at} ticks old; skipped")
            continue
        outcome = minischeme.verify_m(registry, shard, rng, caller="buyer")
        if not outcome.accepted:
            logger.warning(f"[Mint] Shard {shard.serial.hex()} failed verification at {outcome.stage}")
            spoiled.append(shard.serial)
            continue
        selected.append(replace(shard, state=outcome.post_state))
        if len(selected) == config.m:
            break
    if spoiled:
        marketplace.take(spoiled)
    return selected


def mint_bitcoin(chain: Chain, registry: OracleRegistry, config: ProtocolConfig, marketplace: Marketplace,
                 rng: np.random.Generator, now: Optional[int] = None, parent: Optional[Block] = None,
                 competitor: Optional[Callable[[Chain], None]] = None, owner_label: str = "miner",
                 vault: Optional[Vault] = None) -> Tuple[QuantumBitcoin, CustodyToken]:
    """
    Stage two: combine m fresh shards into a coin.

    Raises:
        SupplyCapReachedError: the active chain already holds supply_cap coins.
        InsufficientFreshShardsError: fewer than m shards pass the freshness and Verify_M checks.
        DescriptorConflictError: a selected shard was already combined into a coin.
    """
    if ledger.count(chain, Tag.BITCOIN) >= config.supply_cap:
        raise SupplyCapReachedError(f"supply cap of {config.supply_cap} coins reached")
    ts = _next_timestamp(chain, config, now)
    selected = select_fresh_shards(chain, registry, config, marketplace, ts, rng)
    if len(selected) < config.m:
        raise InsufficientFreshShardsError(f"need {config.m} fresh shards, found {len(selected)}")

    descriptor = ledger.encode_descriptor([s.serial.to_bytes() for s in selected])
    key = keygen_q(config, rng)
    sigma0 = sigs.sign(key, descriptor)
    entry = LedgerEntry(Tag.BITCOIN, descriptor, key.public_key, ts)
    del key
    block = ledger.append(chain, entry, rng, parent=parent, competitor=competitor)
    marketplace.take(s.serial for s in selected)

    coin = QuantumBitcoin(selected, sigma0)
    logger.info(f"[Mint] Coin of {config.m} shards sealed in block {block.height}")
    return coin, (vault or Vault()).issue(coin, owner_label)


def verify_q(chain: Chain, registry: OracleRegistry, config: ProtocolConfig, candidate,
             rng: np.random.Generator) -> VerifyReport:
    """
    Composite Verify_Q.

    Classical stages run first (descriptor lookup and signature, then every shard lookup
    and signature) so that forged classical data never costs quantum state. The coin
    passes when at least ceil((1 - epsilon - lambda) * m) shards pass Verify_M. Post-
    measurement states replace the coin's states. Every shard measurement is sampled
    from rng, so a forged state passes only with its true acceptance probability.
    """
    _require_rng(rng, "verify_q")
    required = config.required_passes
    if isinstance(candidate, CustodyToken):
        if not candidate.live:
            return _stage_report(STAGE_CUSTODY, f"token of {candidate.owner_label!r} was consumed", required)
        coin = candidate.coin
    else:
        coin = candidate

    shards = getattr(coin, "shards", None)
    if (not isinstance(coin, QuantumBitcoin) or not isinstance(coin.descriptor_signature, Signature)
            or shards is None or len(shards) != config.m
            or any(_serial_of(config, s) is None or not isinstance(getattr(s, "state", None), QuantumState)
                   or getattr(s, "state").n != config.n for s in shards)):
        return _stage_report(STAGE_FORM, "malformed coin", required)

    descriptor = coin.descriptor_bytes
    try:
        descriptor_key, _ = ledger.lookup(chain, Tag.BITCOIN, descriptor)
    except NotFoundError:
        return _stage_report(STAGE_DESCRIPTOR_LOOKUP, "descriptor not on the coin ledger", required)
    if not sigs.verify_sig(descriptor_key, descriptor, coin.descriptor_signature):
        return _stage_report(STAGE_DESCRIPTOR_SIGNATURE, "bad descriptor signature", required)

    shard_keys = []
    for shard in coin.shards:
        try:
            shard_keys.append(ledger.lookup(chain, Tag.SHARD, shard.serial.to_bytes()).public_key)
        except NotFoundError:
            return _stage_report(STAGE_SHARD_LOOKUP, f"shard {shard.serial.hex()} not on the shard ledger",
                                 required)
    for shard, key in zip(coin.shards, shard_keys):
        if not sigs.verify_sig(key, shard.serial.to_bytes(), shard.signature):
            return _stage_report(STAGE_SHARD_SIGNATURE, f"bad signature on shard {shard.serial.hex()}", required)

    results, measured, passes = [], [], 0
    for shard in coin.shards:
        outcome = minischeme.verify_m(registry, shard, rng)
        results.append(ShardResult(shard.serial.hex(), outcome.accepted, outcome.probability, outcome.stage))
        measured.append(replace(shard, state=outcome.post_state))
        passes += outcome.accepted
    coin.shards = measured

    if passes < required:
        logger.info(f"[Verify] Rejected: {passes}/{config.m} shards passed, {required} required")
        return VerifyReport(False, STAGE_QUANTUM, passes, required, results,
                            f"{passes} of {config.m} shards passed")
    logger.debug(f"[Verify] Accepted: {passes}/{config.m} shards passed")
    return VerifyReport(True, None, passes, required, results)


def transfer(token: CustodyToken, new_owner_label: str) -> CustodyToken:
    """Local transaction: hand the coin over; no ledger write happens."""
    return token._vault.transfer(token, new_owner_label)


# --- Coin files ---
#
# A coin leaves a process in one of two shapes. A wallet file holds the quantum states
# under a custody marker and can be loaded once: load_coin moves the states out and
# leaves a classical receipt behind. A lab dump (include_states=True, lab=True) is a
# plain copy of the simulated amplitudes for inspection and experiments, and is the
# only shape that can be read more than once.

def coin_to_dict(coin: QuantumBitcoin, include_states: bool = False) -> dict:
    shards = []
    for s in coin.shards:
        rec = {"serial": s.serial.hex(), "signature": s.signature.hex(), "mint_time": s.mint_time}
        if include_states:
            rec["state"] = state_records(s.state)
        shards.append(rec)
    return {"scheme_id": coin.descriptor_signature.scheme_id,
            "descriptor": coin.descriptor_bytes.hex(),
            "descriptor_signature": coin.descriptor_signature.hex(),
            "shards": shards}


def _write_json(data: dict, path: Optional[str]) -> str:
    text = json.dumps(data, sort_keys=True, indent=1) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def export_coin(coin: QuantumBitcoin, path: Optional[str] = None, include_states: bool = False) -> str:
    """
    Classical record of a coin: serials, signatures and descriptor.

    include_states writes a lab dump instead, a copy of the simulated states marked
    "lab": true. It does not move the coin; use store_coin for that.
    """
    data = coin_to_dict(coin, include_states)
    if include_states:
        data["lab"] = True
    return _write_json(data, path)


def import_coin(text: str, config: ProtocolConfig, lab: bool = False) -> QuantumBitcoin:
    """
    Parse a coin file. Raises ValueError (or SerialFormatError) on malformed input.

    Without lab the result is a classical receipt: shards carry no state and the coin
    fails the form stage of verify_q. lab loads the states of a lab dump or wallet as an
    untracked copy.
    """
    try:
        data = json.loads(text)
        scheme = data.get("scheme_id", sigs.SCHEME_ID)
        shards = []
        for rec in data["shards"]:
            serial = Serial.from_hex(rec["serial"], 3 * config.n)
            state = None
            if lab:
                if "state" not in rec:
                    raise ValueError(f"shard {rec['serial']} has no state")
                state = load_state(rec["state"], config.n)
            shards.append(QuantumShard(serial, state, Signature.from_hex(rec["signature"], scheme),
                                       int(rec["mint_time"])))
        sigma0 = Signature.from_hex(data["descriptor_signature"], scheme)
    except (KeyError, TypeError, AttributeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed coin file: {e}") from None
    coin = QuantumBitcoin(shards, sigma0)
    if "descriptor" in data and data["descriptor"] != coin.descriptor_bytes.hex():
        raise ValueError("descriptor does not match the shard serials")
    return coin


def store_coin(token: CustodyToken, path: str) -> str:
    """Move the coin behind a live token into a wallet file. The token is released."""
    holder = token.owner_label
    coin = token._vault.release(token)
    data = coin_to_dict(coin, include_states=True)
    data["custody"] = {"state": WALLET_HELD, "holder": holder}
    text = _write_json(data, path)
    logger.info(f"[Custody] Stored coin of {holder!r} in {path}")
    return text


def load_coin(path: str, config: ProtocolConfig, owner_label: Optional[str] = None,
              vault: Optional[Vault] = None) -> CustodyToken:
    """
    Move a coin out of a wallet file and into custody.

    The file is rewritten as a receipt before the token is returned, so a second load
    of the same file raises CustodyViolationError.
    """
    with open(path) as f:
        text = f.read()
    try:
        custody = json.loads(text).get("custody")
    except (AttributeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed coin file: {e}") from None
    state = custody.get("state") if isinstance(custody, dict) else None
    if state == WALLET_MOVED:
        raise CustodyViolationError(f"{path} is a receipt; the coin was already moved out")
    coin = import_coin(text, config, lab=True)
    if state != WALLET_HELD:
        raise CustodyViolationError(f"{path} is not a wallet file; lab dumps are read with lab=True")

    holder = owner_label or custody.get("holder") or "holder"
    receipt = coin_to_dict(coin)
    receipt["custody"] = {"state": WALLET_MOVED, "holder": holder}
    _write_json(receipt, path)
    logger.info(f"[Custody] Moved coin out of {path} to {holder!r}")
    return (vault or Vault()).issue(coin, holder)

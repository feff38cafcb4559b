"""
ledger.py

Proof-of-work chain carrying the two logical ledgers (shard serials and coin descriptors)
as tagged dictionary entries in one physical chain.

Blocks form an append-only tree. The active chain is the longest branch; ties keep the
first-seen tip unless the chain was given an rng, in which case the tip is chosen at
random. Lookups index the active chain only and are rebuilt on every reorg.
"""
import enum
import hashlib
import json
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HASH_NAME = "sha256"
MAX_THRESHOLD = (1 << 256) - 1
ZERO_HASH = bytes(32)
CLAMP_FACTOR = 4
NONCE_SPACE = 1 << 64
NONCE_BATCH = 256
LOG_MAGIC = b"QBCHAIN1"

_REC_HEADER, _REC_BLOCK, _REC_TIP = 0, 1, 2


class LedgerError(RuntimeError):
    pass


class DuplicateSerialError(LedgerError):
    """The serial is already on the branch being extended."""


class DescriptorConflictError(LedgerError):
    """The descriptor exists, or one of its shards was already combined into a coin."""


class NotFoundError(LedgerError):
    pass


class MiningStallError(LedgerError):
    """The nonce trial cap ran out before a hash met the threshold."""


class MiningInterrupted(LedgerError):
    """The interrupt hook stopped a nonce search; trials holds the work spent so far."""

    def __init__(self, trials: int):
        super().__init__(f"mining interrupted after {trials} trials")
        self.trials = trials


class ChainIntegrityError(LedgerError):
    pass


class Tag(enum.IntEnum):
    SHARD = 0
    BITCOIN = 1


@dataclass(frozen=True)
class LedgerEntry:
    tag: Tag
    serial_key: bytes
    public_key: bytes
    timestamp: int

    def serialize(self) -> bytes:
        return (struct.pack(">BQH", int(self.tag), self.timestamp, len(self.serial_key))
                + self.serial_key + struct.pack(">H", len(self.public_key)) + self.public_key)

    @classmethod
    def deserialize(cls, data: bytes, offset: int = 0) -> Tuple["LedgerEntry", int]:
        tag, timestamp, key_len = struct.unpack_from(">BQH", data, offset)
        offset += 11
        serial_key = data[offset:offset + key_len]
        offset += key_len
        (pk_len,) = struct.unpack_from(">H", data, offset)
        offset += 2
        public_key = data[offset:offset + pk_len]
        return cls(Tag(tag), serial_key, public_key, timestamp), offset + pk_len

    def to_dict(self) -> dict:
        return {"tag": self.tag.name, "serial_key": self.serial_key.hex(),
                "public_key": self.public_key.hex(), "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerEntry":
        return cls(Tag[d["tag"]], bytes.fromhex(d["serial_key"]), bytes.fromhex(d["public_key"]),
                   int(d["timestamp"]))


def encode_descriptor(serials: Sequence[bytes]) -> bytes:
    """Shard serials in order, each behind a 2-byte length prefix."""
    return b"".join(struct.pack(">H", len(s)) + s for s in serials)


def decode_descriptor(data: bytes) -> List[bytes]:
    serials, offset = [], 0
    while offset < len(data):
        if offset + 2 > len(data):
            raise ValueError("truncated descriptor")
        (size,) = struct.unpack_from(">H", data, offset)
        offset += 2
        if offset + size > len(data) or size == 0:
            raise ValueError("truncated descriptor")
        serials.append(data[offset:offset + size])
        offset += size
    return serials


def pow_prefix(prev_hash: bytes, entries: Sequence[LedgerEntry], timestamp: int) -> bytes:
    """Everything the proof-of-work hash covers except the nonce."""
    body = b"".join(struct.pack(">I", len(e.serialize())) + e.serialize() for e in entries)
    return prev_hash + struct.pack(">I", len(entries)) + body + struct.pack(">Q", timestamp)


def pow_hash(prev_hash: bytes, entries: Sequence[LedgerEntry], timestamp: int, nonce: int) -> bytes:
    return hashlib.sha256(pow_prefix(prev_hash, entries, timestamp) + struct.pack(">Q", nonce)).digest()


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    nonce: int
    timestamp: int
    threshold: int
    entries: Tuple[LedgerEntry, ...]
    pow_hash: bytes

    def compute_hash(self) -> bytes:
        return pow_hash(self.prev_hash, self.entries, self.timestamp, self.nonce)

    def meets_threshold(self) -> bool:
        return int.from_bytes(self.pow_hash, "big") < self.threshold

    def serialize(self) -> bytes:
        entries = b"".join(struct.pack(">I", len(e.serialize())) + e.serialize() for e in self.entries)
        return (struct.pack(">Q", self.height) + self.prev_hash + struct.pack(">QQ", self.nonce, self.timestamp)
                + self.threshold.to_bytes(32, "big") + struct.pack(">I", len(self.entries)) + entries
                + self.pow_hash)

    @classmethod
    def deserialize(cls, data: bytes) -> "Block":
        (height,) = struct.unpack_from(">Q", data, 0)
        prev_hash = data[8:40]
        nonce, timestamp = struct.unpack_from(">QQ", data, 40)
        threshold = int.from_bytes(data[56:88], "big")
        (count,) = struct.unpack_from(">I", data, 88)
        offset, entries = 92, []
        for _ in range(count):
            (size,) = struct.unpack_from(">I", data, offset)
            entry, _ = LedgerEntry.deserialize(data[offset + 4:offset + 4 + size])
            entries.append(entry)
            offset += 4 + size
        return cls(height, prev_hash, nonce, timestamp, threshold, tuple(entries), data[offset:offset + 32])

    def to_dict(self) -> dict:
        return {"height": self.height, "prev_hash": self.prev_hash.hex(), "nonce": format(self.nonce, "x"),
                "timestamp": self.timestamp, "threshold": format(self.threshold, "x"),
                "entries": [e.to_dict() for e in self.entries], "pow_hash": self.pow_hash.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(int(d["height"]), bytes.fromhex(d["prev_hash"]), int(d["nonce"], 16), int(d["timestamp"]),
                   int(d["threshold"], 16), tuple(LedgerEntry.from_dict(e) for e in d["entries"]),
                   bytes.fromhex(d["pow_hash"]))


class LookupResult(NamedTuple):
    public_key: bytes
    timestamp: int


def _random_nonce(rng: Optional[np.random.Generator]) -> int:
    if rng is None:
        return 0
    return int(rng.integers(0, NONCE_SPACE, dtype=np.uint64))


class _Batch(NamedTuple):
    nonce: Optional[int]
    digest: Optional[bytes]
    tried: int
    next_nonce: int


def _try_nonces(base, nonce: int, count: int, threshold: int) -> _Batch:
    """Try count consecutive nonces against a hasher already fed the block prefix."""
    for tried in range(1, count + 1):
        h = base.copy()
        h.update(struct.pack(">Q", nonce))
        digest = h.digest()
        if int.from_bytes(digest, "big") < threshold:
            return _Batch(nonce, digest, tried, nonce)
        nonce = (nonce + 1) % NONCE_SPACE
    return _Batch(None, None, count, nonce)


def seal(parent: Block, entries: Sequence[LedgerEntry], timestamp: int, threshold: int,
         rng: Optional[np.random.Generator], max_trials: int,
         interrupt: Optional[Callable[[], bool]] = None) -> Tuple[Block, int]:
    """
    Mine a block on top of parent by repeated nonce trials.

    interrupt, when given, is called after every unsuccessful batch of nonces; a true
    result abandons the search with MiningInterrupted.

    Returns:
        tuple: (Block, number of nonce trials)
    """
    entries = tuple(entries)
    base = hashlib.sha256(pow_prefix(parent.pow_hash, entries, timestamp))
    nonce, trials = _random_nonce(rng), 0
    while trials < max_trials:
        batch = _try_nonces(base, nonce, min(NONCE_BATCH, max_trials - trials), threshold)
        trials += batch.tried
        if batch.nonce is not None:
            block = Block(parent.height + 1, parent.pow_hash, batch.nonce, timestamp, threshold, entries,
                          batch.digest)
            return block, trials
        nonce = batch.next_nonce
        if interrupt is not None and trials < max_trials and interrupt():
            raise MiningInterrupted(trials)
    raise MiningStallError(f"no nonce met threshold {threshold:#x} within {max_trials} trials")


def _genesis(timestamp: int) -> Block:
    digest = pow_hash(ZERO_HASH, (), timestamp, 0)
    return Block(0, ZERO_HASH, 0, timestamp, MAX_THRESHOLD, (), digest)


class Chain:
    """
    Block tree plus the active longest chain.

    Args:
        initial_threshold (int): threshold for block 1 and until the first retarget.
        retarget_interval (int): blocks between difficulty adjustments.
        t_block (int): target inter-block ticks.
        max_nonce_trials (int): cap on nonce trials per append.
        tiebreak_rng (np.random.Generator): when set, equal-height tips are chosen at random.
    """

    def __init__(self, initial_threshold: int = MAX_THRESHOLD, retarget_interval: int = 32,
                 t_block: int = 600, max_nonce_trials: int = 5_000_000, genesis_timestamp: int = 0,
                 tiebreak_rng: Optional[np.random.Generator] = None):
        if not 0 <= initial_threshold <= MAX_THRESHOLD:
            raise ValueError("initial threshold must lie in [0, 2^256 - 1]")
        self.hash_name = HASH_NAME
        self.initial_threshold = initial_threshold
        self.retarget_interval = retarget_interval
        self.t_block = t_block
        self.max_nonce_trials = max_nonce_trials
        self.tiebreak_rng = tiebreak_rng
        self.genesis = _genesis(genesis_timestamp)
        self._blocks: Dict[bytes, Block] = {self.genesis.pow_hash: self.genesis}
        self._order: List[bytes] = [self.genesis.pow_hash]
        self._children: Dict[bytes, List[bytes]] = {self.genesis.pow_hash: []}
        self._active: List[bytes] = [self.genesis.pow_hash]
        self._index: Dict[Tuple[Tag, bytes], Tuple[bytes, LedgerEntry]] = {}
        self._combined: Dict[bytes, bytes] = {}
        self._lock = threading.RLock()
        self.reorgs = 0

    @classmethod
    def from_config(cls, config, tiebreak_rng=None) -> "Chain":
        return cls(initial_threshold=config.initial_threshold, retarget_interval=config.retarget_interval,
                   t_block=config.t_block, max_nonce_trials=config.max_nonce_trials,
                   tiebreak_rng=tiebreak_rng)

    # --- Views ---

    @property
    def tip(self) -> Block:
        return self._blocks[self._active[-1]]

    @property
    def height(self) -> int:
        return len(self._active) - 1

    @property
    def difficulty_threshold(self) -> int:
        return self.next_threshold(self.tip)

    def __len__(self):
        return len(self._blocks)

    def block(self, block_hash: bytes) -> Block:
        return self._blocks[block_hash]

    @property
    def last_added(self) -> Block:
        return self._blocks[self._order[-1]]

    def blocks(self) -> List[Block]:
        """Every block in the order it was added, abandoned branches included."""
        return [self._blocks[h] for h in self._order]

    def active_blocks(self) -> List[Block]:
        return [self._blocks[h] for h in self._active]

    def is_active(self, block: Block) -> bool:
        return block.height < len(self._active) and self._active[block.height] == block.pow_hash

    def ancestor(self, block: Block, height: int) -> Block:
        if self.is_active(block):
            return self._blocks[self._active[height]]
        while block.height > height:
            block = self._blocks[block.prev_hash]
        return block

    # --- Difficulty ---

    def next_threshold(self, parent: Block) -> int:
        """Threshold a child of parent must meet."""
        if parent.height == 0:
            return self.initial_threshold
        if parent.height % self.retarget_interval == 0:
            return self._retarget_from(parent)
        return parent.threshold

    def _retarget_from(self, last: Block) -> int:
        first = self.ancestor(last, last.height - self.retarget_interval)
        span = max(last.timestamp - first.timestamp, 0)
        old = last.threshold
        new = old * span // (self.retarget_interval * self.t_block)
        new = max(new, max(old // CLAMP_FACTOR, 1))
        new = min(new, old * CLAMP_FACTOR, MAX_THRESHOLD)
        if new != old:
            logger.debug(f"[Ledger] Retarget at height {last.height}: span {span} ticks, "
                         f"threshold x{new / old:.3f}")
        return new

    # --- Uniqueness ---

    def _branch_entries(self, parent: Block) -> Iterable[LedgerEntry]:
        block = parent
        while block.height > 0:
            yield from block.entries
            block = self._blocks[block.prev_hash]

    def _conflict(self, entry: LedgerEntry, parent: Block, pending: Sequence[LedgerEntry] = ()):
        """Raise if entry cannot go on the branch ending at parent."""
        components = decode_descriptor(entry.serial_key) if entry.tag is Tag.BITCOIN else []
        if parent.pow_hash == self.tip.pow_hash:
            taken = (entry.tag, entry.serial_key) in self._index
            combined = any(s in self._combined for s in components)
        else:
            branch = list(self._branch_entries(parent))
            taken = any(e.tag is entry.tag and e.serial_key == entry.serial_key for e in branch)
            used = {s for e in branch if e.tag is Tag.BITCOIN for s in decode_descriptor(e.serial_key)}
            combined = any(s in used for s in components)
        taken = taken or any(e.tag is entry.tag and e.serial_key == entry.serial_key for e in pending)
        if entry.tag is Tag.SHARD and taken:
            raise DuplicateSerialError(f"serial {entry.serial_key.hex()} already on the ledger")
        if entry.tag is Tag.BITCOIN and (taken or combined):
            raise DescriptorConflictError("descriptor reuses a shard that was already combined")

    def check_unique(self, entry: LedgerEntry, parent: Optional[Block] = None):
        with self._lock:
            self._conflict(entry, parent or self.tip)

    # --- Mutation ---

    def add_block(self, block: Block) -> bool:
        """
        Validate and link a sealed block. Returns True if it became the active tip.
        """
        with self._lock:
            if block.pow_hash in self._blocks:
                return False
            parent = self._blocks.get(block.prev_hash)
            if parent is None:
                raise ChainIntegrityError(f"unknown parent {block.prev_hash.hex()}")
            if block.height != parent.height + 1:
                raise ChainIntegrityError("block height does not follow its parent")
            if block.timestamp < parent.timestamp:
                raise ChainIntegrityError("block timestamp precedes its parent")
            if block.threshold != self.next_threshold(parent):
                raise ChainIntegrityError("block threshold does not match the difficulty rule")
            if block.compute_hash() != block.pow_hash:
                raise ChainIntegrityError("pow_hash does not match block contents")
            if not block.meets_threshold():
                raise ChainIntegrityError("pow_hash is not below the threshold")
            for i, entry in enumerate(block.entries):
                self._conflict(entry, parent, block.entries[:i])

            self._blocks[block.pow_hash] = block
            self._order.append(block.pow_hash)
            self._children[block.pow_hash] = []
            self._children[parent.pow_hash].append(block.pow_hash)

            tip = self.tip
            if block.prev_hash == tip.pow_hash:
                self._active.append(block.pow_hash)
                self._index_block(block)
                return True
            if block.height > tip.height or (
                    block.height == tip.height and self.tiebreak_rng is not None
                    and self.tiebreak_rng.random() < 0.5):
                self._switch_to(block)
                return True
            return False

    def _index_block(self, block: Block):
        for entry in block.entries:
            self._index[(entry.tag, entry.serial_key)] = (block.pow_hash, entry)
            if entry.tag is Tag.BITCOIN:
                for s in decode_descriptor(entry.serial_key):
                    self._combined[s] = entry.serial_key

    def _switch_to(self, new_tip: Block):
        old_tip = self.tip
        path = []
        block = new_tip
        while block.height > 0:
            path.append(block.pow_hash)
            block = self._blocks[block.prev_hash]
        path.append(block.pow_hash)
        self._active = path[::-1]
        self._index.clear()
        self._combined.clear()
        for h in self._active:
            self._index_block(self._blocks[h])
        self.reorgs += 1
        logger.info(f"[Ledger] Reorg: tip {old_tip.pow_hash.hex()[:12]}@{old_tip.height} -> "
                    f"{new_tip.pow_hash.hex()[:12]}@{new_tip.height}")

    def set_tip(self, block_hash: bytes):
        """Make an existing maximum-height block the active tip."""
        with self._lock:
            block = self._blocks[block_hash]
            if block.height != max(b.height for b in self._blocks.values()):
                raise ChainIntegrityError("active tip must have maximum height")
            if block_hash != self.tip.pow_hash:
                self._switch_to(block)


def append(chain: Chain, entry: LedgerEntry, rng: Optional[np.random.Generator],
           timestamp: Optional[int] = None, parent: Optional[Block] = None,
           competitor: Optional[Callable[[Chain], None]] = None) -> Block:
    """
    Append one entry to the ledger by proof of work.

    Duplicates fail before any mining. When mining on the tip, competitor (if given) is
    called between nonce batches and may add blocks; if the tip moved, mining restarts
    on the new tip. A fixed parent disables the restart, which is how forks are mined.

    Raises:
        DuplicateSerialError, DescriptorConflictError, MiningStallError
    """
    follow_tip = parent is None
    ts = entry.timestamp if timestamp is None else timestamp
    trials = 0
    while True:
        base_block = chain.tip if follow_tip else parent
        chain.check_unique(entry, base_block)
        interrupt = None
        if competitor is not None and follow_tip:
            def interrupt(base_hash=base_block.pow_hash):
                competitor(chain)
                return chain.tip.pow_hash != base_hash
        try:
            block, used = seal(base_block, (entry,), max(ts, base_block.timestamp),
                               chain.next_threshold(base_block), rng, chain.max_nonce_trials - trials,
                               interrupt=interrupt)
        except MiningInterrupted as e:
            trials += e.trials
            logger.info(f"[Ledger] New tip at height {chain.tip.height}; restarting mining")
            continue
        except MiningStallError:
            raise MiningStallError(f"no nonce met threshold {chain.next_threshold(base_block):#x} within "
                                   f"{chain.max_nonce_trials} trials") from None
        trials += used
        chain.add_block(block)
        logger.debug(f"[Ledger] Sealed block {block.height} after {trials} trials")
        return block


def lookup(chain: Chain, tag: Tag, serial_key: bytes) -> LookupResult:
    """Public key and block timestamp for serial_key on the active chain."""
    with chain._lock:
        found = chain._index.get((Tag(tag), bytes(serial_key)))
        if found is None:
            raise NotFoundError(f"{Tag(tag).name} key {bytes(serial_key).hex()} not on the active chain")
        block_hash, entry = found
        return LookupResult(entry.public_key, chain._blocks[block_hash].timestamp)


def retarget(chain: Chain) -> int:
    """Threshold for the next block after a retarget boundary at the active tip."""
    tip = chain.tip
    if tip.height == 0 or tip.height % chain.retarget_interval:
        raise ValueError(f"height {tip.height} is not a multiple of {chain.retarget_interval}")
    return chain._retarget_from(tip)


def confirmations(chain: Chain, block: Block) -> int:
    if not chain.is_active(block):
        return 0
    return chain.height - block.height + 1


def count(chain: Chain, tag: Tag) -> int:
    """Entries of one tag on the active chain."""
    with chain._lock:
        return sum(1 for (t, _) in chain._index if t is tag)


def audit(chain: Chain) -> bool:
    """Recompute every hash, threshold and parent link in the block tree."""
    for block in chain.blocks():
        if block.compute_hash() != block.pow_hash:
            raise ChainIntegrityError(f"hash mismatch at height {block.height}")
        if not block.meets_threshold():
            raise ChainIntegrityError(f"threshold not met at height {block.height}")
        if block.height == 0:
            continue
        parent = chain.block(block.prev_hash)
        if block.threshold != chain.next_threshold(parent):
            raise ChainIntegrityError(f"difficulty rule broken at height {block.height}")
    return True


# --- Persistence ---

def _header(chain: Chain) -> dict:
    return {"magic": LOG_MAGIC.decode(), "hash": chain.hash_name,
            "initial_threshold": format(chain.initial_threshold, "x"),
            "retarget_interval": chain.retarget_interval, "t_block": chain.t_block,
            "max_nonce_trials": chain.max_nonce_trials, "genesis_timestamp": chain.genesis.timestamp}


def _chain_from_header(header: dict) -> Chain:
    if header.get("magic") != LOG_MAGIC.decode() or header.get("hash") != HASH_NAME:
        raise ChainIntegrityError("unsupported chain log header")
    return Chain(initial_threshold=int(header["initial_threshold"], 16),
                 retarget_interval=int(header["retarget_interval"]), t_block=int(header["t_block"]),
                 max_nonce_trials=int(header["max_nonce_trials"]),
                 genesis_timestamp=int(header["genesis_timestamp"]))


def _record(kind: int, payload: bytes) -> bytes:
    return struct.pack(">IB", len(payload) + 1, kind) + payload


def write_log(chain: Chain, path: str) -> bytes:
    """Binary log: header, every block in insertion order, then the active tip."""
    data = bytearray(LOG_MAGIC)
    data += _record(_REC_HEADER, json.dumps(_header(chain), sort_keys=True).encode())
    for block in chain.blocks()[1:]:
        data += _record(_REC_BLOCK, block.serialize())
    data += _record(_REC_TIP, chain.tip.pow_hash)
    with open(path, "wb") as f:
        f.write(bytes(data))
    logger.info(f"[Ledger] Wrote {len(chain)} blocks to {path}")
    return bytes(data)


def read_log(path: str) -> Chain:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(LOG_MAGIC):
        raise ChainIntegrityError(f"{path} is not a chain log")
    offset, chain, tip = len(LOG_MAGIC), None, None
    while offset < len(data):
        if offset + 5 > len(data):
            raise ChainIntegrityError("truncated record")
        size, kind = struct.unpack_from(">IB", data, offset)
        payload = data[offset + 5:offset + 4 + size]
        if len(payload) != size - 1:
            raise ChainIntegrityError("truncated record")
        offset += 4 + size
        if kind == _REC_HEADER:
            chain = _chain_from_header(json.loads(payload))
        elif chain is None:
            raise ChainIntegrityError("chain log has no header")
        elif kind == _REC_BLOCK:
            chain.add_block(Block.deserialize(payload))
        elif kind == _REC_TIP:
            tip = payload
        else:
            raise ChainIntegrityError(f"unknown record type {kind}")
    if chain is None:
        raise ChainIntegrityError("chain log has no header")
    if tip is not None:
        chain.set_tip(tip)
    return chain


def dump_jsonl(chain: Chain, path: Optional[str] = None) -> str:
    lines = [json.dumps({"type": "header", **_header(chain)}, sort_keys=True)]
    lines += [json.dumps({"type": "block", **b.to_dict()}, sort_keys=True) for b in chain.blocks()[1:]]
    lines.append(json.dumps({"type": "tip", "hash": chain.tip.pow_hash.hex()}, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def ingest_jsonl(text: str) -> Chain:
    """Rebuild a chain from dump_jsonl output; every hash is re-verified on the way in."""
    chain, tip = None, None
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("type", None)
        if kind == "header":
            chain = _chain_from_header(rec)
        elif chain is None:
            raise ChainIntegrityError("chain dump has no header")
        elif kind == "block":
            chain.add_block(Block.from_dict(rec))
        elif kind == "tip":
            tip = bytes.fromhex(rec["hash"])
        else:
            raise ChainIntegrityError(f"unknown record type {kind!r}")
    if chain is None:
        raise ChainIntegrityError("chain dump has no header")
    if tip is not None:
        chain.set_tip(tip)
    return chain

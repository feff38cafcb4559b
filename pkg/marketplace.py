"""
marketplace.py

In-process shard marketplace shared between shard miners and coin miners.

Shard miners publish freshly minted shards; coin miners read them oldest-first and take
the ones they combined. There is no pricing model.
"""
import logging
import threading
from typing import Iterable, List

from minischeme import QuantumShard

logger = logging.getLogger(__name__)


class Marketplace:
    def __init__(self):
        self._shards: List[QuantumShard] = []
        self._lock = threading.Lock()

    def publish(self, shard: QuantumShard):
        with self._lock:
            self._shards.append(shard)
        logger.debug(f"[Market] Published shard {shard.serial.hex()} (mint time {shard.mint_time})")

    def oldest_first(self) -> List[QuantumShard]:
        """Snapshot of the offered shards, oldest mint time first (stable for ties)."""
        with self._lock:
            return sorted(self._shards, key=lambda s: s.mint_time)

    def take(self, serials: Iterable) -> int:
        """Remove the shards with the given serials. Returns how many were removed."""
        wanted = {s.value for s in serials}
        with self._lock:
            before = len(self._shards)
            self._shards = [s for s in self._shards if s.serial.value not in wanted]
            removed = before - len(self._shards)
        logger.debug(f"[Market] Took {removed} shards")
        return removed

    def prune_expired(self, now: int, t_max: int) -> int:
        """Drop shards too old to be combined; returns how many were dropped."""
        with self._lock:
            before = len(self._shards)
            self._shards = [s for s in self._shards if now - s.mint_time <= t_max]
            dropped = before - len(self._shards)
        if dropped:
            logger.info(f"[Market] Dropped {dropped} expired shards")
        return dropped

    def size(self) -> int:
        with self._lock:
            return len(self._shards)

    def __len__(self):
        return self.size()

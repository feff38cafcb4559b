"""
simnet.py

Discrete-event simulation of the mining ecosystem and the attack Monte Carlo.

run_honest_network drives real proof-of-work blocks on a single logical timeline; the
reuse-attack and double-spend runs use the simplified window models the bounds are stated
in, vectorized with numpy and split into chunks whose seeds depend only on the run seed
and the chunk index, so results do not depend on the worker count.
"""
import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import ledger
import protocol
from analytics import DomainError, ReuseBoundInput, eta_bound, eta_exact, reuse_tail_probability
from config import ConfigError, ProtocolConfig
from gf2 import CapacityError
from ledger import Chain, DescriptorConflictError, MAX_THRESHOLD
from marketplace import Marketplace
from minischeme import OracleRegistry

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 50_000
RULES = ("at_least", "exact")


class EventKind(str, enum.Enum):
    BLOCK_FOUND = "BlockFound"
    SHARD_PUBLISHED = "ShardPublished"
    COIN_MINTED = "CoinMinted"
    ATTACK_WINDOW_START = "AttackWindowStart"
    ATTACK_SUCCESS = "AttackSuccess"
    ATTACK_FAIL = "AttackFail"


@dataclass(frozen=True)
class SimEvent:
    tick: int
    seq: int
    kind: EventKind
    actor: str
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tick": self.tick, "seq": self.seq, "kind": self.kind.value, "actor": self.actor,
                "payload": self.payload}


class EventLog:
    """Events ordered by (tick, seq)."""

    def __init__(self):
        self.events: List[SimEvent] = []

    def emit(self, tick: int, kind: EventKind, actor: str, **payload) -> SimEvent:
        event = SimEvent(tick, len(self.events), kind, actor, payload)
        self.events.append(event)
        return event

    def __len__(self):
        return len(self.events)

    def lines(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    def digest(self) -> str:
        return hashlib.sha256(self.lines().encode()).hexdigest()

    def write(self, path: str) -> str:
        with open(path, "w") as f:
            f.write(self.lines())
        logger.info(f"[Simnet] Wrote {len(self)} events to {path}")
        return self.digest()

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.to_dict() for e in self.events],
                            columns=["tick", "seq", "kind", "actor", "payload"])


@dataclass
class NetworkResult:
    log: EventLog
    chain: Chain
    registry: Optional[OracleRegistry] = None
    marketplace: Optional[Marketplace] = None
    coins: list = field(default_factory=list)

    @property
    def events(self) -> List[SimEvent]:
        return self.log.events

    @property
    def log_hash(self) -> str:
        return self.log.digest()


def _mint_into_block(chain, config, registry, marketplace, parent, tick, actor, rng, log, coins, state):
    """The winning miner's protocol step: a coin when m fresh shards exist, else a shard."""
    if state.get("exhausted"):
        block, _ = ledger.seal(parent, (), tick, chain.next_threshold(parent), rng, chain.max_nonce_trials)
        chain.add_block(block)
        return
    if marketplace.size() >= config.m:
        try:
            coin, token = protocol.mint_bitcoin(chain, registry, config, marketplace, rng, now=tick,
                                                parent=parent, owner_label=actor)
            coins.append(token)
            log.emit(tick, EventKind.COIN_MINTED, actor, descriptor=coin.descriptor_bytes.hex()[:32],
                     height=chain.last_added.height)
            return
        except (protocol.InsufficientFreshShardsError, protocol.SupplyCapReachedError,
                DescriptorConflictError) as e:
            logger.debug(f"[Simnet] {actor} falls back to shard mining: {e}")
    try:
        shard = protocol.mint_shard(chain, registry, config, marketplace, rng, now=tick, parent=parent)
        log.emit(tick, EventKind.SHARD_PUBLISHED, actor, serial=shard.serial.hex())
    except CapacityError as e:
        logger.warning(f"[Simnet] Oracle exhausted ({e}); later blocks carry no entries")
        state["exhausted"] = True
        _mint_into_block(chain, config, registry, marketplace, parent, tick, actor, rng, log, coins, state)


def run_honest_network(config: ProtocolConfig, miners: int, duration: int, rng: np.random.Generator,
                       hashrate: Optional[float] = None, registry: Optional[OracleRegistry] = None,
                       marketplace: Optional[Marketplace] = None, random_tiebreak: bool = False,
                       max_blocks: Optional[int] = None) -> NetworkResult:
    """
    Honest miners racing on one chain.

    Each miner tries `hashrate` nonces per tick, so its per-tick discovery probability is
    hashrate * threshold / 2^256 and its waiting time is geometric. Miners that finish in
    the same tick produce sibling blocks on the same parent. Blocks are really sealed by
    proof of work. With a registry, every block carries the winner's protocol mint.

    Args:
        config (ProtocolConfig): protocol and chain parameters.
        miners (int): number of honest miners, at least 1.
        duration (int): simulated ticks.
        rng: the single source of randomness for the run.
        hashrate (float): nonce trials per tick per miner; defaults to 16 / (t_block * miners).
        registry (OracleRegistry): enables protocol mints inside blocks.
        marketplace (Marketplace): shard marketplace; created when a registry is given.
        random_tiebreak (bool): pick equal-height tips at random instead of first-seen.
        max_blocks (int): stop after this many blocks.

    Returns:
        NetworkResult
    """
    if miners < 1:
        raise ConfigError("at least one miner is required")
    if hashrate is None:
        hashrate = 16.0 / (config.t_block * miners)
    initial = min(MAX_THRESHOLD, int((1 << 256) / (config.t_block * miners * hashrate)))
    chain = Chain(initial_threshold=initial, retarget_interval=config.retarget_interval,
                  t_block=config.t_block, max_nonce_trials=config.max_nonce_trials,
                  tiebreak_rng=rng if random_tiebreak else None)
    if registry is not None and marketplace is None:
        marketplace = Marketplace()
    result = NetworkResult(EventLog(), chain, registry, marketplace)
    state = {}
    logger.info(f"[Simnet] {miners} miners, {duration} ticks, hashrate {hashrate:.4g}/tick")

    tick, found = 0, 0
    while max_blocks is None or found < max_blocks:
        parent = chain.tip
        per_tick = min(1.0, hashrate * chain.next_threshold(parent) / (1 << 256))
        waits = rng.geometric(per_tick, size=miners)
        step = int(waits.min())
        if tick + step > duration:
            break
        tick += step
        for w in np.flatnonzero(waits == step):
            actor = f"miner-{int(w)}"
            if registry is None:
                block, trials = ledger.seal(parent, (), tick, chain.next_threshold(parent), rng,
                                            chain.max_nonce_trials)
                chain.add_block(block)
            else:
                marketplace.prune_expired(tick, config.t_max)
                _mint_into_block(chain, config, registry, marketplace, parent, tick, actor, rng,
                                 result.log, result.coins, state)
                block = chain.last_added
            found += 1
            result.log.emit(tick, EventKind.BLOCK_FOUND, actor, height=block.height,
                            hash=block.pow_hash.hex(), active=chain.is_active(block))
            if max_blocks is not None and found >= max_blocks:
                break
    logger.info(f"[Simnet] Done at tick {tick}: height {chain.height}, {len(chain)} blocks, "
                f"{chain.reorgs} reorgs")
    return result


def mean_block_interval(chain: Chain, skip: int = 0) -> float:
    """Mean timestamp gap along the active chain, ignoring the first `skip` blocks."""
    stamps = np.array([b.timestamp for b in chain.active_blocks()], dtype=np.float64)[skip:]
    if stamps.size < 2:
        return float("nan")
    return float(np.diff(stamps).mean())


# --- Reuse attack ---

@dataclass(frozen=True)
class AttackerModel:
    """
    An attacker holding fraction p of the hash power.

    Window one lasts k blocks and needs `shard_wins_needed` shard blocks (m - 2 by default);
    window two lasts another k blocks and needs the combining block. rule="at_least"
    counts a trial as a success when both needs are met; rule="exact" asks for exactly
    that many wins, the event whose probability is the closed-form eta.
    """
    p: float
    shard_wins_needed: Optional[int] = None
    rule: str = "at_least"

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ConfigError(f"attacker fraction must lie in [0, 1), got {self.p}")
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")

    def wins_needed(self, m: int) -> int:
        return m - 2 if self.shard_wins_needed is None else self.shard_wins_needed


@dataclass
class AttackReport:
    trials: int
    successes: int
    measured_rate: float
    analytic_eta: Optional[float]
    analytic_tail: float
    bound: float
    admissible: bool
    p_limit: float
    k: int
    m: int
    gamma: float
    p: float
    rule: str = "at_least"
    shard_wins_needed: int = 0
    seed: Optional[int] = None
    config_digest: str = ""

    @property
    def analytic_reference(self) -> Optional[float]:
        """The analytic probability of exactly the event this run counted."""
        return self.analytic_eta if self.rule == "exact" else self.analytic_tail

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"
        if path:
            with open(path, "w") as f:
                f.write(text)
        return text

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.to_dict()])


def reports_to_csv(reports: Sequence[AttackReport], path: Optional[str] = None) -> str:
    frame = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    text = frame.to_csv(index=False)
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def _attack_chunk(seed_words, size: int, k: int, p: float, needed: int, rule: str) -> int:
    g = np.random.default_rng(seed_words)
    shard_wins = (g.random((size, k)) < p).sum(axis=1)
    combine_wins = (g.random((size, k)) < p).sum(axis=1)
    if rule == "exact":
        ok = (shard_wins == needed) & (combine_wins == 1)
    else:
        ok = (shard_wins >= needed) & (combine_wins >= 1)
    return int(ok.sum())


def _chunks(trials: int, chunk_size: int):
    return [min(chunk_size, trials - start) for start in range(0, trials, chunk_size)]


def run_reuse_attack_trials(config: ProtocolConfig, p: float, trials: int, rng: np.random.Generator,
                            attacker: Optional[AttackerModel] = None, workers: int = 1,
                            chunk_size: int = DEFAULT_CHUNK, progress: bool = False,
                            seed: Optional[int] = None) -> AttackReport:
    """
    Monte Carlo of the two-window reuse attack.

    Each trial gives the attacker k = floor(T_max / T_block) block slots per window and
    wins each slot independently with probability p; honest wins never cancel the
    attacker's count.
    """
    k = config.k
    if k < 3:
        raise ConfigError(f"k must be at least 3, got {k}")
    attacker = attacker or AttackerModel(p)
    if attacker.p != p:
        attacker = AttackerModel(p, attacker.shard_wins_needed, attacker.rule)
    needed = attacker.wins_needed(config.m)
    base = int(rng.integers(0, 2 ** 63))

    sizes = _chunks(trials, chunk_size)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_attack_chunk, [base, i], size, k, p, needed, attacker.rule)
                   for i, size in enumerate(sizes)]
        successes = sum(f.result() for f in tqdm(futures, disable=not progress, desc="attack"))

    inp = ReuseBoundInput(k, config.m, p, config.epsilon, shard_wins_needed=attacker.shard_wins_needed)
    try:
        analytic_eta = float(eta_exact(inp).eta)
    except DomainError as e:
        logger.warning(f"[Attack] No closed-form eta for k={k}, {needed} shard wins: {e}")
        analytic_eta = None
    tail = reuse_tail_probability(k, needed, p) if needed <= k else 0.0
    bound = eta_bound(inp)
    report = AttackReport(trials, successes, successes / trials if trials else 0.0, analytic_eta, tail,
                          bound.value, bound.admissible, bound.p_limit, k, config.m, inp.gamma, float(p),
                          attacker.rule, needed, seed, config.digest())
    logger.info(f"[Attack] p={p} k={k} m={config.m}: {successes}/{trials} "
                f"(rate {report.measured_rate:.3e}, bound {bound.value:.3e}"
                f"{'' if bound.admissible else ', not applicable'})")
    return report


def run_attack_trace(config: ProtocolConfig, attacker: AttackerModel, trials: int,
                     rng: np.random.Generator) -> EventLog:
    """A few attack trials played out slot by slot, for inspection."""
    k, log = config.k, EventLog()
    needed = attacker.wins_needed(config.m)
    for t in range(trials):
        start = 2 * k * t
        log.emit(start * config.t_block, EventKind.ATTACK_WINDOW_START, "attacker", trial=t, window=1)
        shard_wins = int((rng.random(k) < attacker.p).sum())
        log.emit((start + k) * config.t_block, EventKind.ATTACK_WINDOW_START, "attacker", trial=t, window=2,
                 shard_wins=shard_wins)
        combine_wins = int((rng.random(k) < attacker.p).sum())
        if attacker.rule == "exact":
            ok = shard_wins == needed and combine_wins == 1
        else:
            ok = shard_wins >= needed and combine_wins >= 1
        kind = EventKind.ATTACK_SUCCESS if ok else EventKind.ATTACK_FAIL
        log.emit((start + 2 * k) * config.t_block, kind, "attacker", trial=t, shard_wins=shard_wins,
                 combine_wins=combine_wins)
    return log


# --- Double-spend baseline ---

def run_double_spend_baseline(config: ProtocolConfig, p: float, confirmations: int, trials: int,
                              rng: np.random.Generator, max_depth: int = 200,
                              max_steps: int = 1_000_000) -> float:
    """
    Empirical success rate of a private-chain double spend after `confirmations` blocks.

    The attacker's blocks during the confirmation wait are negative binomial; the race
    after that is a random walk on the attacker's deficit, won on getting one block
    ahead and lost once the deficit exceeds max_depth.
    """
    if confirmations < 1:
        raise ConfigError("confirmations must be at least 1")
    if not 0 <= p < 1:
        raise ConfigError(f"attacker fraction must lie in [0, 1), got {p}")
    if p == 0 or trials == 0:
        return 0.0
    attacker_blocks = rng.negative_binomial(confirmations, 1.0 - p, size=trials)
    deficit = confirmations - attacker_blocks + 1
    wins = int((deficit <= 0).sum())
    active = deficit[deficit > 0]
    steps = 0
    while active.size and steps < max_steps:
        active = active + np.where(rng.random(active.size) < p, -1, 1)
        wins += int((active == 0).sum())
        active = active[(active > 0) & (active <= max_depth)]
        steps += 1
    rate = wins / trials
    logger.info(f"[Simnet] Double spend p={p}, z={confirmations}: rate {rate:.4g} over {trials} trials")
    return rate

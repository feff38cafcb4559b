"""
analytics.py

Closed-form reuse-attack probabilities and their bound, the binomial coefficient bound,
the double-spend race oracle and the longevity experiments: verify/reconstruct wear-out of
one shard state, and repeated verify-and-transfer cycles of a whole minted coin.

eta_exact works in exact rational arithmetic; log2_eta evaluates the same quantity in
the log domain for parameters where a float would underflow.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from numbers import Rational
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import comb, gammaln
from tqdm import tqdm

import protocol
from qsim import MeasurementOutcome, QuantumState, rotate_toward, trace_distance

logger = logging.getLogger(__name__)

Number = Union[float, Fraction]

SWEEP_COLUMNS = ["k", "m", "gamma", "p", "eta1", "eta2", "eta", "bound", "admissible"]


class DomainError(ValueError):
    """Parameters outside the model (e.g. more shard wins needed than blocks in a window)."""


@dataclass(frozen=True)
class ReuseBoundInput:
    k: int
    m: int
    p: Number
    epsilon: float = 0.0
    shard_wins_needed: Optional[int] = None

    def __post_init__(self):
        if self.k < 3:
            raise DomainError(f"k must be at least 3, got {self.k}")
        if not 0 <= self.p < 1:
            raise DomainError(f"p must lie in [0, 1), got {self.p}")
        if not 0 <= self.epsilon < 1:
            raise DomainError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    @property
    def wins_needed(self) -> int:
        """Shard blocks the attacker must win in the first window (m - 2 unless overridden)."""
        return self.m - 2 if self.shard_wins_needed is None else self.shard_wins_needed

    @property
    def gamma(self) -> float:
        return (self.m - 2) / self.k

    def gamma_in_range(self) -> bool:
        """1/k < gamma <= 1, and gamma < 1/(k eps) - 1/k when eps > 0."""
        gamma = self.gamma
        if gamma <= 1.0 / self.k or gamma > 1.0:
            return False
        if self.epsilon > 0:
            return gamma < 1.0 / (self.k * self.epsilon) - 1.0 / self.k
        return True


class EtaResult(NamedTuple):
    eta1: Number
    eta2: Number
    eta: Number


class BoundResult(NamedTuple):
    value: float
    log2_value: float
    admissible: bool
    p_limit: float

    @property
    def bound(self) -> Optional[float]:
        """The bound, or None where it does not apply."""
        return self.value if self.admissible else None


def eta_exact(inp: ReuseBoundInput) -> EtaResult:
    """
    eta1 = C(k, j) p^j (1-p)^(k-j) with j = m - 2, eta2 = k p (1-p)^(k-1), eta = eta1 * eta2.

    Rational p gives Fractions; float p is converted exactly and the result rounded once.
    """
    j, k = inp.wins_needed, inp.k
    if j > k:
        raise DomainError(f"{j} shard wins cannot fit in a window of {k} blocks")
    if j < 0:
        raise DomainError(f"shard wins needed must be non-negative, got {j}")
    exact = isinstance(inp.p, Rational)
    p = Fraction(inp.p)
    q = 1 - p
    eta1 = comb(k, j, exact=True) * p ** j * q ** (k - j)
    eta2 = k * p * q ** (k - 1)
    eta = eta1 * eta2
    if exact:
        return EtaResult(eta1, eta2, eta)
    return EtaResult(float(eta1), float(eta2), float(eta))


def log2_eta(inp: ReuseBoundInput) -> float:
    """log2 of eta through gammaln; -inf when p = 0."""
    j, k = inp.wins_needed, inp.k
    if j > k or j < 0:
        raise DomainError(f"{j} shard wins cannot fit in a window of {k} blocks")
    p = float(inp.p)
    if p == 0.0:
        return -math.inf
    log_q = math.log1p(-p)
    log_c = gammaln(k + 1) - gammaln(j + 1) - gammaln(k - j + 1)
    log_eta1 = log_c + j * math.log(p) + (k - j) * log_q
    log_eta2 = math.log(k) + math.log(p) + (k - 1) * log_q
    return float((log_eta1 + log_eta2) / math.log(2))


def p_limit(gamma: float) -> float:
    """Largest attacker fraction the bound covers: gamma / (2e + gamma)."""
    return gamma / (2 * math.e + gamma)


def eta_bound(inp: ReuseBoundInput) -> BoundResult:
    """
    (k / 2e) * 2^(-gamma k), with the admissibility check p < gamma / (2e + gamma).
    """
    gamma = inp.gamma
    log2_value = math.log2(inp.k / (2 * math.e)) - gamma * inp.k
    limit = p_limit(gamma)
    admissible = inp.gamma_in_range() and float(inp.p) < limit
    return BoundResult(2.0 ** log2_value, log2_value, admissible, limit)


def binomial_upper_bound(n: int, k: int) -> float:
    """(n e / k)^k, an upper bound on C(n, k) for 1 <= k <= n."""
    return (n * math.e / k) ** k


def binomial_bound_holds(n: int, k: int) -> bool:
    return comb(n, k, exact=True) < binomial_upper_bound(n, k)


def reuse_tail_probability(k: int, needed: int, p: float) -> float:
    """P(at least `needed` wins in k blocks) * P(at least one win in k blocks)."""
    p = Fraction(p)
    q = 1 - p
    tail = sum(comb(k, i, exact=True) * p ** i * q ** (k - i) for i in range(max(needed, 0), k + 1))
    return float(tail * (1 - q ** k))


def sweep(k_values: Sequence[int], gammas: Sequence[float], p_values: Sequence[float],
          epsilon: float = 0.0, progress: bool = False) -> pd.DataFrame:
    """
    Evaluate eta and its bound over a parameter grid.

    m is chosen as round(gamma * k) + 2, so the reported gamma is the realized (m - 2) / k.
    """
    rows = []
    grid = [(k, g, p) for k in k_values for g in gammas for p in p_values]
    for k, g, p in tqdm(grid, disable=not progress, desc="sweep"):
        m = int(round(g * k)) + 2
        inp = ReuseBoundInput(k, m, p, epsilon)
        try:
            eta1, eta2, eta = eta_exact(inp)
        except DomainError as e:
            logger.warning(f"[Sweep] Skipping k={k}, gamma={g}: {e}")
            continue
        b = eta_bound(inp)
        rows.append({"k": k, "m": m, "gamma": inp.gamma, "p": float(p), "eta1": eta1, "eta2": eta2,
                     "eta": eta, "bound": b.value, "admissible": b.admissible,
                     "p_limit": b.p_limit, "log2_eta": log2_eta(inp)})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS + ["p_limit", "log2_eta"])


def _catch_up(p: Fraction, deficit: int, barrier: int) -> Fraction:
    """Probability a walk stepping down with prob p reaches 0 from deficit before passing barrier."""
    if deficit <= 0:
        return Fraction(1)
    q = 1 - p
    top = barrier + 1
    if p == q:
        return Fraction(top - deficit, top)
    r = p / q
    return (r ** deficit - r ** top) / (1 - r ** top)


def double_spend_exact(p: float, confirmations: int, max_depth: int = 200) -> float:
    """
    Success probability of a private-chain double spend.

    While the merchant waits for z confirmations the attacker finds a blocks (negative
    binomial). From there the attacker must get one block ahead; the race is lost once
    the attacker falls more than max_depth blocks behind.
    """
    if p <= 0:
        return 0.0
    p = Fraction(p)
    q = 1 - p
    z = confirmations
    total, head = Fraction(0), Fraction(0)
    for a in range(z + 1):
        prob_a = comb(z - 1 + a, a, exact=True) * p ** a * q ** z
        head += prob_a
        total += prob_a * _catch_up(p, z - a + 1, max_depth)
    total += 1 - head
    return float(total)


@dataclass
class LongevityReport:
    verifications: int = 0
    trace_distances: List[float] = field(default_factory=list)
    cumulative_distance: float = 0.0
    threshold: float = 0.5
    acceptance_probabilities: List[float] = field(default_factory=list)
    rejected_round: Optional[int] = None
    worn_out_round: Optional[int] = None
    survived_rounds: int = 0

    def to_dict(self) -> dict:
        return {"verifications": self.verifications, "trace_distances": self.trace_distances,
                "cumulative_distance": self.cumulative_distance, "threshold": self.threshold,
                "acceptance_probabilities": self.acceptance_probabilities,
                "rejected_round": self.rejected_round, "worn_out_round": self.worn_out_round,
                "survived_rounds": self.survived_rounds,
                "max_distance": max(self.trace_distances, default=0.0)}


def _orthogonal_basis_state(psi: QuantumState) -> QuantumState:
    idx = np.flatnonzero(np.abs(psi.amplitudes) == 0.0)
    if idx.size == 0:
        raise ValueError("state has no basis direction to rotate toward")
    return QuantumState.basis(psi.n, int(idx[0]))


def perturbation_for(epsilon: float) -> float:
    """Rotation angle giving acceptance probability 1 - epsilon."""
    return math.asin(math.sqrt(epsilon))


def run_longevity(coin_factory: Callable[[], QuantumState],
                  verifier: Callable[[QuantumState, Optional[np.random.Generator]], MeasurementOutcome],
                  rounds: int, perturbation: Optional[float] = None, threshold: float = 0.5,
                  rng: Optional[np.random.Generator] = None, progress: bool = False) -> LongevityReport:
    """
    Verify and reconstruct a coin state over and over.

    Each round optionally rotates the current state by `perturbation` radians toward a
    fixed basis state outside the coin's support, verifies it, keeps the recovered state
    and records its trace distance from the state that went in.

    Args:
        coin_factory: returns the fresh coin state.
        verifier: (state, rng) -> MeasurementOutcome, e.g. a bound verify_m.
        rounds (int): number of verify/reconstruct rounds, at least 1.
        perturbation (float): rotation angle per round; None or 0 for an ideal coin.
        threshold (float): wear-out cutoff on the accumulated distance.
        rng: sample verification outcomes when given; otherwise postselect on acceptance.

    Returns:
        LongevityReport
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    report = LongevityReport(threshold=threshold)
    state = coin_factory()
    away = _orthogonal_basis_state(state) if perturbation else None

    for rnd in tqdm(range(1, rounds + 1), disable=not progress, desc="longevity"):
        before = rotate_toward(state, away, perturbation) if perturbation else state
        outcome = verifier(before, rng)
        report.verifications += 1
        report.acceptance_probabilities.append(outcome.probability)
        if not outcome.accepted:
            report.rejected_round = rnd
            logger.info(f"[Longevity] Coin rejected in round {rnd}")
            break
        distance = trace_distance(before, outcome.post_state)
        report.trace_distances.append(distance)
        report.cumulative_distance += distance
        if report.worn_out_round is None:
            if report.cumulative_distance > threshold + 1e-12:
                report.worn_out_round = rnd
                logger.info(f"[Longevity] Wear-out threshold {threshold} passed in round {rnd}")
            else:
                report.survived_rounds = rnd
        state = outcome.post_state
        if away is not None and abs(state.inner(away)) > 1e-12:
            away = _orthogonal_basis_state(state)
    return report


@dataclass
class CoinLongevityReport:
    cycles: int = 0
    required: int = 0
    passes: List[int] = field(default_factory=list)
    failures: List[int] = field(default_factory=list)
    owners: List[str] = field(default_factory=list)
    rejected_cycle: Optional[int] = None
    rejected_stage: Optional[str] = None

    @property
    def survived_cycles(self) -> int:
        return self.cycles if self.rejected_cycle is None else self.rejected_cycle - 1

    def to_dict(self) -> dict:
        return {"cycles": self.cycles, "required": self.required, "passes": self.passes,
                "failures": self.failures, "owners": self.owners,
                "rejected_cycle": self.rejected_cycle, "rejected_stage": self.rejected_stage,
                "survived_cycles": self.survived_cycles}


def _perturb_shards(coin, perturbation: float):
    shards = []
    for shard in coin.shards:
        try:
            away = _orthogonal_basis_state(shard.state)
        except ValueError:
            shards.append(shard)
            continue
        shards.append(replace(shard, state=rotate_toward(shard.state, away, perturbation)))
    coin.shards = shards


def run_coin_longevity(chain, registry, config, token, cycles: int, rng: np.random.Generator,
                       perturbation: Optional[float] = None, progress: bool = False):
    """
    Spend one minted coin over and over.

    Every cycle optionally rotates each shard state by `perturbation` radians, runs the
    composite verify_q with sampled measurements and, on acceptance, transfers the coin
    to the next owner. Shards that fail keep their reject-branch state, so losses add up
    until fewer than required_passes shards survive.

    Returns:
        (CoinLongevityReport, CustodyToken): the report and the live token of the last owner.
    """
    if cycles < 1:
        raise ValueError("cycles must be at least 1")
    report = CoinLongevityReport(required=config.required_passes)
    for cycle in tqdm(range(1, cycles + 1), disable=not progress, desc="coin longevity"):
        if perturbation:
            _perturb_shards(token.coin, perturbation)
        result = protocol.verify_q(chain, registry, config, token, rng)
        report.cycles = cycle
        report.passes.append(result.passes)
        report.failures.append(config.m - result.passes)
        if not result.accepted:
            report.rejected_cycle = cycle
            report.rejected_stage = result.stage
            logger.info(f"[Longevity] Coin rejected in cycle {cycle}: {result.detail}")
            break
        token = protocol.transfer(token, f"owner-{cycle}")
        report.owners.append(token.owner_label)
    return report, token

#!/usr/bin/env python3
"""
test_analytics.py

Reuse-attack probabilities against brute-force enumeration, the bound and its
admissibility region, the binomial bound, the double-spend oracle and the shard and
coin longevity experiments.
"""
import itertools
import math
import sys
from fractions import Fraction

import numpy as np
import pytest

import protocol
from analytics import (SWEEP_COLUMNS, DomainError, ReuseBoundInput, binomial_bound_holds,
                       binomial_upper_bound, double_spend_exact, eta_bound, eta_exact, log2_eta,
                       p_limit, perturbation_for, reuse_tail_probability, run_coin_longevity, run_longevity,
                       sweep)
from config import ProtocolConfig
from gf2 import sample_subspace
from ledger import Chain
from marketplace import Marketplace
from minischeme import OracleRegistry
from qsim import build_subspace_state, verify_state


def win_distribution(k, p):
    """P(exactly w attacker wins) for every w, by enumerating all 2^k win/loss sequences."""
    dist = [Fraction(0)] * (k + 1)
    for seq in itertools.product((0, 1), repeat=k):
        wins = sum(seq)
        dist[wins] += p ** wins * (1 - p) ** (k - wins)
    return dist


def negative_binomial_race(p, z):
    q = 1 - p
    total = 1.0
    for a in range(z + 1):
        prob_a = math.comb(z - 1 + a, a) * p ** a * q ** z
        total -= prob_a * (1 - (p / q) ** (z - a + 1))
    return total


def test_no_attacker_no_success():
    assert eta_exact(ReuseBoundInput(10, 7, 0)) == (0, 0, 0)
    assert log2_eta(ReuseBoundInput(10, 7, 0.0)) == -math.inf


def test_smallest_window_example():
    eta1, eta2, eta = eta_exact(ReuseBoundInput(3, 3, Fraction(1, 2)))
    assert (eta1, eta2, eta) == (Fraction(3, 8), Fraction(3, 8), Fraction(9, 64))


def test_joint_event_by_enumeration():
    k, m, p = 4, 4, Fraction(1, 3)
    joint = Fraction(0)
    for seq in itertools.product((0, 1), repeat=2 * k):
        first, second = sum(seq[:k]), sum(seq[k:])
        if first == m - 2 and second == 1:
            joint += p ** sum(seq) * (1 - p) ** (2 * k - sum(seq))
    assert eta_exact(ReuseBoundInput(k, m, p)).eta == joint


@pytest.mark.parametrize("p", [Fraction(1, 10), Fraction(3, 20)])
def test_windows_by_enumeration(p):
    for k in range(3, 13):
        dist = win_distribution(k, p)
        for m in range(2, k + 3):
            result = eta_exact(ReuseBoundInput(k, m, p))
            assert result.eta1 == dist[m - 2]
            assert result.eta2 == dist[1]
            assert result.eta == result.eta1 * result.eta2


def test_float_input_gives_float_output():
    eta1, eta2, eta = eta_exact(ReuseBoundInput(10, 7, 0.1))
    assert isinstance(eta, float)
    assert eta == pytest.approx(math.comb(10, 5) * 0.1 ** 5 * 0.9 ** 5 * 10 * 0.1 * 0.9 ** 9, rel=1e-12)


def test_bound_value():
    b = eta_bound(ReuseBoundInput(10, 7, 0.1))
    assert b.value == pytest.approx((10 / (2 * math.e)) * 2 ** -5, rel=1e-12)
    assert b.log2_value == pytest.approx(math.log2(10 / (2 * math.e)) - 5)
    assert b.admissible and b.bound == b.value


def test_p_limit_at_gamma_one():
    assert p_limit(1.0) == pytest.approx(1 / (2 * math.e + 1))
    assert round(p_limit(1.0), 4) == 0.1554


def test_inadmissible_points_report_no_bound():
    b = eta_bound(ReuseBoundInput(10, 7, 0.2))
    assert not b.admissible
    assert b.bound is None
    assert b.p_limit == pytest.approx(p_limit(0.5))


def test_eta_never_exceeds_bound_where_admissible():
    checked = 0
    for k in range(3, 41):
        for m in range(3, k + 3):
            for p in np.linspace(0.001, 0.16, 12):
                inp = ReuseBoundInput(k, m, float(p))
                b = eta_bound(inp)
                if not b.admissible:
                    continue
                checked += 1
                assert eta_exact(inp).eta <= b.value
    assert checked > 500


def test_eta_grows_with_p_inside_the_admissible_range():
    k, m = 20, 12
    limit = p_limit((m - 2) / k)
    values = [eta_exact(ReuseBoundInput(k, m, float(p))).eta for p in np.linspace(0.0, limit, 40)[:-1]]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_binomial_bound():
    for n in range(1, 65):
        for k in range(1, n + 1):
            assert binomial_bound_holds(n, k), (n, k)
    assert binomial_upper_bound(4, 2) == pytest.approx((2 * math.e) ** 2)


def test_gamma_range_with_noise_budget():
    assert ReuseBoundInput(10, 7, 0.1, epsilon=0.1).gamma_in_range()
    assert not ReuseBoundInput(10, 7, 0.1, epsilon=0.2).gamma_in_range()
    assert not ReuseBoundInput(10, 3, 0.1).gamma_in_range()       # gamma = 1/k
    assert not ReuseBoundInput(10, 13, 0.1).gamma_in_range()      # gamma > 1
    assert not eta_bound(ReuseBoundInput(10, 7, 0.05, epsilon=0.2)).admissible


@pytest.mark.parametrize("kwargs", [
    {"k": 2, "m": 3, "p": 0.1},
    {"k": 10, "m": 7, "p": 1.0},
    {"k": 10, "m": 7, "p": -0.1},
    {"k": 10, "m": 7, "p": 0.1, "epsilon": 1.0},
])
def test_domain_errors(kwargs):
    with pytest.raises(DomainError):
        ReuseBoundInput(**kwargs)


def test_more_wins_than_blocks():
    inp = ReuseBoundInput(5, 3, 0.1, shard_wins_needed=6)
    with pytest.raises(DomainError):
        eta_exact(inp)
    with pytest.raises(DomainError):
        log2_eta(inp)


def test_log_domain_matches_and_survives_large_k():
    for k, m, p in [(10, 7, 0.1), (30, 12, 0.05), (40, 42, 0.15)]:
        inp = ReuseBoundInput(k, m, p)
        assert log2_eta(inp) == pytest.approx(math.log2(eta_exact(inp).eta), rel=1e-9)
    deep = log2_eta(ReuseBoundInput(5000, 2502, 0.01))
    assert math.isfinite(deep) and deep < -1000


def test_reuse_tail_probability():
    k, p = 6, 0.2
    dist = win_distribution(k, Fraction(p))
    exact = sum(dist[3:]) * sum(dist[1:])
    assert reuse_tail_probability(k, 3, p) == pytest.approx(float(exact), rel=1e-12)
    assert reuse_tail_probability(k, 0, 0.0) == 0.0


def test_sweep():
    frame = sweep([10, 20], [0.3, 0.5], [0.05, 0.1])
    assert len(frame) == 8
    assert list(frame.columns[:len(SWEEP_COLUMNS)]) == SWEEP_COLUMNS
    assert set(frame["m"]) == {5, 7, 8, 12}
    # gamma = 1.5 needs more shard wins than a window of 10 has
    assert len(sweep([10], [1.5, 0.5], [0.1])) == 1


def test_double_spend_matches_unbounded_race():
    for p in (0.05, 0.1, 0.3):
        for z in (1, 2, 6):
            assert double_spend_exact(p, z, max_depth=2000) == pytest.approx(negative_binomial_race(p, z),
                                                                             abs=1e-9)
    assert double_spend_exact(0.0, 6) == 0.0
    assert double_spend_exact(0.1, 6) < double_spend_exact(0.1, 1)


@pytest.fixture
def coin():
    A = sample_subspace(8, 4, np.random.default_rng(0))
    return (lambda: build_subspace_state(A)), (lambda psi, rng: verify_state(A, psi, rng))


def test_ideal_coin_never_wears(coin):
    factory, verifier = coin
    report = run_longevity(factory, verifier, rounds=10_000)
    assert report.verifications == 10_000
    assert max(report.trace_distances) == 0.0
    assert report.worn_out_round is None
    assert report.survived_rounds == 10_000


@pytest.mark.parametrize("eps", [0.01, 0.04])
def test_perturbed_coin_drifts_by_sqrt_eps_per_round(coin, eps):
    factory, verifier = coin
    report = run_longevity(factory, verifier, rounds=100, perturbation=perturbation_for(eps), threshold=100)
    assert report.rejected_round is None
    assert max(report.trace_distances) <= math.sqrt(eps) + 1e-9
    assert report.acceptance_probabilities == pytest.approx([1 - eps] * 100, abs=1e-9)


def test_wear_out_round(coin):
    factory, verifier = coin
    report = run_longevity(factory, verifier, rounds=60, perturbation=perturbation_for(0.01), threshold=5.0)
    assert report.survived_rounds == 50
    assert report.worn_out_round == 51
    assert report.verifications == 60
    assert report.to_dict()["max_distance"] == pytest.approx(0.1)


def test_sampled_rounds_eventually_reject(coin):
    factory, verifier = coin
    report = run_longevity(factory, verifier, rounds=200, perturbation=perturbation_for(0.04),
                           rng=np.random.default_rng(1))
    assert report.rejected_round is not None
    assert report.verifications == report.rejected_round
    assert len(report.trace_distances) == report.rejected_round - 1


def test_longevity_needs_a_round(coin):
    factory, verifier = coin
    with pytest.raises(ValueError):
        run_longevity(factory, verifier, rounds=0)


@pytest.fixture
def minted():
    config = ProtocolConfig(n=8, m=3, difficulty_bits=2, retarget_interval=10 ** 6)
    rng = np.random.default_rng(3)
    chain = Chain.from_config(config)
    registry = OracleRegistry.from_rng(rng, config.n)
    market = Marketplace()
    for _ in range(config.m):
        protocol.mint_shard(chain, registry, config, market, rng)
    _, token = protocol.mint_bitcoin(chain, registry, config, market, rng, owner_label="miner")
    return chain, registry, config, token


def test_ideal_coin_survives_every_spend(minted):
    chain, registry, config, token = minted
    report, last = run_coin_longevity(chain, registry, config, token, 100, np.random.default_rng(5))
    assert report.cycles == 100 and report.rejected_cycle is None
    assert report.passes == [3] * 100 and report.failures == [0] * 100
    assert report.owners == [f"owner-{i}" for i in range(1, 101)]
    assert last.live and last.owner_label == "owner-100"
    assert not token.live
    assert report.to_dict()["survived_cycles"] == 100


def test_perturbed_coin_is_eventually_rejected(minted):
    chain, registry, config, token = minted
    report, last = run_coin_longevity(chain, registry, config, token, 500, np.random.default_rng(6),
                                      perturbation=perturbation_for(0.04))
    assert report.required == 3
    assert report.rejected_cycle is not None
    assert report.rejected_stage == "quantum"
    assert report.cycles == report.rejected_cycle == len(report.passes)
    assert all(p == 3 for p in report.passes[:-1])
    assert report.failures[-1] == 3 - report.passes[-1] >= 1
    assert report.survived_cycles == report.rejected_cycle - 1
    assert last.live


def test_coin_longevity_needs_a_cycle(minted):
    chain, registry, config, token = minted
    with pytest.raises(ValueError):
        run_coin_longevity(chain, registry, config, token, 0, np.random.default_rng(7))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

#!/usr/bin/env python3
"""
test_simnet.py

Honest-network timing with and without retargeting, the reuse-attack Monte Carlo against
the closed forms, and the double-spend baseline.
"""
import io
import json
import math
import sys

import numpy as np
import pandas as pd
import pytest

from analytics import double_spend_exact, eta_bound, ReuseBoundInput
from config import ConfigError, ProtocolConfig
from ledger import Tag, audit, count
from minischeme import OracleRegistry
from simnet import (AttackerModel, EventKind, mean_block_interval, reports_to_csv, run_attack_trace,
                    run_double_spend_baseline, run_honest_network, run_reuse_attack_trials)


def band(p, trials, sigmas=4):
    return sigmas * math.sqrt(max(p * (1 - p), 1e-12) / trials)


def attack_config(k, m, t_block=600):
    return ProtocolConfig(n=8, m=m, t_max=k * t_block, t_block=t_block)


# --- Honest network ---

def test_zero_duration_is_genesis_only():
    result = run_honest_network(ProtocolConfig(), miners=3, duration=0, rng=np.random.default_rng(0))
    assert len(result.chain) == 1
    assert len(result.events) == 0


def test_network_needs_a_miner():
    with pytest.raises(ConfigError):
        run_honest_network(ProtocolConfig(), miners=0, duration=10, rng=np.random.default_rng(0))


def test_fixed_difficulty_block_interval():
    config = ProtocolConfig(retarget_interval=10 ** 9)
    result = run_honest_network(config, miners=1, duration=10 ** 9, rng=np.random.default_rng(1),
                                max_blocks=10_000)
    assert result.chain.height == 10_000
    assert mean_block_interval(result.chain) == pytest.approx(600, rel=0.05)


def test_retargeting_holds_the_target_interval():
    config = ProtocolConfig(t_block=20, retarget_interval=128)
    result = run_honest_network(config, miners=2, duration=10 ** 9, rng=np.random.default_rng(2),
                                max_blocks=10_000)
    assert mean_block_interval(result.chain, skip=128) == pytest.approx(20, rel=0.05)
    assert audit(result.chain)
    found = [e for e in result.events if e.kind is EventKind.BLOCK_FOUND]
    assert len(found) == 10_000
    assert [(e.tick, e.seq) for e in result.events] == sorted((e.tick, e.seq) for e in result.events)


def test_same_seed_same_event_log():
    def run(seed):
        rng = np.random.default_rng(seed)
        config = ProtocolConfig(n=8, m=3)
        return run_honest_network(config, miners=2, duration=12_000, rng=rng,
                                  registry=OracleRegistry.from_rng(rng, 8))

    a, b = run(3), run(3)
    assert a.log_hash == b.log_hash
    assert len(a.events) > 0
    assert run(4).log_hash != a.log_hash


def test_protocol_network_mints_coins():
    rng = np.random.default_rng(5)
    config = ProtocolConfig(n=8, m=3)
    result = run_honest_network(config, miners=1, duration=10 ** 7, rng=rng,
                                registry=OracleRegistry.from_rng(rng, 8), max_blocks=30)
    chain = result.chain
    assert len(result.coins) >= 1
    assert count(chain, Tag.BITCOIN) == len(result.coins)
    assert count(chain, Tag.SHARD) + count(chain, Tag.BITCOIN) == chain.height
    serials = [e.serial_key for b in chain.active_blocks() for e in b.entries if e.tag is Tag.SHARD]
    assert len(serials) == len(set(serials))
    assert audit(chain)
    kinds = {e.kind for e in result.events}
    assert {EventKind.BLOCK_FOUND, EventKind.SHARD_PUBLISHED, EventKind.COIN_MINTED} <= kinds


def test_event_log_outputs(tmp_path):
    result = run_honest_network(ProtocolConfig(), miners=2, duration=6000, rng=np.random.default_rng(6))
    path = tmp_path / "events.jsonl"
    assert result.log.write(str(path)) == result.log_hash
    lines = path.read_text().splitlines()
    assert len(lines) == len(result.events)
    assert json.loads(lines[0])["kind"] == "BlockFound"
    assert list(result.log.frame().columns) == ["tick", "seq", "kind", "actor", "payload"]


# --- Reuse attack ---

def test_powerless_attacker_never_succeeds():
    report = run_reuse_attack_trials(attack_config(10, 3), 0.0, 10_000, np.random.default_rng(7))
    assert report.successes == 0


def test_measured_rate_against_tail_and_bound():
    trials = 10 ** 6
    report = run_reuse_attack_trials(attack_config(10, 7), 0.1, trials, np.random.default_rng(8))
    assert report.admissible
    assert report.measured_rate <= report.bound
    assert abs(report.measured_rate - report.analytic_tail) <= band(report.analytic_tail, trials)
    assert report.analytic_reference == report.analytic_tail
    assert report.bound == pytest.approx(eta_bound(ReuseBoundInput(10, 7, 0.1)).value)


def test_attack_grid_stays_under_the_bound():
    trials, checked = 10 ** 5, 0
    rng = np.random.default_rng(9)
    for k in (10, 20, 40):
        for gamma in (0.3, 0.5, 1.0):
            m = int(round(gamma * k)) + 2
            for p in (0.05, 0.1, 0.15):
                report = run_reuse_attack_trials(attack_config(k, m), p, trials, rng)
                if not report.admissible:
                    continue
                checked += 1
                assert report.measured_rate <= report.bound
                assert abs(report.measured_rate - report.analytic_tail) <= band(report.analytic_tail, trials)
    assert checked >= 10


@pytest.mark.slow
@pytest.mark.parametrize("rule", ["at_least", "exact"])
def test_full_size_attack_grid(rule):
    trials, checked = 10 ** 6, 0
    rng = np.random.default_rng(90 if rule == "exact" else 91)
    for k in (10, 20, 40):
        for gamma in (0.3, 0.5, 1.0):
            m = int(round(gamma * k)) + 2
            for p in (0.05, 0.1, 0.15):
                report = run_reuse_attack_trials(attack_config(k, m), p, trials, rng,
                                                 attacker=AttackerModel(p, rule=rule))
                expected = report.analytic_reference
                # a few counts of slack where the expected count is near zero
                assert abs(report.measured_rate - expected) <= band(expected, trials) + 3 / trials
                if report.admissible:
                    checked += 1
                    assert report.measured_rate <= report.bound
    assert checked >= 10


def test_exact_rule_matches_eta():
    trials = 10 ** 5
    attacker = AttackerModel(0.15, rule="exact")
    report = run_reuse_attack_trials(attack_config(10, 4), 0.15, trials, np.random.default_rng(10),
                                     attacker=attacker)
    assert report.rule == "exact"
    assert report.analytic_reference == report.analytic_eta
    assert abs(report.measured_rate - report.analytic_eta) <= band(report.analytic_eta, trials)


def test_shard_wins_override():
    attacker = AttackerModel(0.1, shard_wins_needed=0)
    report = run_reuse_attack_trials(attack_config(10, 7), 0.1, 10 ** 5, np.random.default_rng(11),
                                     attacker=attacker)
    assert report.shard_wins_needed == 0
    expected = 1 - 0.9 ** 10
    assert abs(report.measured_rate - expected) <= band(expected, 10 ** 5)


def test_missing_closed_form_is_logged(caplog):
    attacker = AttackerModel(0.1, shard_wins_needed=11, rule="exact")
    report = run_reuse_attack_trials(attack_config(10, 7), 0.1, 10_000, np.random.default_rng(16),
                                     attacker=attacker)
    assert report.analytic_eta is None
    assert report.analytic_reference is None
    assert report.successes == 0
    assert "No closed-form eta" in caplog.text


def test_worker_count_does_not_change_results():
    config = attack_config(10, 5)
    one = run_reuse_attack_trials(config, 0.1, 200_000, np.random.default_rng(12), workers=1, chunk_size=30_000)
    four = run_reuse_attack_trials(config, 0.1, 200_000, np.random.default_rng(12), workers=4, chunk_size=30_000)
    assert one.successes == four.successes


@pytest.mark.parametrize("kwargs", [{"p": 1.0}, {"p": -0.1}, {"p": 0.1, "rule": "most"}])
def test_attacker_model_validation(kwargs):
    with pytest.raises(ConfigError):
        AttackerModel(**kwargs)


def test_report_outputs(tmp_path):
    rng = np.random.default_rng(13)
    reports = [run_reuse_attack_trials(attack_config(10, 7), p, 10_000, rng, seed=13) for p in (0.05, 0.1)]
    path = tmp_path / "attack.csv"
    text = reports_to_csv(reports, str(path))
    frame = pd.read_csv(io.StringIO(text))
    assert len(frame) == 2
    assert list(frame["p"]) == [0.05, 0.1]
    assert path.read_text() == text

    data = json.loads(reports[0].to_json(str(tmp_path / "attack.json")))
    assert data["seed"] == 13
    assert data["trials"] == 10_000
    assert data["config_digest"] == attack_config(10, 7).digest()


def test_attack_trace():
    config = attack_config(10, 3)
    log = run_attack_trace(config, AttackerModel(0.5), 4, np.random.default_rng(14))
    assert len(log) == 12
    kinds = [e.kind for e in log.events]
    assert kinds[0::3] == [EventKind.ATTACK_WINDOW_START] * 4
    assert kinds[1::3] == [EventKind.ATTACK_WINDOW_START] * 4
    assert set(kinds[2::3]) <= {EventKind.ATTACK_SUCCESS, EventKind.ATTACK_FAIL}
    assert [e.tick for e in log.events] == sorted(e.tick for e in log.events)


# --- Double spend ---

def test_double_spend_baseline():
    config = ProtocolConfig()
    assert run_double_spend_baseline(config, 0.0, 6, 1000, np.random.default_rng(15)) == 0.0
    rng = np.random.default_rng(16)
    deep = run_double_spend_baseline(config, 0.1, 6, 100_000, rng)
    shallow = run_double_spend_baseline(config, 0.1, 1, 100_000, rng)
    assert deep < shallow

    trials = 100_000
    expected = double_spend_exact(0.3, 1)
    assert expected == pytest.approx(0.3086, abs=1e-4)
    rate = run_double_spend_baseline(config, 0.3, 1, trials, rng)
    assert abs(rate - expected) <= band(expected, trials)


def test_double_spend_validation():
    with pytest.raises(ConfigError):
        run_double_spend_baseline(ProtocolConfig(), 0.1, 0, 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        run_double_spend_baseline(ProtocolConfig(), 1.0, 6, 10, np.random.default_rng(0))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

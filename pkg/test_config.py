#!/usr/bin/env python3
"""
test_config.py

Checks ProtocolConfig validation, the lambda default, the run-file parser and the
flag > file > environment > default precedence.
"""
import sys

import pytest

import config
from config import ConfigError, ProtocolConfig, load_config, read_config_file


def test_defaults_are_valid_and_lambda_follows_m():
    cfg = ProtocolConfig(n=8, m=4)
    assert cfg.lam == pytest.approx(1 / 8)
    assert cfg.k == cfg.t_max // cfg.t_block
    # With epsilon = 0 the default lambda asks every shard to pass.
    assert cfg.required_passes == 4


def test_required_passes_with_noise_budget():
    cfg = ProtocolConfig(n=8, m=10, lam=0.1, epsilon=0.1)
    assert cfg.required_passes == 8


@pytest.mark.parametrize("kwargs", [
    {"t_max": 1200, "t_block": 600},      # k = 2
    {"n": 7},                             # odd n
    {"n": 22},                            # beyond the simulator cap
    {"m": 0},
    {"epsilon": 1.0},
    {"lam": 0.9, "epsilon": 0.2},         # lambda >= 1 - epsilon
    {"m": 2, "lam": 0.6},                 # floor((1 - eps - lambda) m) = 0
    {"supply_cap": -1},
])
def test_invalid_configs_raise(kwargs):
    with pytest.raises(ConfigError):
        ProtocolConfig(**kwargs)


def test_with_overrides_recomputes_default_lambda():
    cfg = ProtocolConfig(m=3).with_overrides(m=5, seed=None)
    assert cfg.m == 5
    assert cfg.lam == pytest.approx(0.1)
    assert cfg.seed is None


def test_digest_is_stable_and_sensitive():
    a = ProtocolConfig(n=8, m=3, seed=1)
    b = ProtocolConfig(n=8, m=3, seed=1)
    c = ProtocolConfig(n=8, m=3, seed=2)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert "seed" not in ProtocolConfig(seed=None).render()


def test_read_config_file_accepts_bare_and_prefixed_keys(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("n=6\nm=4\nlambda=0.2\nQB_SEED=42\n")
    values = read_config_file(str(path))
    assert values == {"n": 6, "m": 4, "lam": 0.2, "seed": 42}


def test_read_config_file_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("n=6\nprice=12\n")
    with pytest.raises(ConfigError):
        read_config_file(str(path))


def test_read_config_file_rejects_bad_values(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("n=six\n")
    with pytest.raises(ConfigError):
        read_config_file(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_config_file(str(tmp_path / "absent.cfg"))


def test_precedence_flags_over_file_over_env(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "SEED", "7")
    assert load_config().seed == 7

    path = tmp_path / "run.cfg"
    path.write_text("n=6\nseed=11\n")
    cfg = load_config(str(path))
    assert (cfg.n, cfg.seed) == (6, 11)

    cfg = load_config(str(path), {"n": 10, "seed": None})
    assert (cfg.n, cfg.seed) == (10, 11)


def test_file_m_without_lambda_gets_default_lambda(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("m=5\n")
    assert load_config(str(path)).lam == pytest.approx(0.1)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

"""
config.py

Settings for the Quantum Bitcoin simulator.

Module-level constants come from the environment (and a local .env file) and act as
defaults. ProtocolConfig bundles the security parameters that every protocol operation
needs; load_config() layers a flat KEY=VALUE run file and command-line overrides on top.
"""
import hashlib
import math
import os
from dataclasses import dataclass, asdict, replace
from typing import Optional

from dotenv import load_dotenv, dotenv_values

# Load environment variables from .env file
load_dotenv()

# --- Security parameters ---
N                   = int(os.getenv("QB_N", 8))            # qubits per shard state
M                   = int(os.getenv("QB_M", 3))            # shards per coin
T_MAX               = int(os.getenv("QB_T_MAX", 6000))     # max shard age in ticks
T_BLOCK             = int(os.getenv("QB_T_BLOCK", 600))    # target inter-block ticks
LAMBDA              = os.getenv("QB_LAMBDA")               # unset -> 1/(2m)
EPSILON             = float(os.getenv("QB_EPSILON", 0.0))
SUPPLY_CAP          = int(os.getenv("QB_SUPPLY_CAP", 21000))

# --- Chain settings ---
RETARGET_INTERVAL   = int(os.getenv("QB_RETARGET_INTERVAL", 32))
DIFFICULTY_BITS     = int(os.getenv("QB_DIFFICULTY_BITS", 8))   # initial threshold 2^(256-bits)
MAX_NONCE_TRIALS    = int(os.getenv("QB_MAX_NONCE_TRIALS", 5_000_000))
MINT_RETRY_LIMIT    = int(os.getenv("QB_MINT_RETRY_LIMIT", 16))

# --- Run settings ---
SEED                = os.getenv("QB_SEED")
DATA_FOLDER         = os.getenv("QB_DATA_FOLDER", "./runs")
LOG_LEVEL           = os.getenv("QB_LOG_LEVEL", "INFO").upper()

# Keys accepted in a run config file, mapped to ProtocolConfig fields.
CONFIG_KEYS = {
    "n": "n",
    "m": "m",
    "t_max": "t_max",
    "t_block": "t_block",
    "lambda": "lam",
    "epsilon": "epsilon",
    "supply_cap": "supply_cap",
    "seed": "seed",
    "retarget_interval": "retarget_interval",
    "difficulty_bits": "difficulty_bits",
    "max_nonce_trials": "max_nonce_trials",
}
_INT_FIELDS = {"n", "m", "t_max", "t_block", "supply_cap", "seed",
               "retarget_interval", "difficulty_bits", "max_nonce_trials"}
_FLOAT_FIELDS = {"lam", "epsilon"}


class ConfigError(ValueError):
    """Raised when a configuration violates the protocol's parameter constraints."""


@dataclass(frozen=True)
class ProtocolConfig:
    n: int = N
    m: int = M
    t_max: int = T_MAX
    t_block: int = T_BLOCK
    lam: Optional[float] = None
    epsilon: float = EPSILON
    supply_cap: int = SUPPLY_CAP
    seed: Optional[int] = None
    retarget_interval: int = RETARGET_INTERVAL
    difficulty_bits: int = DIFFICULTY_BITS
    max_nonce_trials: int = MAX_NONCE_TRIALS

    def __post_init__(self):
        if self.lam is None:
            object.__setattr__(self, "lam", 1.0 / (2 * self.m) if self.m > 0 else 0.5)
        self.validate()

    @property
    def k(self) -> int:
        """Blocks mined per T_max window."""
        return self.t_max // self.t_block

    @property
    def required_passes(self) -> int:
        """Minimum number of shard verifications a coin needs: ceil((1 - eps - lambda) * m)."""
        return math.ceil(round((1.0 - self.epsilon - self.lam) * self.m, 9))

    @property
    def initial_threshold(self) -> int:
        return 1 << (256 - self.difficulty_bits)

    def validate(self):
        if self.n % 2 or not 4 <= self.n <= 20:
            raise ConfigError(f"n must be even and within [4, 20], got {self.n}")
        if self.m < 1:
            raise ConfigError(f"m must be at least 1, got {self.m}")
        if self.t_block <= 0 or self.t_max <= 0:
            raise ConfigError("t_max and t_block must be positive")
        if self.k < 3:
            raise ConfigError(f"k = floor(t_max / t_block) must be at least 3, got {self.k}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not 0.0 < self.lam < 1.0 - self.epsilon:
            raise ConfigError(f"lambda must satisfy 0 < lambda < 1 - epsilon, got {self.lam}")
        if math.floor(round((1.0 - self.epsilon - self.lam) * self.m, 9)) < 1:
            raise ConfigError("floor((1 - epsilon - lambda) * m) must be at least 1")
        if self.supply_cap < 0:
            raise ConfigError("supply_cap must be non-negative")
        if self.retarget_interval < 1:
            raise ConfigError("retarget_interval must be at least 1")
        if not 0 <= self.difficulty_bits < 256:
            raise ConfigError("difficulty_bits must lie in [0, 256)")
        if self.max_nonce_trials < 1:
            raise ConfigError("max_nonce_trials must be at least 1")

    def to_items(self) -> dict:
        """Flat key-value view using the config-file key names."""
        values = asdict(self)
        return {key: values[field] for key, field in CONFIG_KEYS.items()}

    def render(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in sorted(self.to_items().items())
                       if value is not None)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()

    def with_overrides(self, **changes) -> "ProtocolConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        if "m" in changes and "lam" not in changes:
            changes["lam"] = None
        return replace(self, **changes)


def _parse_value(field: str, raw: str):
    try:
        if field in _INT_FIELDS:
            return int(raw, 0)
        if field in _FLOAT_FIELDS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"Cannot parse value {raw!r} for {field}") from None
    return raw


def _env_defaults() -> dict:
    values = {}
    if LAMBDA is not None:
        values["lam"] = _parse_value("lam", LAMBDA)
    if SEED is not None:
        values["seed"] = _parse_value("seed", SEED)
    return values


def read_config_file(path: str) -> dict:
    """
    Parse a flat KEY=VALUE run file into ProtocolConfig field values.

    Keys may be written bare (n=8) or with the QB_ prefix used in .env files.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No config file found at {path}")
    values = {}
    for key, raw in dotenv_values(path).items():
        name = key.lower()
        if name.startswith("qb_"):
            name = name[3:]
        if name not in CONFIG_KEYS:
            raise ConfigError(f"Unknown config key {key!r} in {path}")
        if raw is None or raw == "":
            continue
        field = CONFIG_KEYS[name]
        values[field] = _parse_value(field, raw)
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ProtocolConfig:
    """
    Build a validated ProtocolConfig.

    Precedence: overrides (command-line flags) > config file > environment/.env > defaults.

    Args:
        path (str): optional flat key-value config file.
        overrides (dict): ProtocolConfig field values; None entries are ignored.

    Returns:
        ProtocolConfig
    """
    values = _env_defaults()
    if path:
        values.update(read_config_file(path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    if "m" in values and "lam" not in values:
        values["lam"] = None
    try:
        return ProtocolConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None

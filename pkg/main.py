#!/usr/bin/env python3
"""
main.py

Command-line driver for the Quantum Bitcoin simulator.

Subcommands: mint, verify, simulate, attack, bound, longevity, inspect, dump-chain, replay.
Every run writes a manifest.json next to its outputs; `replay` re-executes a manifest and
checks that the primary outputs come out byte-identical.

Coins leave `mint` as wallet files. `verify` moves the coin out of its wallet, measures it
with an rng drawn from --seed and stores it back; a second process cannot load the same
wallet in between. --lab switches mint, verify and inspect to plain lab dumps of the
simulated states, which can be read any number of times.

Exit codes:
    0  ok / coin accepted
    1  verification rejected (or replay mismatch)
    2  configuration error
    3  input or parse error
    4  protocol or ledger failure (supply cap, too few fresh shards, mining stall, ...)
    5  unexpected internal error
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np
from colorama import Fore, init

import analytics
import ledger
import minischeme
import protocol
import simnet
import config as settings
from analytics import DomainError
from config import ConfigError, ProtocolConfig, load_config
from gf2 import CapacityError
from ledger import Chain, ChainIntegrityError, LedgerError, Tag
from marketplace import Marketplace
from minischeme import OracleRegistry
from qsim import dump_state, verify_state

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PROTOCOL = 4
EXIT_INTERNAL = 5

# Logger configuration
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
    format="%(asctime)s - [%(levelname)s] %(message)s"
)
logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    out_dir: str
    seed: Optional[int]
    config: Dict[str, object]
    config_digest: str
    start_tick: int = 0
    end_tick: int = 0
    outputs: Dict[str, str] = field(default_factory=dict)
    output_hashes: Dict[str, str] = field(default_factory=dict)
    chain_hash: Optional[str] = None
    lab: bool = False

    def add_output(self, name: str, path: str):
        self.outputs[name] = path
        self.output_hashes[name] = _file_hash(path)

    def write(self) -> str:
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as f:
            json.dump(asdict(self), f, sort_keys=True, indent=1)
            f.write("\n")
        return path

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        with open(path) as f:
            return cls(**json.load(f))


def _file_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _csv_numbers(text: str, kind=float) -> List:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


# --- Shared plumbing ---

def _config(args) -> ProtocolConfig:
    overrides = {"n": args.n, "m": args.m, "t_max": args.t_max, "t_block": args.t_block,
                 "lam": args.lam, "epsilon": args.epsilon, "supply_cap": args.supply_cap,
                 "seed": args.seed, "retarget_interval": args.retarget_interval,
                 "difficulty_bits": args.difficulty_bits}
    return load_config(args.config, overrides)


def _seed(cfg: ProtocolConfig) -> int:
    if cfg.seed is not None:
        return cfg.seed
    seed = int(np.random.SeedSequence().entropy % (2 ** 63))
    logger.info(f"No seed given; using generated seed {seed}")
    return seed


def _start(args, cfg: ProtocolConfig, seed: Optional[int]) -> RunManifest:
    os.makedirs(args.out_dir, exist_ok=True)
    argv = list(args.argv)
    if seed is not None and "--seed" not in argv:
        argv += ["--seed", str(seed)]
    return RunManifest(args.command, argv, args.out_dir, seed, cfg.to_items(), cfg.digest(),
                       lab=getattr(args, "lab", False))


def _out(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _verdict(ok: bool, text: str):
    print((Fore.GREEN if ok else Fore.RED) + text)


# --- Commands ---

def cmd_mint(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    manifest = _start(args, cfg, seed)
    rng = np.random.default_rng(seed)

    chain = Chain.from_config(cfg)
    registry = OracleRegistry.from_rng(rng, cfg.n)
    market = Marketplace()
    vault = protocol.Vault()
    for i in range(args.count):
        if ledger.count(chain, Tag.BITCOIN) >= cfg.supply_cap:
            raise protocol.SupplyCapReachedError(f"supply cap of {cfg.supply_cap} coins reached")
        while market.size() < cfg.m:
            protocol.mint_shard(chain, registry, cfg, market, rng)
        coin, token = protocol.mint_bitcoin(chain, registry, cfg, market, rng, owner_label=f"coin-{i}",
                                            vault=vault)
        path = _out(args, f"coin_{i:04d}.json")
        if args.lab:
            protocol.export_coin(coin, path, include_states=True)
        else:
            protocol.store_coin(token, path)
        manifest.add_output(f"coin_{i:04d}", path)
        print(Fore.CYAN + f"coin {i}: descriptor " + " ".join(s.hex() for s in coin.descriptor))

    ledger.write_log(chain, _out(args, "chain.bin"))
    minischeme.export_registry(registry, _out(args, "oracle.jsonl"))
    manifest.add_output("chain", _out(args, "chain.bin"))
    manifest.add_output("oracle", _out(args, "oracle.jsonl"))
    manifest.chain_hash = chain.tip.pow_hash.hex()
    manifest.end_tick = chain.tip.timestamp
    manifest.write()
    logger.info(f"[Mint] {args.count} coins, chain height {chain.height}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    manifest = _start(args, cfg, seed)
    rng = np.random.default_rng(seed)
    chain = ledger.read_log(args.chain)
    oracle_path = args.oracle or os.path.join(os.path.dirname(args.chain) or ".", "oracle.jsonl")
    with open(oracle_path) as f:
        registry = minischeme.import_registry(f.read())
    if registry.n != cfg.n:
        raise ConfigError(f"oracle was built for n={registry.n}, config says n={cfg.n}")
    if args.lab:
        with open(args.coin) as f:
            candidate = protocol.import_coin(f.read(), cfg, lab=True)
    else:
        candidate = protocol.load_coin(args.coin, cfg)

    report = protocol.verify_q(chain, registry, cfg, candidate, rng)
    if not args.lab:
        protocol.store_coin(candidate, args.coin)
    path = _out(args, "verify.json")
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    manifest.add_output("report", path)
    manifest.chain_hash = chain.tip.pow_hash.hex()
    manifest.write()

    if report.accepted:
        _verdict(True, f"ACCEPT: {report.passes}/{cfg.m} shards passed (required {report.required})")
        return EXIT_OK
    _verdict(False, f"REJECT at stage {report.stage}: {report.detail}")
    return EXIT_REJECTED


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    manifest = _start(args, cfg, seed)
    rng = np.random.default_rng(seed)
    registry = OracleRegistry.from_rng(rng, cfg.n) if args.with_protocol else None
    result = simnet.run_honest_network(cfg, args.miners, args.duration, rng, hashrate=args.hashrate,
                                       registry=registry, random_tiebreak=args.random_tiebreak,
                                       max_blocks=args.max_blocks)
    ledger.audit(result.chain)
    result.log.write(_out(args, "events.jsonl"))
    ledger.write_log(result.chain, _out(args, "chain.bin"))
    summary = {"height": result.chain.height, "blocks": len(result.chain), "reorgs": result.chain.reorgs,
               "coins": len(result.coins), "shards": ledger.count(result.chain, Tag.SHARD),
               "mean_interval": simnet.mean_block_interval(result.chain),
               "event_log_hash": result.log_hash, "seed": seed, "config_digest": cfg.digest()}
    with open(_out(args, "summary.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    for name in ("events.jsonl", "chain.bin", "summary.json"):
        manifest.add_output(name.split(".")[0], _out(args, name))
    manifest.chain_hash = result.chain.tip.pow_hash.hex()
    manifest.end_tick = result.events[-1].tick if result.events else 0
    manifest.write()
    print(Fore.CYAN + f"height {summary['height']}, mean interval {summary['mean_interval']:.1f} ticks, "
                      f"{summary['reorgs']} reorgs")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    manifest = _start(args, cfg, seed)
    rng = np.random.default_rng(seed)
    attacker = simnet.AttackerModel(args.p, args.shard_wins, args.rule)
    report = simnet.run_reuse_attack_trials(cfg, args.p, args.trials, rng, attacker=attacker,
                                            workers=args.workers, progress=args.progress, seed=seed)
    if args.format == "csv":
        path = _out(args, "attack.csv")
        simnet.reports_to_csv([report], path)
    else:
        path = _out(args, "attack.json")
        report.to_json(path)
    manifest.add_output("report", path)

    reference = report.analytic_reference
    analytic = "n/a" if reference is None else f"{reference:.6e}"
    print(Fore.CYAN + f"measured {report.measured_rate:.6e}  |  analytic {analytic}  |  bound {report.bound:.6e}")
    if not report.admissible:
        print(Fore.YELLOW + f"bound not applicable: p={args.p} is outside the admissible range "
                            f"(p < {report.p_limit:.4f} and 1/k < gamma <= 1)")
    if args.confirmations:
        rate = simnet.run_double_spend_baseline(cfg, args.p, args.confirmations, args.trials, rng)
        exact = analytics.double_spend_exact(args.p, args.confirmations)
        path = _out(args, "double_spend.json")
        with open(path, "w") as f:
            json.dump({"p": args.p, "confirmations": args.confirmations, "trials": args.trials,
                       "measured_rate": rate, "race_oracle": exact}, f, sort_keys=True, indent=1)
            f.write("\n")
        manifest.add_output("double_spend", path)
        print(Fore.CYAN + f"double spend after {args.confirmations} confirmations: {rate:.6e} "
                          f"(race oracle {exact:.6e})")
    if args.trace:
        log = simnet.run_attack_trace(cfg, attacker, args.trace, rng)
        log.write(_out(args, "attack_trace.jsonl"))
        manifest.add_output("trace", _out(args, "attack_trace.jsonl"))
        won = sum(e.kind is simnet.EventKind.ATTACK_SUCCESS for e in log.events)
        print(Fore.CYAN + f"trace: {won} of {args.trace} traced trials succeeded")
    manifest.end_tick = 2 * cfg.k * cfg.t_block
    manifest.write()
    return EXIT_OK


def cmd_bound(args) -> int:
    cfg = _config(args)
    manifest = _start(args, cfg, None)
    frame = analytics.sweep(_csv_numbers(args.k_values, int), _csv_numbers(args.gammas),
                            _csv_numbers(args.p_values), epsilon=cfg.epsilon, progress=args.progress)
    if args.format == "json":
        path = _out(args, "bound.json")
        frame.to_json(path, orient="records", lines=True)
    else:
        path = _out(args, "bound.csv")
        frame[analytics.SWEEP_COLUMNS + ["p_limit"]].to_csv(path, index=False)
    manifest.add_output("sweep", path)
    manifest.write()
    for gamma, limit in sorted(set(zip(frame["gamma"], frame["p_limit"]))):
        print(Fore.CYAN + f"gamma={gamma:.4f}: admissible p < {limit:.4f}")
    return EXIT_OK


def cmd_longevity(args) -> int:
    cfg = _config(args)
    seed = _seed(cfg)
    manifest = _start(args, cfg, seed)
    rng = np.random.default_rng(seed)
    loss = cfg.epsilon if args.perturb is None else args.perturb
    if args.coin:
        return _coin_longevity(args, cfg, manifest, rng, loss)
    registry = OracleRegistry.from_rng(rng, cfg.n)
    shard = minischeme.mint_m(registry, cfg.n, rng)
    A = minischeme.lab_lookup_subspace(registry, shard.serial)

    def verifier(state, r):
        return verify_state(A, state, r)

    report = analytics.run_longevity(lambda: shard.state, verifier, args.rounds,
                                     perturbation=analytics.perturbation_for(loss) if loss else None,
                                     threshold=args.threshold, rng=rng if args.sample else None,
                                     progress=args.progress)
    path = _out(args, "longevity.json")
    with open(path, "w") as f:
        json.dump({**report.to_dict(), "epsilon": loss, "distance_bound": loss ** 0.5}, f, sort_keys=True, indent=1)
        f.write("\n")
    manifest.add_output("report", path)
    manifest.end_tick = report.verifications
    manifest.write()
    ok = report.rejected_round is None
    _verdict(ok, f"{report.verifications} rounds, max distance {max(report.trace_distances, default=0.0):.6f}"
                 f" (bound {loss ** 0.5:.6f}), cumulative {report.cumulative_distance:.6f}")
    return EXIT_OK


def _coin_longevity(args, cfg: ProtocolConfig, manifest: RunManifest, rng: np.random.Generator,
                    loss: float) -> int:
    chain = Chain.from_config(cfg)
    registry = OracleRegistry.from_rng(rng, cfg.n)
    market = Marketplace()
    while market.size() < cfg.m:
        protocol.mint_shard(chain, registry, cfg, market, rng)
    _, token = protocol.mint_bitcoin(chain, registry, cfg, market, rng)
    report, _ = analytics.run_coin_longevity(chain, registry, cfg, token, args.rounds, rng,
                                             perturbation=analytics.perturbation_for(loss) if loss else None,
                                             progress=args.progress)
    path = _out(args, "longevity.json")
    with open(path, "w") as f:
        json.dump({**report.to_dict(), "epsilon": loss}, f, sort_keys=True, indent=1)
        f.write("\n")
    manifest.add_output("report", path)
    manifest.chain_hash = chain.tip.pow_hash.hex()
    manifest.end_tick = report.cycles
    manifest.write()
    _verdict(report.rejected_cycle is None,
             f"{report.survived_cycles} of {report.cycles} cycles accepted, "
             f"{sum(report.failures)} shard failures (required {report.required} of {cfg.m})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _config(args)
    if (args.shard is not None or args.state_out) and not args.lab:
        raise UsageError("dumping shard states needs --lab")
    with open(args.coin) as f:
        coin = protocol.import_coin(f.read(), cfg, lab=args.lab)
    print(Fore.CYAN + f"coin with {len(coin.shards)} shards, scheme {coin.descriptor_signature.scheme_id}")
    for i, shard in enumerate(coin.shards):
        print(f"  shard {i}: serial {shard.serial.hex()} minted at tick {shard.mint_time}")
    if args.shard is not None:
        if not 0 <= args.shard < len(coin.shards):
            raise UsageError(f"shard index {args.shard} out of range")
        text = dump_state(coin.shards[args.shard].state, args.state_out)
        if not args.state_out:
            sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_chain(args) -> int:
    cfg = _config(args)
    manifest = _start(args, cfg, None)
    if args.ingest:
        with open(args.ingest) as f:
            chain = ledger.ingest_jsonl(f.read())
        ledger.audit(chain)
        path = _out(args, "chain.bin")
        ledger.write_log(chain, path)
    else:
        chain = ledger.read_log(args.chain)
        ledger.audit(chain)
        path = _out(args, "chain.jsonl")
        ledger.dump_jsonl(chain, path)
    manifest.add_output("chain", path)
    manifest.chain_hash = chain.tip.pow_hash.hex()
    manifest.write()
    print(Fore.CYAN + f"{len(chain)} blocks, height {chain.height}, tip {chain.tip.pow_hash.hex()[:16]}")
    return EXIT_OK


def cmd_replay(args) -> int:
    original = RunManifest.read(args.manifest)
    out_dir = args.out_dir or original.out_dir
    code = main(original.argv + ["--out-dir", out_dir])
    replayed = RunManifest.read(os.path.join(out_dir, "manifest.json"))
    mismatched = [name for name, digest in original.output_hashes.items()
                  if replayed.output_hashes.get(name) != digest]
    if mismatched:
        _verdict(False, f"replay differs in: {', '.join(mismatched)}")
        return EXIT_REJECTED
    _verdict(True, f"replay reproduced {len(original.output_hashes)} outputs (exit {code})")
    return code


# --- Parser ---

def _common(parser):
    parser.add_argument("--config", help="flat KEY=VALUE config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", default=settings.DATA_FOLDER)
    parser.add_argument("--n", type=int)
    parser.add_argument("--m", type=int)
    parser.add_argument("--t-max", type=int)
    parser.add_argument("--t-block", type=int)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--supply-cap", type=int)
    parser.add_argument("--retarget-interval", type=int)
    parser.add_argument("--difficulty-bits", type=int)
    parser.add_argument("--format", choices=["json", "csv"], default="json")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="main.py", description="Quantum Bitcoin desk simulator")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("mint", help="mint shards and combine them into coins")
    _common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--lab", action="store_true", help="write copyable lab dumps instead of wallet files")
    p.set_defaults(handler=cmd_mint)

    p = sub.add_parser("verify", help="verify a wallet coin against a chain file")
    _common(p)
    p.add_argument("--chain", required=True)
    p.add_argument("--coin", required=True)
    p.add_argument("--oracle", help="oracle export; defaults to oracle.jsonl next to the chain")
    p.add_argument("--lab", action="store_true", help="read a lab dump; the file is left untouched")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("simulate", help="run the honest mining network")
    _common(p)
    p.add_argument("--miners", type=int, default=4)
    p.add_argument("--duration", type=int, default=600 * 200)
    p.add_argument("--max-blocks", type=int)
    p.add_argument("--hashrate", type=float)
    p.add_argument("--with-protocol", action="store_true", help="mint shards and coins inside blocks")
    p.add_argument("--random-tiebreak", action="store_true")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("attack", help="reuse-attack Monte Carlo against the analytic bound")
    _common(p)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--rule", choices=list(simnet.RULES), default="at_least")
    p.add_argument("--shard-wins", type=int, help="override the m - 2 shard wins needed")
    p.add_argument("--confirmations", type=int, help="also run the double-spend baseline")
    p.add_argument("--trace", type=int, help="also write an event trace of this many trials")
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("bound", help="sweep eta and its bound over a grid")
    _common(p)
    p.add_argument("--k-values", default="10,20,40")
    p.add_argument("--gammas", default="0.3,0.5,1.0")
    p.add_argument("--p-values", default="0.05,0.1,0.15")
    p.set_defaults(handler=cmd_bound, format="csv")

    p = sub.add_parser("longevity", help="repeated verify/reconstruct of one shard or one coin")
    _common(p)
    p.add_argument("--rounds", type=int, default=10_000)
    p.add_argument("--perturb", type=float, help="per-round acceptance loss; defaults to --epsilon")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sample", action="store_true", help="sample outcomes instead of postselecting")
    p.add_argument("--coin", action="store_true",
                   help="mint an m-shard coin and run verify/transfer cycles on it (always sampled)")
    p.set_defaults(handler=cmd_longevity)

    p = sub.add_parser("inspect", help="describe a coin file and dump shard states")
    _common(p)
    p.add_argument("--coin", required=True)
    p.add_argument("--shard", type=int)
    p.add_argument("--state-out")
    p.add_argument("--lab", action="store_true", help="load simulated states (needed for --shard)")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("dump-chain", help="convert a chain log to JSON-lines and back")
    _common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--chain")
    group.add_argument("--ingest")
    p.set_defaults(handler=cmd_dump_chain)

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir")
    p.set_defaults(handler=cmd_replay)
    return parser


def _argv_without_out_dir(argv: List[str]) -> List[str]:
    cleaned, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--out-dir":
            skip = True
            continue
        if token.startswith("--out-dir="):
            continue
        cleaned.append(token)
    return cleaned


def main(argv: Optional[List[str]] = None) -> int:
    init(autoreset=True)
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = _argv_without_out_dir(argv)
        return args.handler(args)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_INPUT
    except (ConfigError, DomainError) as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except ChainIntegrityError as e:
        logger.error(f"Chain file rejected: {e}")
        return EXIT_INPUT
    except (protocol.ProtocolError, LedgerError, CapacityError) as e:
        logger.error(f"Protocol failure: {e}")
        return EXIT_PROTOCOL
    except (OSError, ValueError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

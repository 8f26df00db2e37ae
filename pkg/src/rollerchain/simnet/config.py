"""Simulation configuration and the flat key=value scenario format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..consensus import ChainParams, Difficulty
from ..ledger import FeeDirection, LedgerParams


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    party_count: int = 4
    adversary_count: int = 0
    q: int = 1
    D: int = 2**32 // 8
    mu: int = 32
    n: int = 50
    k: int = 2
    rounds: int = 200
    const_reward: int = 50
    rng_seed: int = 1
    fee_direction: FeeDirection = FeeDirection.CREATED_MINUS_REMOVED
    tx_gen_rate: float = 0.5
    # honest parties that keep every full block (the first ones)
    archive_count: int = 1
    # honest parties that also serve the last n blocks
    window_server_count: int = 0
    genesis_boxes: int = 16
    # the environment merges boxes above this live-box count and splits below it
    target_state_size: int = 32

    def __post_init__(self):
        problems = []
        if self.party_count < 1:
            problems.append("party_count must be at least 1")
        if not 0 <= self.adversary_count < self.party_count:
            problems.append("adversary_count must leave at least one honest party")
        if self.q < 1:
            problems.append("q must be positive")
        if not 1 <= self.mu <= 256:
            problems.append("mu must be in 1..256")
        elif not 0 <= self.D <= 2**self.mu:
            problems.append("D must lie in [0, 2^mu]")
        if self.k < 1 or self.n < self.k:
            problems.append("need n >= k >= 1")
        if self.rounds < 0:
            problems.append("rounds must be non-negative")
        if self.const_reward < 0:
            problems.append("const_reward must be non-negative")
        if not 0 <= self.rng_seed < 2**64:
            problems.append("rng_seed must be an unsigned 64-bit integer")
        if self.tx_gen_rate < 0:
            problems.append("tx_gen_rate must be non-negative")
        honest = self.party_count - self.adversary_count
        if not 0 <= self.archive_count <= honest:
            problems.append("archive_count must not exceed the honest party count")
        if not 0 <= self.window_server_count <= honest:
            problems.append("window_server_count must not exceed the honest party count")
        if self.genesis_boxes < 1:
            problems.append("genesis_boxes must be positive")
        if self.target_state_size < 2:
            problems.append("target_state_size must be at least 2")
        if problems:
            raise ParseError("; ".join(problems))

    @property
    def honest_count(self) -> int:
        return self.party_count - self.adversary_count

    def chain_params(self) -> ChainParams:
        return ChainParams(
            n=self.n,
            k=self.k,
            difficulty=Difficulty(self.D, self.q, self.mu),
            ledger=LedgerParams(self.const_reward, self.fee_direction),
        )

    def replace(self, **changes) -> SimConfig:
        return dataclasses.replace(self, **changes)


EXPERIMENTS = (
    "network",
    "pow-equivalence",
    "bootstrap-equivalence",
    "archiving-availability",
    "storage-profile",
)


@dataclass(frozen=True)
class Scenario:
    experiment: str = "network"
    out: str | None = None
    config: SimConfig = field(default_factory=SimConfig)
    trials: int = 1000
    runs: int = 1
    target_blocks: int = 0
    fork_attempts: int = 1
    chain_length: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ParseError(f"unknown experiment {self.experiment!r}")
        for name in ("trials", "runs"):
            if getattr(self, name) < 1:
                raise ParseError(f"{name} must be positive")
        for name in ("target_blocks", "fork_attempts", "chain_length"):
            if getattr(self, name) < 0:
                raise ParseError(f"{name} must be non-negative")


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_SCENARIO_FIELDS = {f.name: f for f in dataclasses.fields(Scenario) if f.name != "config"}
# accept the camelCase spellings as well
_ALIASES = {
    "partyCount": "party_count",
    "adversaryCount": "adversary_count",
    "constReward": "const_reward",
    "rngSeed": "rng_seed",
    "seed": "rng_seed",
    "feeDirection": "fee_direction",
    "txGenRate": "tx_gen_rate",
    "archiveCount": "archive_count",
    "windowServerCount": "window_server_count",
    "genesisBoxes": "genesis_boxes",
    "targetStateSize": "target_state_size",
    "targetBlocks": "target_blocks",
    "forkAttempts": "fork_attempts",
    "chainLength": "chain_length",
    "output": "out",
}


def _convert(key: str, raw: str, kind):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if key == "fee_direction":
            return FeeDirection(raw)
        if "float" in kind:
            return float(raw)
        if "int" in kind:
            return int(raw, 0)
        return raw
    except ValueError:
        raise ParseError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(pairs: list[tuple[str, str]], base: Scenario | None = None) -> Scenario:
    """Apply key=value pairs on top of ``base``; unknown keys are rejected."""
    base = base or Scenario()
    cfg = {}
    top = {}
    for key, raw in pairs:
        key = _ALIASES.get(key, key)
        if key in _CONFIG_FIELDS:
            cfg[key] = _convert(key, raw, _CONFIG_FIELDS[key].type)
        elif key in _SCENARIO_FIELDS:
            top[key] = _convert(key, raw, _SCENARIO_FIELDS[key].type)
        else:
            raise ParseError(f"unknown key {key!r}")
    try:
        config = dataclasses.replace(base.config, **cfg)
        return dataclasses.replace(base, config=config, **top)
    except ParseError:
        raise
    except (TypeError, ValueError, OverflowError) as exc:
        raise ParseError(str(exc)) from None


def split_line(line: str, lineno: int | None = None) -> tuple[str, str] | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        where = f" on line {lineno}" if lineno else ""
        raise ParseError(f"expected KEY=VALUE{where}: {line.strip()!r}")
    key, value = text.split("=", 1)
    key, value = key.strip(), value.strip()
    if not key:
        raise ParseError(f"empty key on line {lineno}")
    return key, value


def parse_scenario(text: str, base: Scenario | None = None) -> Scenario:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        kv = split_line(line, lineno)
        if kv is not None:
            pairs.append(kv)
    return parse_pairs(pairs, base)


def load_scenario(path: str | Path) -> Scenario:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("scenario file is not UTF-8") from None
    return parse_scenario(text)


def dump_scenario(s: Scenario) -> str:
    lines = [f"experiment={s.experiment}"]
    for name in _SCENARIO_FIELDS:
        if name in ("experiment",):
            continue
        value = getattr(s, name)
        if value is not None:
            lines.append(f"{name}={value}")
    for name in _CONFIG_FIELDS:
        value = getattr(s.config, name)
        if isinstance(value, FeeDirection):
            value = value.value
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"

"""Command-line scenario runner.

    rollerchain run --scenario FILE [--seed N] [--out DIR] [--override KEY=VALUE ...]
    rollerchain verify-chain CHAIN_FILE [--scenario FILE] [--override KEY=VALUE ...]
    rollerchain print-params [--scenario FILE] [--override KEY=VALUE ...]

Exit codes: 0 ok, 1 invalid chain, 2 parse error, 3 invariant violation.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

from .consensus import HEADER_SIZE, BlockHeader, FullBlock, Ticket, header_chain_failure, verify_block
from .ledger import BlockContent, make_genesis
from .hashing import ZERO_DIGEST, u32
from .node import Node
from .simnet.config import ParseError, Scenario, dump_scenario, load_scenario, parse_pairs, split_line
from .simnet.world import InvariantViolation, Transcript, csv_text, genesis_for

EXIT_OK = 0
EXIT_INVALID_CHAIN = 1
EXIT_PARSE = 2
EXIT_INVARIANT = 3

MAGIC = b"RCHN1"


# ------------------------------------------------------------- chain dumps


def genesis_block(content: BlockContent) -> FullBlock:
    """Height-1 record of a dump: zero link/ticket fields, the genesis tx."""
    header = BlockHeader(ZERO_DIGEST, ZERO_DIGEST, content.a_tau, content.a_s, 0)
    return FullBlock(header, Ticket(b"", 0, ()), tuple(content.tau))


def encode_chain(headers: Sequence[BlockHeader], blocks: dict[int, FullBlock]) -> bytes:
    out = bytearray(MAGIC)
    out += u32(len(headers))
    for h in headers:
        out += h.to_bytes()
    out += u32(len(blocks))
    for height in sorted(blocks):
        raw = blocks[height].to_bytes()
        out += u32(height) + u32(len(raw)) + raw
    return bytes(out)


def dump_node(node: Node, genesis_content: BlockContent) -> bytes:
    blocks = dict(node.full_blocks)
    if node.archive:
        blocks[1] = genesis_block(genesis_content)
    return encode_chain(node.headers, blocks)


def parse_chain(data: bytes) -> tuple[list[BlockHeader], dict[int, bytes]]:
    """Split a dump into headers and raw block payloads; ParseError on bad framing."""
    if not data.startswith(MAGIC):
        raise ParseError("not a chain dump (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("truncated chain dump")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    count = int.from_bytes(take(4), "big")
    headers = []
    for _ in range(count):
        try:
            headers.append(BlockHeader.from_bytes(take(HEADER_SIZE)))
        except ValueError as exc:
            raise ParseError(str(exc)) from None
    blocks: dict[int, bytes] = {}
    for _ in range(int.from_bytes(take(4), "big")):
        height = int.from_bytes(take(4), "big")
        raw = take(int.from_bytes(take(4), "big"))
        if height in blocks:
            raise ParseError(f"duplicate block at height {height}")
        blocks[height] = raw
    if pos != len(data):
        raise ParseError("trailing bytes after chain dump")
    return headers, blocks


def verify_chain_bytes(data: bytes, scenario: Scenario) -> tuple[int, str]:
    """(exit code, verdict line) for a chain dump."""
    headers, raw_blocks = parse_chain(data)
    params = scenario.config.chain_params()
    bad = header_chain_failure(headers, params.difficulty)
    if bad is not None:
        return EXIT_INVALID_CHAIN, f"invalid height={bad + 2} reason=header"
    length = len(headers) + 1

    blocks: dict[int, FullBlock] = {}
    for height, raw in sorted(raw_blocks.items()):
        if not 1 <= height <= length:
            return EXIT_INVALID_CHAIN, f"invalid height={height} reason=block-outside-chain"
        try:
            blocks[height] = FullBlock.from_bytes(raw)
        except ValueError:
            return EXIT_INVALID_CHAIN, f"invalid height={height} reason=undecodable-block"
        if height >= 2 and blocks[height].header != headers[height - 2]:
            return EXIT_INVALID_CHAIN, f"invalid height={height} reason=block-header-mismatch"

    if 1 in blocks:
        g = blocks[1]
        if len(g.tau) != 1 or g.tau[0].removals:
            return EXIT_INVALID_CHAIN, "invalid height=1 reason=genesis"
        genesis, content = make_genesis(g.tau[0].creations)
        if g.header.a_s != content.a_s or g.header.a_tau != content.a_tau:
            return EXIT_INVALID_CHAIN, "invalid height=1 reason=genesis"
    else:
        genesis, _ = genesis_for(scenario.config)

    if not all(h in blocks for h in range(2, length + 1)):
        present = len([h for h in blocks if h >= 2])
        return EXIT_OK, f"valid headers length={length} content=unchecked full_blocks={present}"

    state = genesis
    committed = [genesis.root] + [h.a_s for h in headers]
    for height in range(2, length + 1):
        prev = headers[height - 3] if height > 2 else None
        state = verify_block(blocks[height], state, prev, lambda x: committed[x - 1], params)
        if state is None:
            return EXIT_INVALID_CHAIN, f"invalid height={height} reason=block"
    return EXIT_OK, f"valid length={length} content=checked tip_root={state.root.hex()}"


# ------------------------------------------------------------- commands


def _scenario(args) -> Scenario:
    base = load_scenario(args.scenario) if args.scenario else Scenario()
    pairs = []
    for item in args.override or []:
        kv = split_line(item)
        if kv is None:
            raise ParseError(f"bad override {item!r}")
        pairs.append(kv)
    if getattr(args, "seed", None) is not None:
        pairs.append(("rng_seed", str(args.seed)))
    return parse_pairs(pairs, base)


def _out_dir(args, scenario: Scenario) -> Path:
    chosen = args.out or scenario.out or os.environ.get("ROLLERCHAIN_OUT") or "rollerchain-out"
    return Path(chosen)


def _write(out: Path, name: str, text: str | bytes) -> Path:
    path = out / name
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)
    return path


def run_scenario(scenario: Scenario, out: Path) -> int:
    from .consensus import Difficulty
    from .simnet import experiments as ex

    out.mkdir(parents=True, exist_ok=True)
    cfg = scenario.config
    transcript = Transcript()
    name = scenario.experiment
    _write(out, "scenario.txt", dump_scenario(scenario))
    if name == "network":
        world, report = ex.experiment_network(cfg, transcript)
        ref = world.parties[0].node
        _write(out, "chain.rchn", dump_node(ref, world.genesis_content))
    elif name == "pow-equivalence":
        report = ex.experiment_pow_indistinguishability(
            scenario.trials, Difficulty(cfg.D, cfg.q, cfg.mu), cfg.rng_seed, cfg.n, cfg.k
        )
    elif name == "bootstrap-equivalence":
        report = ex.experiment_bootstrap_equivalence(
            cfg, scenario.runs, scenario.target_blocks, scenario.fork_attempts, transcript
        )
    elif name == "archiving-availability":
        report = ex.experiment_archiving_availability(
            scenario.trials, cfg.party_count, cfg.k, cfg.n, scenario.chain_length, cfg.rng_seed
        )
    elif name == "storage-profile":
        report = ex.experiment_storage_profile(cfg, transcript)
    else:  # guarded by Scenario validation
        raise ParseError(f"unknown experiment {name!r}")
    for row in report.rows if name in ("pow-equivalence", "archiving-availability") else ():
        transcript.record(**row)
    _write(out, "transcript.txt", transcript.text())
    _write(out, "report.txt", report.text())
    _write(out, "summary.csv", csv_text(report.rows))
    print(report.text(), end="")
    if report.passed is False:
        print(f"error: {name} checks failed", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_run(args) -> int:
    scenario = _scenario(args)
    return run_scenario(scenario, _out_dir(args, scenario))


def cmd_verify_chain(args) -> int:
    scenario = _scenario(args)
    try:
        data = Path(args.chain_file).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read chain file: {exc}") from None
    code, verdict = verify_chain_bytes(data, scenario)
    print(verdict)
    return code


def cmd_print_params(args) -> int:
    scenario = _scenario(args)
    cfg = scenario.config
    params = cfg.chain_params()
    d = params.difficulty
    print(dump_scenario(scenario), end="")
    print(f"attempt_probability={d.attempt_probability!r}")
    print(f"call_probability={d.call_probability!r}")
    print(f"linear_call_probability={d.linear_probability!r}")
    print(f"header_bytes={HEADER_SIZE}")
    print(f"expected_retained_blocks={cfg.k * cfg.n / (cfg.k + 1)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rollerchain", description="Rollerchain simulator and tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", help="key=value scenario file")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")

    p = sub.add_parser("run", help="run a scenario")
    common(p)
    p.add_argument("--seed", type=int, help="root RNG seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory (default $ROLLERCHAIN_OUT)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-chain", help="validate a chain dump")
    p.add_argument("chain_file")
    common(p)
    p.set_defaults(func=cmd_verify_chain)

    p = sub.add_parser("print-params", help="show the resolved parameters")
    common(p)
    p.set_defaults(func=cmd_print_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

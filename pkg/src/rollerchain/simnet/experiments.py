"""The four experiments: PoW indistinguishability, verifier equivalence,
archiving availability and storage profile."""
from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field

from ..consensus import (
    HEADER_SIZE,
    ChainParams,
    Difficulty,
    bitcoin_pow,
    choose_snapshots,
    key_eligible,
    roller_pow,
)
from ..hashing import H, hash_args, u64
from ..ledger import Box, Transaction, build_input, hash_lock, make_genesis
from ..node import (
    ForkTooDeep,
    Node,
    bootstrap_full,
    bootstrap_light,
    decode_message,
    encode_message,
    encode_snapshot,
)
from .config import SimConfig
from .stats import binomial_sigma, expected_min_uniform, two_proportion_z, wilson_interval
from .world import HashMeter, Transcript, World, chain_blocks, derive_key, stream_rng


@dataclass
class Report:
    name: str
    summary: dict[str, object] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    passed: bool | None = None

    def lines(self) -> list[str]:
        from .world import _fmt

        out = [f"experiment={self.name}"]
        out += [f"{k}={_fmt(v)}" for k, v in self.summary.items()]
        if self.passed is not None:
            out.append(f"passed={_fmt(self.passed)}")
        return out

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


# --------------------------------------------------------------- PoW experiment


def _setup_roller(params: ChainParams, seed: int, blocks: int) -> Node:
    pre = hash_args(b"pow-setup", u64(seed))
    boxes = [Box(1000 + i, hash_lock(pre), i) for i in range(4)]
    genesis, _ = make_genesis(boxes)
    node = Node(genesis, params, pk=derive_key(seed, 0, params.n, params.k), archive=True)
    for _ in range(blocks):
        node.mine_until([], hash_lock(pre))
    return node


def _setup_bitcoin(params: ChainParams, seed: int, blocks: int):
    pre = hash_args(b"pow-setup-btc", u64(seed))
    boxes = [Box(2000 + i, hash_lock(pre), i) for i in range(4)]
    state, _ = make_genesis(boxes)
    prev = None
    attempt = 0
    while blocks:
        attempt += 1
        x = build_input(state, [], hash_lock(pre), params.ledger, coinbase_nonce=attempt)
        blk = bitcoin_pow((x.a_tau, x.a_s, x.tau), prev, params.difficulty)
        if blk is not None:
            prev, state = blk.header, x.state
            blocks -= 1
    return prev, state


DISTINGUISHERS = ("always_zero", "majority_on_success", "bayes_outcome")


def experiment_pow_indistinguishability(
    trials: int,
    difficulty: Difficulty,
    seed: int = 1,
    n: int = 8,
    k: int = 2,
    setup_blocks: int = 3,
) -> Report:
    """Coin-flip assignment of RollerPow/BitcoinPow to two miners.

    Each trial gives both miners a fresh input and their full q lottery
    attempts; distinguishers see only the two success bits.
    """
    params = ChainParams(n, k, difficulty)
    if difficulty.D == 0:
        setup_blocks = 0  # nothing can be mined
    roller = _setup_roller(params, seed, setup_blocks)
    btc_prev, btc_state = _setup_bitcoin(params, seed, setup_blocks)
    snaps = roller.mining_snapshots()
    ledger = params.ledger

    roller_wins = btc_wins = 0
    outcomes = []
    for i in range(trials):
        rng = stream_rng(seed, "pow-trial", i)
        b = rng.getrandbits(1)
        lock = H(b"trial" + u64(i))
        xr = build_input(roller.tip_state, [], lock, ledger, coinbase_nonce=i)
        xb = build_input(btc_state, [], lock, ledger, coinbase_nonce=i)
        mr, mb = HashMeter(difficulty.q), HashMeter(difficulty.q)
        r_ok = roller_pow((xr.a_tau, xr.a_s, xr.tau), roller.tip_header, roller.pk, snaps, difficulty, mr) is not None
        b_ok = bitcoin_pow((xb.a_tau, xb.a_s, xb.tau), btc_prev, difficulty, mb) is not None
        roller_wins += r_ok
        btc_wins += b_ok
        pair = (r_ok, b_ok) if b == 0 else (b_ok, r_ok)
        outcomes.append((b, pair))

    # distinguishers
    def majority(pair):
        # the miner that succeeded alone is guessed to be running RollerPow
        if pair[0] and not pair[1]:
            return 0
        if pair[1] and not pair[0]:
            return 1
        return 0

    half = trials // 2
    table: dict[tuple[bool, bool], list[int]] = {}
    for b, pair in outcomes[:half]:
        table.setdefault(pair, [0, 0])[b] += 1

    def bayes(pair):
        c = table.get(pair, [0, 0])
        return 1 if c[1] > c[0] else 0

    correct = {"always_zero": 0, "majority_on_success": 0, "bayes_outcome": 0}
    for b, pair in outcomes:
        correct["always_zero"] += b == 0
        correct["majority_on_success"] += majority(pair) == b
    for b, pair in outcomes[half:]:
        correct["bayes_outcome"] += bayes(pair) == b
    evaluated = {"always_zero": trials, "majority_on_success": trials, "bayes_outcome": trials - half}

    p = difficulty.call_probability
    sigma = binomial_sigma(p, trials)
    z = two_proportion_z(roller_wins, trials, btc_wins, trials)
    rep = Report("pow-equivalence")
    s = rep.summary
    s.update(
        trials=trials, D=difficulty.D, q=difficulty.q, mu=difficulty.mu,
        analytic_rate=p, linear_rate=difficulty.linear_probability,
        roller_rate=roller_wins / trials, bitcoin_rate=btc_wins / trials,
    )
    lo, hi = wilson_interval(roller_wins, trials)
    s.update(roller_wilson_lo=lo, roller_wilson_hi=hi)
    lo, hi = wilson_interval(btc_wins, trials)
    s.update(bitcoin_wilson_lo=lo, bitcoin_wilson_hi=hi)
    s["roller_within_3sigma"] = abs(roller_wins / trials - p) <= 3 * sigma
    s["bitcoin_within_3sigma"] = abs(btc_wins / trials - p) <= 3 * sigma
    s.update(z=z.z, z_p_value=z.p_value, z_rejects_at_0_01=z.rejects(0.01))
    ok = s["roller_within_3sigma"] and s["bitcoin_within_3sigma"] and not z.rejects(0.01)
    for name in DISTINGUISHERS:
        m = evaluated[name]
        acc = correct[name] / m
        within = abs(acc - 0.5) <= 3 * binomial_sigma(0.5, m)
        s[f"{name}_accuracy"] = acc
        s[f"{name}_within_3sigma"] = within
        ok = ok and within
        rep.rows.append({"distinguisher": name, "evaluated": m, "correct": correct[name], "accuracy": acc})
    rep.passed = ok
    return rep


# ------------------------------------------------- verifier equivalence


def make_fetcher(world: World, spoof: bool = False, log: list | None = None):
    """Request/response over encoded frames to the world's parties.

    With ``spoof`` the claimed origin of every response is rewritten; the
    bootstrap never looks at it.
    """
    parties = {p.index: p for p in world.parties}
    counter = [0]

    def fetch(peer, req):
        frame = parties[peer].node.serve_frame(encode_message(req))
        origin = peer
        if spoof:
            counter[0] += 1
            origin = (peer + 1 + counter[0]) % len(parties)
        if log is not None:
            log.append((origin, H(frame)))
        return decode_message(frame)

    return fetch


def settle(world: World) -> None:
    """Deliver what is still in flight without further mining."""
    inbox, world.in_flight = world.in_flight, []
    for party in world.parties:
        for msg in inbox:
            if msg.sender != party.index:
                party.node.offer_block(msg.block)


def surviving_node(world: World) -> Node:
    best = world.parties[0]
    for p in world.honest:
        if p.node.length > best.node.length:
            best = p
    return best.node


def forced_fork(source: Node, depth: int, seed: int) -> Node:
    """An archive node whose chain forks ``depth`` blocks below ``source``'s tip
    and is one block longer."""
    fork_point = source.length - depth
    pk = derive_key(seed, 1_000_003, source.params.n, source.params.k)
    node = source.fork_at(fork_point, pk)
    preimage = b"fork" + u64(seed)
    lock = hash_lock(preimage)
    while node.length <= source.length:
        node.mine_until(_fold_own_boxes(node, lock, preimage), lock)
    return node


def _fold_own_boxes(node: Node, lock: bytes, preimage: bytes) -> list[Transaction]:
    # merge earlier coinbases into one box so the fork's state stays small
    own = [(i, b) for i, b in node.tip_state.boxes.items() if b.lock == lock]
    if len(own) < 2:
        return []
    merged = Box(sum(b.value for _, b in own), lock, node.length)
    return [Transaction(tuple((i, preimage) for i, _ in own), (merged,))]


def run_equivalence(config: SimConfig, target_blocks: int, fork: bool, spoof: bool = False) -> dict:
    world = World(config)
    world.run(rounds=config.rounds if not target_blocks else 10**9,
              until_length=target_blocks + 1 if target_blocks else None)
    settle(world)
    ref = surviving_node(world)
    params = world.params
    blocks = chain_blocks(ref, world.blocks)
    full = bootstrap_full(world.genesis, blocks, params)
    peers = [p.node.peer_view(p.index) for p in world.honest]
    light = bootstrap_light(world.genesis, ref.headers, peers, make_fetcher(world, spoof), params)
    row = {
        "seed": config.rng_seed,
        "rounds": world.round,
        "length": ref.length,
        "full_root": full.tip_state.root,
        "light_root": light.tip_state.root,
        "light_snapshot_height": min(light.snapshots) if light.snapshots else 1,
        "equal": full.tip_state.root == light.tip_state.root
        and encode_snapshot(full.tip_state) == encode_snapshot(light.tip_state),
    }
    if fork:
        depth = params.n + 1
        adv = forced_fork(full, depth, config.rng_seed)
        fetch_adv = lambda h, hdr: adv.full_blocks[h]
        try:
            light.resolve_fork(adv.headers, fetch_adv)
            row["fork_light"] = "adopted"
        except ForkTooDeep:
            row["fork_light"] = "ForkTooDeep"
        row["fork_full"] = "adopted" if full.resolve_fork(adv.headers, fetch_adv) else "kept"
    return row


def experiment_bootstrap_equivalence(
    config: SimConfig,
    runs: int = 1,
    target_blocks: int = 0,
    fork_attempts: int = 1,
    transcript: Transcript | None = None,
) -> Report:
    """Full vs light verifier on the surviving chain of seeded honest runs.

    The first ``fork_attempts`` runs also receive a fork n+1 blocks deep.
    """
    if config.adversary_count:
        raise ValueError("verifier equivalence runs on an honest network")
    rep = Report("bootstrap-equivalence")
    equal = forks = fork_ok = 0
    for r in range(runs):
        cfg = config.replace(rng_seed=(config.rng_seed + r) % 2**64)
        row = run_equivalence(cfg, target_blocks, fork=r < fork_attempts)
        rep.rows.append(row)
        equal += row["equal"]
        if "fork_light" in row:
            forks += 1
            fork_ok += row["fork_light"] == "ForkTooDeep"
        if transcript is not None:
            transcript.record(run=r, **row)
    rep.summary.update(
        runs=runs, n=config.n, k=config.k, target_blocks=target_blocks,
        equal_runs=equal, fork_attempts=forks, fork_too_deep=fork_ok,
    )
    rep.passed = equal == runs and fork_ok == forks
    return rep


# ------------------------------------------------- archiving availability


def experiment_archiving_availability(
    trials: int, p: int, k: int, n: int, chain_length: int = 0, seed: int = 1
) -> Report:
    """Mean lowest snapshot height over p random keys, and block retention."""
    h_c = chain_length or 2 * n
    if h_c <= n:
        raise ValueError("chain_length must exceed n")
    rng = random.Random(int.from_bytes(hash_args(b"archiving", u64(seed)), "big"))
    mins = []
    for _ in range(trials):
        lowest = h_c
        for _ in range(p):
            lowest = min(lowest, *choose_snapshots(h_c, rng.randbytes(32), n, k))
        mins.append(lowest)
    mean_min = statistics.fmean(mins)
    analytic = h_c - p * k * n / (p * k + 1)
    exact = h_c - n + expected_min_uniform(n, p * k)

    # retention: a mining key keeps every block from its lowest snapshot up
    retained = []
    while len(retained) < trials:
        pk = rng.randbytes(32)
        if key_eligible(pk, n, k):
            retained.append(h_c - min(choose_snapshots(h_c, pk, n, k)) + 1)
    mean_kept = statistics.fmean(retained)
    kept_target = k * n / (k + 1)

    rep = Report("archiving-availability")
    rep.summary.update(
        trials=trials, p=p, k=k, n=n, chain_length=h_c,
        mean_min_height=mean_min, analytic_min_height=analytic, discrete_min_height=exact,
        min_height_rel_error=abs(mean_min - analytic) / analytic,
        mean_retained_blocks=mean_kept, retained_target=kept_target,
        retained_rel_error=abs(mean_kept - kept_target) / kept_target,
    )
    rep.passed = rep.summary["min_height_rel_error"] <= 0.01 and rep.summary["retained_rel_error"] <= 0.02
    rep.rows = [{"trial": i, "min_height": m} for i, m in enumerate(mins[:1000])]
    return rep


# ------------------------------------------------- storage profile

BITCOIN_SCALE_BLOCK = 1_000_000


def experiment_storage_profile(config: SimConfig, transcript: Transcript | None = None) -> Report:
    """Bytes kept by an archive node vs a rational (pruning) miner."""
    if config.party_count < 2 or config.archive_count != 1:
        raise ValueError("storage profile needs one archive party and at least one rational party")
    world = World(config, transcript)
    world.run()
    archive = world.parties[0].node
    rational = world.parties[1].node
    a, r = archive.storage(), rational.storage()
    length = rational.length
    blocks_expected = None
    if length > config.n:
        blocks_expected = length - min(rational.snapshot_heights()) + 1
    ratio = a.total / r.total
    mean_block = a.blocks / max(1, a.block_count)
    # same chain, blocks rescaled to 1 MB each; headers and snapshots as measured
    scaled_a = a.headers + BITCOIN_SCALE_BLOCK * a.block_count + a.snapshots + a.state
    scaled_r = r.headers + BITCOIN_SCALE_BLOCK * r.block_count + r.snapshots + r.state
    rep = Report("storage-profile")
    rep.summary.update(
        rounds=world.round, chain_length=length, header_bytes=HEADER_SIZE,
        archive_headers=a.headers, archive_blocks=a.blocks, archive_block_count=a.block_count,
        archive_snapshots=a.snapshots, archive_state=a.state, archive_total=a.total,
        rational_headers=r.headers, rational_blocks=r.blocks, rational_block_count=r.block_count,
        rational_snapshots=r.snapshots, rational_state=r.state, rational_total=r.total,
        rational_header_count=len(rational.headers), chain_header_count=length - 1,
        rational_expected_block_count=blocks_expected if blocks_expected is not None else "all",
        mean_block_bytes=mean_block, measured_ratio=ratio,
        extrapolated_block_bytes=BITCOIN_SCALE_BLOCK, extrapolated_ratio=scaled_a / scaled_r,
        retained_average_formula=config.k * config.n / (config.k + 1),
    )
    ok = len(rational.headers) == length - 1 and set(rational.full_blocks) == set(
        range(min(rational.snapshot_heights()), length + 1)
    ) and set(rational.snapshots) == set(rational.snapshot_heights()) - {1}
    rep.passed = ok
    return rep


def experiment_network(config: SimConfig, transcript: Transcript | None = None) -> tuple[World, Report]:
    """Plain network run with an end-of-run audit of every adopted chain."""
    from .world import audit_chain

    world = World(config, transcript)
    world.run()
    rep = Report("network")
    audited: dict[bytes | None, int | None] = {}
    failures = 0
    for p in world.parties:
        key = p.node.tip_id
        if key not in audited:
            audited[key] = audit_chain(p.node, world.blocks)
        bad = audited[key]
        failures += bad is not None
        rep.rows.append({
            "party": p.index, "honest": p.honest, "length": p.node.length,
            "mined": p.mined, "tip": (key or b"")[:8], "audit_failure_height": bad if bad is not None else "",
        })
    lengths = [p.node.length for p in world.honest]
    rep.summary.update(
        rounds=world.round, parties=config.party_count, adversaries=config.adversary_count,
        min_length=min(lengths), max_length=max(lengths),
        blocks_broadcast=len(world.blocks), messages_delivered=world.delivered,
        audit_failures=failures,
    )
    rep.passed = failures == 0
    return world, rep

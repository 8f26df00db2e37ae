"""Round-based synchronous network with q-bounded parties.

Each round: deliver every message broadcast in the previous round, let the
environment inject transactions, give every party one PoW call under a fresh
query meter, then broadcast the winners.
"""
from __future__ import annotations

import io
import random
from dataclasses import dataclass, field

from ..consensus import FullBlock, key_eligible
from ..hashing import H, hash_args, u64
from ..ledger import Box, StateSnapshot, Transaction, hash_lock, make_genesis
from ..node import Node
from .config import SimConfig


MAX_MERGE = 16
# injected transactions stay in mempools (and their inputs reserved) this long
MEMPOOL_ROUNDS = 8


class InvariantViolation(AssertionError):
    pass


class HashMeter:
    """Counts lottery queries in one round; exceeding ``limit`` is a model violation."""

    __slots__ = ("used", "limit")

    def __init__(self, limit: int):
        self.used = 0
        self.limit = limit

    def charge(self, n: int = 1) -> None:
        self.used += n
        if self.used > self.limit:
            raise InvariantViolation(f"query budget exceeded: {self.used} > {self.limit}")


def stream_rng(seed: int, party: object, rnd: int) -> random.Random:
    """Independent generator for one (party, round) pair."""
    digest = hash_args(u64(seed), str(party).encode(), u64(rnd))
    return random.Random(int.from_bytes(digest, "big"))


class Transcript:
    """Append-only key=value record log."""

    def __init__(self, keep: bool = True):
        self.keep = keep
        self._lines: list[str] = []
        self.count = 0

    def record(self, **fields) -> None:
        self.count += 1
        if self.keep:
            self._lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()))

    def lines(self) -> list[str]:
        return list(self._lines)

    def text(self) -> str:
        return "".join(line + "\n" for line in self._lines)


def _fmt(v) -> str:
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def csv_text(rows: list[dict]) -> str:
    import csv

    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


@dataclass
class Message:
    origin: int
    sender: int  # true sender; the harness never shows it to parties
    sent_round: int
    payload: bytes
    digest: bytes
    block: FullBlock

    def spoofed(self, new_origin: int) -> Message:
        return adversary_spoof_origin(self, new_origin)


def adversary_spoof_origin(msg: Message, new_origin: int) -> Message:
    """Rewrite the claimed origin; the payload is carried over untouched."""
    return Message(new_origin, msg.sender, msg.sent_round, msg.payload, msg.digest, msg.block)


def derive_key(seed: int, party: int, n: int, k: int) -> bytes:
    """First eligible key in the party's deterministic key sequence."""
    ctr = 0
    while True:
        pk = hash_args(b"pk", u64(seed), u64(party), u64(ctr))
        if key_eligible(pk, n, k):
            return pk
        ctr += 1


def party_preimage(seed: int, party: object) -> bytes:
    return hash_args(b"lock", u64(seed), str(party).encode())


def genesis_for(config: SimConfig):
    """Genesis state and content record of the world built from ``config``."""
    lock = hash_lock(party_preimage(config.rng_seed, "env"))
    rng = stream_rng(config.rng_seed, "genesis", 0)
    boxes = [Box(rng.randint(1_000, 10_000), lock, i) for i in range(config.genesis_boxes)]
    return make_genesis(boxes)


@dataclass
class Party:
    index: int
    node: Node
    lock: bytes
    honest: bool = True
    mempool: list[tuple[int, Transaction]] = field(default_factory=list)
    withheld: list[FullBlock] = field(default_factory=list)
    mined: int = 0


class Environment:
    """Injects zero-fee merge/split transactions over spendable boxes.

    The environment knows every lock preimage, so any live box is spendable.
    Merging above the target size and splitting below it keeps the state
    roughly constant in size.
    """

    def __init__(self, config: SimConfig, openers: dict[bytes, bytes]):
        self.config = config
        self.openers = openers
        self.recent: dict[bytes, int] = {}  # box id -> round it was spent by an injected tx

    def generate(self, rnd: int, state: StateSnapshot) -> list[Transaction]:
        cfg = self.config
        rng = stream_rng(cfg.rng_seed, "env", rnd)
        whole = int(cfg.tx_gen_rate)
        count = whole + (1 if rng.random() < cfg.tx_gen_rate - whole else 0)
        if not count:
            return []
        horizon = rnd - MEMPOOL_ROUNDS
        self.recent = {b: r for b, r in self.recent.items() if r > horizon}
        free = [(i, b) for i, b in state.boxes.items() if i not in self.recent and b.lock in self.openers]
        size = len(state)
        out = []
        for _ in range(count):
            if size > cfg.target_state_size and len(free) >= 2:
                width = min(len(free), max(2, size - cfg.target_state_size + 1), MAX_MERGE)
                spent = [free[j] for j in rng.sample(range(len(free)), width)]
                values = [sum(b.value for _, b in spent)]
                size -= width - 1
            elif free:
                j = rng.randrange(len(free))
                spent = [free[j]]
                total = spent[0][1].value
                if total < 2:
                    continue
                cut = rng.randint(1, total - 1)
                values = [cut, total - cut]
                size += 1
            else:
                break
            for entry in spent:
                free.remove(entry)
                self.recent[entry[0]] = rnd
            lock = hash_lock(party_preimage(cfg.rng_seed, "env"))
            creations = tuple(Box(v, lock, rng.getrandbits(64)) for v in values)
            removals = tuple((i, self.openers[b.lock]) for i, b in spent)
            out.append(Transaction(removals, creations))
        return out


class World:
    def __init__(self, config: SimConfig, transcript: Transcript | None = None):
        self.config = config
        self.params = config.chain_params()
        self.transcript = transcript if transcript is not None else Transcript(keep=False)
        seed = config.rng_seed
        env_pre = party_preimage(seed, "env")
        self.openers = {hash_lock(env_pre): env_pre}
        self.genesis, self.genesis_content = genesis_for(config)
        self.parties: list[Party] = []
        for i in range(config.party_count):
            honest = i < config.honest_count
            pre = party_preimage(seed, i)
            lock = hash_lock(pre)
            self.openers[lock] = pre
            node = Node(
                self.genesis,
                self.params,
                pk=derive_key(seed, i, config.n, config.k),
                archive=honest and i < config.archive_count,
                window_server=honest and config.archive_count <= i < config.archive_count + config.window_server_count,
            )
            self.parties.append(Party(i, node, lock, honest))
        self.env = Environment(config, self.openers)
        self.in_flight: list[Message] = []
        self.round = 0
        self.blocks: dict[bytes, FullBlock] = {}  # every block ever broadcast, for auditing
        self.delivered = 0

    @property
    def honest(self) -> list[Party]:
        return [p for p in self.parties if p.honest]

    @property
    def has_adversary(self) -> bool:
        return self.config.adversary_count > 0

    def reference(self) -> Node:
        return self.parties[0].node

    def best_honest_length(self) -> int:
        return max(p.node.length for p in self.parties if p.honest)

    def run(self, rounds: int | None = None, until_length: int | None = None) -> World:
        total = self.config.rounds if rounds is None else rounds
        for _ in range(total):
            if until_length is not None and self.reference().length >= until_length:
                break
            self.run_round()
        return self

    def run_round(self) -> None:
        r = self.round + 1
        self.round = r
        cfg = self.config
        t = self.transcript

        # (1) delivery of everything broadcast in r - 1
        inbox, self.in_flight = self.in_flight, []
        for msg in inbox:
            if msg.sent_round != r - 1:
                raise InvariantViolation("message delivered outside the next round")
            if H(msg.payload) != msg.digest:
                raise InvariantViolation("payload altered in transit")
        if self.has_adversary:
            rng_adv = stream_rng(cfg.rng_seed, "adversary", r)
            inbox = [adversary_spoof_origin(m, rng_adv.randrange(cfg.party_count)) for m in inbox]
        for party in self.parties:
            got = 0
            for msg in inbox:
                if msg.sender == party.index:
                    continue
                party.node.offer_block(msg.block)
                got += 1
            self.delivered += got
        if inbox:
            t.record(round=r, event="delivered", messages=len(inbox))
            for party in self.parties:
                t.record(round=r, event="tip", party=party.index, height=party.node.length,
                         tip=(party.node.tip_id or b"")[:8])

        # (2) input and one PoW call per party
        txs = self.env.generate(r, self.reference().tip_state)
        for party in self.parties:
            if txs:
                party.mempool.extend((r, tx) for tx in txs)
            party.mempool = [(rr, tx) for rr, tx in party.mempool if rr > r - MEMPOOL_ROUNDS]
        outgoing: list[tuple[Party, FullBlock]] = []
        for party in self.parties:
            meter = HashMeter(cfg.q)
            node = party.node
            nonce = (r << 16) | party.index
            block = node.mine((tx for _, tx in party.mempool), party.lock, meter, coinbase_nonce=nonce)
            if meter.used > cfg.q:
                raise InvariantViolation("query budget exceeded")
            if block is None:
                continue
            party.mined += 1
            t.record(round=r, event="mined", party=party.index, height=node.length,
                     block=block.header.block_id[:8], txs=len(block.tau))
            if party.honest:
                outgoing.append((party, block))
            else:
                party.withheld.append(block)

        # adversary releases its private branch once it beats the honest tip
        for party in self.parties:
            if party.honest or not party.withheld:
                continue
            if party.node.length > self.best_honest_length():
                live = set(party.node.heights)
                for blk in party.withheld:
                    if blk.header.block_id in live:
                        outgoing.append((party, blk))
                t.record(round=r, event="release", party=party.index, blocks=len(party.withheld))
                party.withheld = []
            elif party.node.length < self.best_honest_length():
                party.withheld = []

        # (3) broadcast
        for party, block in outgoing:
            payload = block.to_bytes()
            self.blocks[block.header.block_id] = block
            self.in_flight.append(Message(party.index, party.index, r, payload, H(payload), block))
        for party in self.parties if t.keep else ():
            s = party.node.storage()
            t.record(round=r, event="storage", party=party.index, bytes=s.total,
                     blocks=s.block_count, snapshots=len(party.node.snapshots))


def run_network(config: SimConfig, transcript: Transcript | None = None) -> World:
    return World(config, transcript).run()


def chain_blocks(node: Node, pool: dict[bytes, FullBlock]) -> list[FullBlock]:
    """Full blocks of ``node``'s adopted chain, taken from the node or ``pool``."""
    out = []
    for h, hdr in enumerate(node.headers, start=2):
        blk = node.full_blocks.get(h)
        if blk is None or blk.header.block_id != hdr.block_id:
            blk = pool[hdr.block_id]
        out.append(blk)
    return out


def audit_chain(node: Node, pool: dict[bytes, FullBlock]) -> int | None:
    """Re-validate an adopted chain from genesis; first bad height or None.

    Checks the header chain, the content predicate and every ticket.
    """
    from ..consensus import choose_snapshots, header_chain_failure, ticket_seed, validate_ticket
    from ..ledger import execute_block

    params = node.params
    bad = header_chain_failure(node.headers, params.difficulty)
    if bad is not None:
        return bad + 2
    roots = [node.genesis.root] + [h.a_s for h in node.headers]
    state = node.genesis
    for h, blk in enumerate(chain_blocks(node, pool), start=2):
        hdr = blk.header
        heights = choose_snapshots(h - 1, blk.ticket.pk, params.n, params.k)
        s_t = ticket_seed(hdr.s, hdr.a_s, hdr.a_tau)
        if blk.ticket.ctr != hdr.ctr or not validate_ticket(
            blk.ticket, s_t, [roots[x - 1] for x in heights], hdr.a_t, params.n, params.k
        ):
            return h
        state = execute_block(state, hdr.a_s, blk.tau, hdr.a_tau, params.ledger)
        if state is None:
            return h
    if state.root != node.tip_state.root:
        return node.length
    return None

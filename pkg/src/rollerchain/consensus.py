"""Mining lottery: snapshot selection, tickets, RollerPow and BitcoinPow.

Heights are 1-based with the genesis block at height 1; a chain of length L
has mined headers for heights 2..L.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Protocol, Sequence

from .authdict import AuthDict, LookupProof, check_path
from .hashing import ZERO_DIGEST, hash_args, top_bits, u32, u64
from .ledger import (
    Box,
    BlockContent,
    LedgerParams,
    StateSnapshot,
    Transaction,
    execute_block,
)

GENESIS_HEIGHT = 1
HEADER_SIZE = 136


class QueryMeter(Protocol):
    def charge(self, n: int = 1) -> None: ...


@dataclass(frozen=True)
class Difficulty:
    D: int
    q: int = 1
    mu: int = 32

    def __post_init__(self):
        if not 1 <= self.mu <= 256:
            raise ValueError("mu must be in 1..256")
        if not 0 <= self.D <= 2**self.mu:
            raise ValueError("D must lie in [0, 2^mu]")
        if self.q < 1:
            raise ValueError("q must be at least 1")

    @classmethod
    def from_rate(cls, rate: float, q: int = 1, mu: int = 32) -> Difficulty:
        """Threshold whose linearised per-call success rate D*q/2^mu is ``rate``."""
        return cls(round(rate * 2**mu / q), q, mu)

    @property
    def attempt_probability(self) -> float:
        return self.D / 2**self.mu

    @property
    def call_probability(self) -> float:
        """Exact chance that q independent attempts contain a win."""
        return 1.0 - (1.0 - self.attempt_probability) ** self.q

    @property
    def linear_probability(self) -> float:
        return self.D * self.q / 2**self.mu

    def wins(self, digest: bytes) -> bool:
        return top_bits(digest, self.mu) < self.D


@dataclass(frozen=True)
class ChainParams:
    n: int
    k: int
    difficulty: Difficulty
    ledger: LedgerParams = LedgerParams()

    def __post_init__(self):
        if not self.n >= self.k >= 1:
            raise ValueError("need n >= k >= 1")


@dataclass(frozen=True, slots=True)
class BlockHeader:
    s: bytes
    a_t: bytes
    a_tau: bytes
    a_s: bytes
    ctr: int
    block_id: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("s", "a_t", "a_tau", "a_s"):
            if len(getattr(self, name)) != 32:
                raise ValueError(f"header field {name} must be 32 bytes")
        if not 0 <= self.ctr < 2**64:
            raise ValueError("ctr must fit in 64 bits")
        inner = hash_args(self.s, self.a_t, self.a_tau, self.a_s)
        object.__setattr__(self, "block_id", hash_args(u64(self.ctr), inner))

    def to_bytes(self) -> bytes:
        return self.s + self.a_t + self.a_tau + self.a_s + u64(self.ctr)

    @classmethod
    def from_bytes(cls, data: bytes) -> BlockHeader:
        if len(data) != HEADER_SIZE:
            raise ValueError(f"header encoding is {HEADER_SIZE} bytes, got {len(data)}")
        data = bytes(data)
        return cls(data[0:32], data[32:64], data[64:96], data[96:128], int.from_bytes(data[128:], "big"))


def link_hash(prev: BlockHeader | None) -> bytes:
    """s for the block after ``prev``; zero when extending the genesis block."""
    if prev is None:
        return ZERO_DIGEST
    return prev.block_id


@lru_cache(maxsize=4096)
def _residues(pk: bytes, n: int, k: int) -> tuple[int, ...]:
    return tuple(int.from_bytes(hash_args(pk, u32(i)), "big") % n for i in range(1, k + 1))


def snapshot_residues(pk: bytes, n: int, k: int) -> list[int]:
    return list(_residues(pk, n, k))


def choose_snapshots(chain_length: int, pk: bytes, n: int, k: int) -> list[int]:
    """Heights of the k states a key must hold to extend a chain of this length."""
    if not n >= k >= 1:
        raise ValueError("need n >= k >= 1")
    out = []
    for r in _residues(pk, n, k):
        h = r + chain_length - n
        out.append(h if h > 0 else GENESIS_HEIGHT)
    return out


def key_eligible(pk: bytes, n: int, k: int) -> bool:
    """A key may mine iff its k snapshot offsets are pairwise distinct.

    Distinct offsets give distinct heights once the chain is longer than n;
    while it is shorter, several offsets may clamp onto the genesis state.
    """
    residues = _residues(pk, n, k)
    return len(set(residues)) == len(residues)


@dataclass(frozen=True)
class TicketEntry:
    entry_id: bytes
    a_s: bytes
    proof: LookupProof
    box: Box


def _ticket_pk_key(pk: bytes) -> bytes:
    return hash_args(b"ticket-pk", pk)


@dataclass(frozen=True)
class Ticket:
    pk: bytes
    ctr: int
    entries: tuple[TicketEntry, ...]

    def as_dict(self) -> AuthDict:
        items = [(_ticket_pk_key(self.pk), u64(self.ctr) + self.pk)]
        for e in self.entries:
            items.append((e.entry_id, e.a_s + e.proof.encoded + e.box.encoded))
        return AuthDict(items)

    @cached_property
    def root(self) -> bytes:
        return self.as_dict().root

    def to_bytes(self) -> bytes:
        out = bytearray(len(self.pk).to_bytes(2, "big") + self.pk + u64(self.ctr))
        out.append(len(self.entries))
        for e in self.entries:
            proof = e.proof.encoded
            out += e.entry_id + e.a_s + u32(len(proof)) + proof + e.box.encoded
        return bytes(out)

    @classmethod
    def read(cls, data: bytes, pos: int = 0) -> tuple[Ticket, int]:
        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise ValueError("truncated ticket")
            chunk = bytes(data[pos : pos + n])
            pos += n
            return chunk

        pk = take(int.from_bytes(take(2), "big"))
        ctr = int.from_bytes(take(8), "big")
        entries = []
        for _ in range(take(1)[0]):
            entry_id = take(32)
            a_s = take(32)
            proof = LookupProof.from_bytes(take(int.from_bytes(take(4), "big")))
            entries.append(TicketEntry(entry_id, a_s, proof, Box.from_bytes(take(48))))
        return cls(pk, ctr, tuple(entries)), pos


def ticket_seed(s: bytes, a_s: bytes, a_tau: bytes) -> bytes:
    return hash_args(s, a_s, a_tau)


def gen_ticket(
    snapshots: Sequence[StateSnapshot], s_t: bytes, pk: bytes, ctr: int
) -> tuple[bytes, Ticket]:
    seed = u64(ctr)
    entries = []
    for snap in snapshots:
        entry_id = hash_args(seed, pk, s_t)
        proof = snap.boxes.generate(entry_id)
        # generate() anchors the proof at the entry member() would select
        box = Box.from_bytes(proof.anchor_value)
        entries.append(TicketEntry(entry_id, snap.root, proof, box))
        seed = entry_id
    ticket = Ticket(pk, ctr, tuple(entries))
    return ticket.root, ticket


def validate_ticket(
    t: Ticket,
    s_t: bytes,
    committed_roots: Sequence[bytes],
    a_t: bytes,
    n: int,
    k: int,
) -> bool:
    if not key_eligible(t.pk, n, k):
        return False
    if len(t.entries) != k or len(committed_roots) != k:
        return False
    seed = u64(t.ctr)
    for entry, committed in zip(t.entries, committed_roots):
        expected_id = hash_args(seed, t.pk, s_t)
        if entry.entry_id != expected_id or entry.a_s != committed:
            return False
        if not check_path(committed, expected_id, entry.proof):
            return False
        # member() of a verified proof is its anchor entry
        if entry.proof.anchor_value != entry.box.encoded:
            return False
        seed = expected_id
    return t.root == a_t


@dataclass(frozen=True)
class FullBlock:
    header: BlockHeader
    ticket: Ticket
    tau: tuple[Transaction, ...]

    @property
    def content(self) -> BlockContent:
        return BlockContent(self.header.a_s, self.tau, self.header.a_tau)

    def to_bytes(self) -> bytes:
        return self.encoded

    @cached_property
    def encoded(self) -> bytes:
        ticket = self.ticket.to_bytes()
        out = bytearray(self.header.to_bytes())
        out += u32(len(ticket)) + ticket
        out += u32(len(self.tau))
        for tx in self.tau:
            out += u32(len(tx.encoded)) + tx.encoded
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> FullBlock:
        if len(data) < HEADER_SIZE + 8:
            raise ValueError("truncated block")
        header = BlockHeader.from_bytes(data[:HEADER_SIZE])
        pos = HEADER_SIZE
        tlen = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        ticket_bytes = data[pos : pos + tlen]
        ticket, end = Ticket.read(ticket_bytes)
        if end != tlen or len(ticket_bytes) != tlen:
            raise ValueError("bad ticket length")
        pos += tlen
        if pos + 4 > len(data):
            raise ValueError("truncated block")
        count = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        tau = []
        for _ in range(count):
            if pos + 4 > len(data):
                raise ValueError("truncated block")
            txlen = int.from_bytes(data[pos : pos + 4], "big")
            pos += 4
            if pos + txlen > len(data):
                raise ValueError("truncated block")
            tau.append(Transaction.from_bytes(data[pos : pos + txlen]))
            pos += txlen
        if pos != len(data):
            raise ValueError("trailing bytes after block")
        return cls(header, ticket, tuple(tau))


def roller_pow(
    x: tuple[bytes, bytes, Sequence[Transaction]],
    prev: BlockHeader | None,
    pk: bytes,
    snapshots: Sequence[StateSnapshot],
    difficulty: Difficulty,
    meter: QueryMeter | None = None,
) -> FullBlock | None:
    """Up to q ticket-backed lottery attempts; the mined block or None.

    ``x`` is (a_tau, a_s, tau); ``snapshots`` are the states at the heights
    :func:`choose_snapshots` dictates for ``pk``, in index order.
    """
    a_tau, a_s, tau = x
    s = link_hash(prev)
    s_t = ticket_seed(s, a_s, a_tau)
    for ctr in range(1, difficulty.q + 1):
        a_t, ticket = gen_ticket(snapshots, s_t, pk, ctr)
        h = hash_args(s, a_t, a_tau, a_s)
        if meter is not None:
            meter.charge()
        if difficulty.wins(hash_args(u64(ctr), h)):
            return FullBlock(BlockHeader(s, a_t, a_tau, a_s, ctr), ticket, tuple(tau))
    return None


@dataclass(frozen=True, slots=True)
class BitcoinHeader:
    s: bytes
    a_tau: bytes
    a_s: bytes
    ctr: int
    block_id: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        inner = hash_args(self.s, self.a_tau, self.a_s)
        object.__setattr__(self, "block_id", hash_args(u64(self.ctr), inner))


@dataclass(frozen=True)
class BitcoinBlock:
    header: BitcoinHeader
    tau: tuple[Transaction, ...]


def bitcoin_pow(
    x: tuple[bytes, bytes, Sequence[Transaction]],
    prev: BitcoinHeader | None,
    difficulty: Difficulty,
    meter: QueryMeter | None = None,
) -> BitcoinBlock | None:
    a_tau, a_s, tau = x
    s = ZERO_DIGEST if prev is None else prev.block_id
    h = hash_args(s, a_tau, a_s)
    for ctr in range(1, difficulty.q + 1):
        if meter is not None:
            meter.charge()
        if difficulty.wins(hash_args(u64(ctr), h)):
            return BitcoinBlock(BitcoinHeader(s, a_tau, a_s, ctr), tuple(tau))
    return None


def header_chain_failure(
    headers: Sequence[BlockHeader],
    difficulty: Difficulty,
    prev: BlockHeader | None = None,
) -> int | None:
    """Index of the first header breaking the link or lottery rule, else None."""
    for i, hdr in enumerate(headers):
        if hdr.s != link_hash(prev) or not difficulty.wins(hdr.block_id):
            return i
        prev = hdr
    return None


def validate_header_chain(headers: Sequence[BlockHeader], difficulty: Difficulty) -> bool:
    return header_chain_failure(headers, difficulty) is None


def verify_block(
    block: FullBlock,
    prev_state: StateSnapshot,
    prev_header: BlockHeader | None,
    committed_root: Callable[[int], bytes],
    params: ChainParams,
) -> StateSnapshot | None:
    """Full validation of a block extending a chain whose tip state is ``prev_state``.

    ``committed_root(h)`` returns the state root committed at height h on the
    chain being extended (the genesis root for h == 1).  Returns the new tip
    state or None.
    """
    hdr = block.header
    if hdr.s != link_hash(prev_header) or not params.difficulty.wins(hdr.block_id):
        return None
    t = block.ticket
    if t.ctr != hdr.ctr:
        return None
    heights = choose_snapshots(prev_state.height, t.pk, params.n, params.k)
    try:
        roots = [committed_root(h) for h in heights]
    except (KeyError, IndexError):
        return None
    s_t = ticket_seed(hdr.s, hdr.a_s, hdr.a_tau)
    if not validate_ticket(t, s_t, roots, hdr.a_t, params.n, params.k):
        return None
    return execute_block(prev_state, hdr.a_s, block.tau, hdr.a_tau, params.ledger)

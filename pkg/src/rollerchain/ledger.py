"""Box-based transactional model: block validation, block application and the
content predicate / reader / input-contribution functions built on them."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, NamedTuple, Sequence

from .authdict import AuthDict
from .hashing import H, u16, u64

BOX_SIZE = 48
DEFAULT_CONST_REWARD = 50


class LedgerError(Exception):
    pass


class MissingBox(LedgerError):
    pass


class FeeDirection(str, Enum):
    # created - removed >= 0, exactly as the validation algorithm is written
    CREATED_MINUS_REMOVED = "createdMinusRemoved"
    # removed - created >= 0, the usual UTXO convention
    STANDARD = "standard"


@dataclass(frozen=True, slots=True)
class Box:
    value: int
    lock: bytes
    nonce: int
    id: bytes = field(init=False, repr=False, compare=False)
    encoded: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.value < 2**64:
            raise ValueError("box value must fit in an unsigned 64-bit integer")
        if len(self.lock) != 32:
            raise ValueError("lock digest must be 32 bytes")
        if not 0 <= self.nonce < 2**64:
            raise ValueError("box nonce must fit in an unsigned 64-bit integer")
        encoded = u64(self.value) + self.lock + u64(self.nonce)
        object.__setattr__(self, "encoded", encoded)
        object.__setattr__(self, "id", H(b"box" + encoded))

    def __bytes__(self) -> bytes:
        return self.encoded

    @classmethod
    def from_bytes(cls, data: bytes) -> Box:
        if len(data) != BOX_SIZE:
            raise ValueError(f"box encoding is {BOX_SIZE} bytes, got {len(data)}")
        return cls(
            int.from_bytes(data[:8], "big"),
            bytes(data[8:40]),
            int.from_bytes(data[40:48], "big"),
        )


def hash_lock(preimage: bytes) -> bytes:
    """Lock digest opened by ``preimage``."""
    return H(preimage)


def hashlock_opener_valid(box: Box, opener: bytes) -> bool:
    return H(opener) == box.lock


@dataclass(frozen=True, slots=True)
class Transaction:
    removals: tuple[tuple[bytes, bytes], ...] = ()
    creations: tuple[Box, ...] = ()
    encoded: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "removals", tuple((bytes(i), bytes(o)) for i, o in self.removals))
        object.__setattr__(self, "creations", tuple(self.creations))
        if not self.removals and not self.creations:
            raise ValueError("transaction neither removes nor creates boxes")
        ids = [i for i, _ in self.removals]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate removal id in transaction")
        cids = [b.id for b in self.creations]
        if len(set(cids)) != len(cids):
            raise ValueError("duplicate creation id in transaction")
        out = bytearray(u16(len(self.removals)))
        for entry_id, opener in self.removals:
            if len(entry_id) != 32:
                raise ValueError("removal id must be 32 bytes")
            out += entry_id + u16(len(opener)) + opener
        out += u16(len(self.creations))
        for box in self.creations:
            out += box.encoded
        object.__setattr__(self, "encoded", bytes(out))

    @classmethod
    def coinbase(cls, box: Box) -> Transaction:
        return cls((), (box,))

    @property
    def is_coinbase_shaped(self) -> bool:
        return not self.removals and len(self.creations) == 1

    def __bytes__(self) -> bytes:
        return self.encoded

    @property
    def txid(self) -> bytes:
        return H(self.encoded)

    @classmethod
    def read(cls, data: bytes, pos: int = 0) -> tuple[Transaction, int]:
        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise ValueError("truncated transaction")
            chunk = bytes(data[pos : pos + n])
            pos += n
            return chunk

        removals = []
        for _ in range(int.from_bytes(take(2), "big")):
            entry_id = take(32)
            removals.append((entry_id, take(int.from_bytes(take(2), "big"))))
        creations = [Box.from_bytes(take(BOX_SIZE)) for _ in range(int.from_bytes(take(2), "big"))]
        return cls(tuple(removals), tuple(creations)), pos

    @classmethod
    def from_bytes(cls, data: bytes) -> Transaction:
        tx, end = cls.read(data)
        if end != len(data):
            raise ValueError("trailing bytes after transaction")
        return tx


@dataclass(frozen=True)
class LedgerParams:
    const_reward: int = DEFAULT_CONST_REWARD
    fee_direction: FeeDirection = FeeDirection.CREATED_MINUS_REMOVED
    opener_valid: Callable[[Box, bytes], bool] = hashlock_opener_valid


DEFAULT_PARAMS = LedgerParams()


@dataclass(frozen=True)
class StateSnapshot:
    height: int
    boxes: AuthDict

    @property
    def root(self) -> bytes:
        return self.boxes.root

    def __len__(self) -> int:
        return len(self.boxes)


class BlockContent(NamedTuple):
    a_s: bytes
    tau: tuple[Transaction, ...]
    a_tau: bytes


def tx_index_id(i: int) -> bytes:
    return i.to_bytes(32, "big")


def tx_root(tau: Sequence[Transaction]) -> bytes:
    """Root of the transaction sequence as an index -> transaction dictionary."""
    return AuthDict((tx_index_id(i), tx) for i, tx in enumerate(tau)).root


def make_genesis(boxes: Iterable[Box]) -> tuple[StateSnapshot, BlockContent]:
    """Genesis state (height 1) and the content record of the genesis block."""
    boxes = tuple(boxes)
    tx = Transaction((), boxes)
    state = StateSnapshot(1, AuthDict((b.id, b) for b in boxes))
    tau = (tx,)
    return state, BlockContent(state.root, tau, tx_root(tau))


class _Overlay:
    """Working view of a state while a block's transactions are replayed."""

    __slots__ = ("base", "removed", "added")

    def __init__(self, base: AuthDict):
        self.base = base
        self.removed: set[bytes] = set()
        self.added: dict[bytes, Box] = {}

    def get(self, entry_id: bytes) -> Box | None:
        box = self.added.get(entry_id)
        if box is not None:
            return box
        if entry_id in self.removed:
            return None
        return self.base.get(entry_id)

    def remove(self, entry_id: bytes) -> None:
        if entry_id in self.added:
            del self.added[entry_id]
        else:
            self.removed.add(entry_id)

    def add(self, box: Box) -> None:
        self.added[box.id] = box

    def commit(self) -> AuthDict:
        return self.base.batch_update(self.removed, self.added.items())


def _tx_fee(view: _Overlay, tx: Transaction, params: LedgerParams) -> int | None:
    """Replay a non-coinbase transaction into ``view``; None if invalid.

    On failure ``view`` may be partially modified.
    """
    fee = 0
    for entry_id, opener in tx.removals:
        box = view.get(entry_id)
        if box is None or not params.opener_valid(box, opener):
            return None
        fee -= box.value
        view.remove(entry_id)
    for box in tx.creations:
        if view.get(box.id) is not None:
            return None
        fee += box.value
        view.add(box)
    if params.fee_direction is FeeDirection.STANDARD:
        fee = -fee
    if fee < 0:
        return None
    return fee


def execute_block(
    prev: StateSnapshot,
    a_s: bytes,
    tau: Sequence[Transaction],
    a_tau: bytes,
    params: LedgerParams = DEFAULT_PARAMS,
) -> StateSnapshot | None:
    """Validate a block and return the resulting state, or None if invalid."""
    if not tau:
        return None
    coinbase = tau[0]
    if coinbase.removals or len(coinbase.creations) != 1:
        return None
    cb_box = coinbase.creations[0]
    view = _Overlay(prev.boxes)
    if view.get(cb_box.id) is not None:
        return None
    view.add(cb_box)
    fee_total = 0
    for tx in tau[1:]:
        fee = _tx_fee(view, tx, params)
        if fee is None:
            return None
        fee_total += fee
    if cb_box.value != fee_total + params.const_reward:
        return None
    after = view.commit()
    if after.root != a_s or tx_root(tau) != a_tau:
        return None
    return StateSnapshot(prev.height + 1, after)


def validate_block(
    prev: StateSnapshot,
    a_s: bytes,
    tau: Sequence[Transaction],
    a_tau: bytes,
    params: LedgerParams = DEFAULT_PARAMS,
) -> bool:
    return execute_block(prev, a_s, tau, a_tau, params) is not None


def apply_block(state: StateSnapshot, tau: Sequence[Transaction]) -> StateSnapshot:
    """Remove every opened box and append every created one, in order.

    Openers and fees are not checked; callers validate first.
    """
    view = _Overlay(state.boxes)
    for tx in tau:
        for entry_id, _ in tx.removals:
            if view.get(entry_id) is None:
                raise MissingBox(entry_id.hex())
            view.remove(entry_id)
        for box in tx.creations:
            view.add(box)
    return StateSnapshot(state.height + 1, view.commit())


def content_valid(
    contents: Sequence[BlockContent],
    genesis: StateSnapshot,
    params: LedgerParams = DEFAULT_PARAMS,
) -> bool:
    """The content validation predicate V over a chain's content vector.

    ``contents[0]`` is the genesis record and is not re-validated.
    """
    return fold_contents(contents, genesis, params) is not None


def fold_contents(
    contents: Sequence[BlockContent],
    genesis: StateSnapshot,
    params: LedgerParams = DEFAULT_PARAMS,
) -> StateSnapshot | None:
    state = genesis
    for a_s, tau, a_tau in contents[1:]:
        state = execute_block(state, a_s, tau, a_tau, params)
        if state is None:
            return None
    return state


def read_chain(
    contents: Sequence[BlockContent],
    genesis: StateSnapshot,
    params: LedgerParams = DEFAULT_PARAMS,
) -> list[BlockContent] | None:
    """R: the content vector when V holds, None (undefined) otherwise."""
    if not contents:
        return []
    return list(contents) if content_valid(contents, genesis, params) else None


class BlockInput(NamedTuple):
    a_s: bytes
    tau: tuple[Transaction, ...]
    a_tau: bytes
    state: StateSnapshot


def build_input(
    state: StateSnapshot,
    candidates: Iterable[Transaction],
    miner_lock: bytes,
    params: LedgerParams = DEFAULT_PARAMS,
    coinbase_nonce: int | None = None,
) -> BlockInput:
    """I: keep the greedy valid subsequence of ``candidates`` and pay the miner.

    Candidates are scanned once in order; each is kept iff it is valid against
    the state produced by the ones kept before it.
    """
    view = _Overlay(state.boxes)
    kept = []
    fee_total = 0
    for tx in candidates:
        trial = _Overlay(view.base)
        trial.removed = set(view.removed)
        trial.added = dict(view.added)
        fee = _tx_fee(trial, tx, params)
        if fee is None:
            continue
        view = trial
        kept.append(tx)
        fee_total += fee
    nonce = state.height + 1 if coinbase_nonce is None else coinbase_nonce
    cb_box = Box(params.const_reward + fee_total, miner_lock, nonce)
    while view.get(cb_box.id) is not None:
        nonce += 1 << 32
        cb_box = Box(cb_box.value, miner_lock, nonce)
    view.add(cb_box)
    tau = (Transaction.coinbase(cb_box), *kept)
    after = view.commit()
    return BlockInput(after.root, tau, tx_root(tau), StateSnapshot(state.height + 1, after))

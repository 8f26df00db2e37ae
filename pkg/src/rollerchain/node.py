"""Full node: header chain, pruned block store, rolling mining snapshots,
longest-chain fork choice, peer serving and the two bootstrap procedures."""
from __future__ import annotations

import logging
from collections import ChainMap
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .authdict import AuthDict
from .consensus import (
    GENESIS_HEIGHT,
    HEADER_SIZE,
    BlockHeader,
    ChainParams,
    FullBlock,
    QueryMeter,
    choose_snapshots,
    header_chain_failure,
    key_eligible,
    roller_pow,
    verify_block,
)
from .hashing import ZERO_DIGEST, u32
from .ledger import BOX_SIZE, Box, StateSnapshot, Transaction, apply_block, build_input

log = logging.getLogger(__name__)

RECENT_STATES = 8
MAX_SIDE_BLOCKS = 256


class NodeError(Exception):
    pass


class InvalidBlock(NodeError):
    def __init__(self, height: int, reason: str = "validation failed"):
        super().__init__(f"invalid block at height {height}: {reason}")
        self.height = height


class ForkTooDeep(NodeError):
    pass


class NoSnapshotAvailable(NodeError):
    pass


class SnapshotRootMismatch(NodeError):
    pass


class NotRetained(NodeError):
    pass


# ---------------------------------------------------------------- wire formats

SNAPSHOT_ENTRY_SIZE = 32 + BOX_SIZE


def encode_snapshot(state: StateSnapshot) -> bytes:
    out = bytearray(u32(len(state.boxes)))
    for entry_id, box in state.boxes.items():
        out += entry_id + box.encoded
    return bytes(out)


def decode_snapshot(data: bytes, height: int) -> StateSnapshot:
    if len(data) < 4:
        raise ValueError("truncated snapshot")
    count = int.from_bytes(data[:4], "big")
    if len(data) != 4 + count * SNAPSHOT_ENTRY_SIZE:
        raise ValueError("snapshot length does not match entry count")
    items = []
    prev = None
    for i in range(count):
        off = 4 + i * SNAPSHOT_ENTRY_SIZE
        entry_id = bytes(data[off : off + 32])
        if prev is not None and entry_id <= prev:
            raise ValueError("snapshot entries not strictly sorted")
        box = Box.from_bytes(data[off + 32 : off + SNAPSHOT_ENTRY_SIZE])
        if box.id != entry_id:
            raise ValueError("snapshot entry id does not match its box")
        items.append((entry_id, box))
        prev = entry_id
    return StateSnapshot(height, AuthDict(items))


@dataclass(frozen=True)
class HeadersRequest:
    start: int
    stop: int


@dataclass(frozen=True)
class BlockRequest:
    height: int


@dataclass(frozen=True)
class SnapshotRequest:
    height: int


@dataclass(frozen=True)
class HeadersResponse:
    headers: tuple[BlockHeader, ...]


@dataclass(frozen=True)
class BlockResponse:
    height: int
    block: FullBlock


@dataclass(frozen=True)
class SnapshotResponse:
    state: StateSnapshot


@dataclass(frozen=True)
class NotRetainedResponse:
    reason: str = ""


TAG_HEADERS_REQ = 0x01
TAG_BLOCK_REQ = 0x02
TAG_SNAPSHOT_REQ = 0x03
TAG_HEADERS = 0x81
TAG_BLOCK = 0x82
TAG_SNAPSHOT = 0x83
TAG_NOT_RETAINED = 0xFF


def encode_message(msg) -> bytes:
    """Tagged frame: tag(1) || payloadLen(4 BE) || payload."""
    if isinstance(msg, HeadersRequest):
        tag, payload = TAG_HEADERS_REQ, u32(msg.start) + u32(msg.stop)
    elif isinstance(msg, BlockRequest):
        tag, payload = TAG_BLOCK_REQ, u32(msg.height)
    elif isinstance(msg, SnapshotRequest):
        tag, payload = TAG_SNAPSHOT_REQ, u32(msg.height)
    elif isinstance(msg, HeadersResponse):
        tag = TAG_HEADERS
        payload = u32(len(msg.headers)) + b"".join(h.to_bytes() for h in msg.headers)
    elif isinstance(msg, BlockResponse):
        tag, payload = TAG_BLOCK, u32(msg.height) + msg.block.to_bytes()
    elif isinstance(msg, SnapshotResponse):
        tag, payload = TAG_SNAPSHOT, u32(msg.state.height) + encode_snapshot(msg.state)
    elif isinstance(msg, NotRetainedResponse):
        tag, payload = TAG_NOT_RETAINED, msg.reason.encode()
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return bytes([tag]) + u32(len(payload)) + payload


def decode_message(frame: bytes):
    if len(frame) < 5:
        raise ValueError("truncated frame")
    tag = frame[0]
    size = int.from_bytes(frame[1:5], "big")
    payload = frame[5:]
    if len(payload) != size:
        raise ValueError("frame length mismatch")
    if tag == TAG_HEADERS_REQ and size == 8:
        return HeadersRequest(int.from_bytes(payload[:4], "big"), int.from_bytes(payload[4:], "big"))
    if tag == TAG_BLOCK_REQ and size == 4:
        return BlockRequest(int.from_bytes(payload, "big"))
    if tag == TAG_SNAPSHOT_REQ and size == 4:
        return SnapshotRequest(int.from_bytes(payload, "big"))
    if tag == TAG_HEADERS and size >= 4:
        count = int.from_bytes(payload[:4], "big")
        if size != 4 + count * HEADER_SIZE:
            raise ValueError("headers payload length mismatch")
        return HeadersResponse(
            tuple(
                BlockHeader.from_bytes(payload[4 + i * HEADER_SIZE : 4 + (i + 1) * HEADER_SIZE])
                for i in range(count)
            )
        )
    if tag == TAG_BLOCK and size >= 4:
        return BlockResponse(int.from_bytes(payload[:4], "big"), FullBlock.from_bytes(payload[4:]))
    if tag == TAG_SNAPSHOT and size >= 4:
        return SnapshotResponse(decode_snapshot(payload[4:], int.from_bytes(payload[:4], "big")))
    if tag == TAG_NOT_RETAINED:
        return NotRetainedResponse(payload.decode(errors="replace"))
    raise ValueError(f"unknown or malformed frame tag 0x{tag:02x}")


# ------------------------------------------------------------------- the node


@dataclass(frozen=True)
class PeerView:
    peer_id: object
    snapshot_heights: frozenset[int]
    block_range: tuple[int, int]  # inclusive; (0, -1) when empty


@dataclass
class StorageReport:
    headers: int
    blocks: int
    snapshots: int
    state: int
    block_count: int

    @property
    def total(self) -> int:
        return self.headers + self.blocks + self.snapshots + self.state


class Node:
    """Chain storage for one party.

    A mining node (``pk`` given) keeps the k snapshots its key dictates and
    every full block from the lowest of them upward.  ``archive`` disables
    block pruning; ``window_server`` additionally keeps the last n blocks.
    """

    def __init__(
        self,
        genesis: StateSnapshot,
        params: ChainParams,
        pk: bytes | None = None,
        archive: bool = False,
        window_server: bool = False,
    ):
        if pk is not None and not key_eligible(pk, params.n, params.k):
            raise ValueError("public key is not eligible to mine")
        self.genesis = genesis
        self.params = params
        self.pk = pk
        self.archive = archive
        self.window_server = window_server
        self.headers: list[BlockHeader] = []
        self.heights: dict[bytes, int] = {}
        self.full_blocks: dict[int, FullBlock] = {}
        self._block_sizes: dict[int, int] = {}
        self.snapshots: dict[int, StateSnapshot] = {}
        self.tip_state = genesis
        self.side_blocks: dict[bytes, FullBlock] = {}
        self._children: dict[bytes, list[bytes]] = {}
        # tip states of the last few heights, so shallow reorgs need no replay
        self.recent: dict[int, StateSnapshot] = {}

    # -- views

    @property
    def length(self) -> int:
        return len(self.headers) + 1

    @property
    def tip_header(self) -> BlockHeader | None:
        return self.headers[-1] if self.headers else None

    @property
    def tip_id(self) -> bytes | None:
        return self.headers[-1].block_id if self.headers else None

    def header_at(self, height: int) -> BlockHeader:
        if height < 2 or height > self.length:
            raise IndexError(height)
        return self.headers[height - 2]

    def committed_root(self, height: int) -> bytes:
        if height == GENESIS_HEIGHT:
            return self.genesis.root
        return self.header_at(height).a_s

    def snapshot_heights(self) -> list[int]:
        """Heights this node must hold to mine on its current tip."""
        if self.pk is None:
            return sorted(self.snapshots)
        return choose_snapshots(self.length, self.pk, self.params.n, self.params.k)

    def mining_snapshots(self) -> list[StateSnapshot]:
        return [self._held_state(h) for h in self.snapshot_heights()]

    def _held_state(self, height: int) -> StateSnapshot:
        if height == GENESIS_HEIGHT:
            return self.genesis
        if height == self.length:
            return self.tip_state
        return self.snapshots[height]

    def retained_block_range(self) -> tuple[int, int]:
        if not self.full_blocks:
            return (0, -1)
        return (min(self.full_blocks), max(self.full_blocks))

    def fork_at(self, height: int, pk: bytes | None, archive: bool = True) -> Node:
        """A new node holding this node's chain truncated at ``height``."""
        if not GENESIS_HEIGHT <= height <= self.length:
            raise ValueError(f"height {height} outside the chain")
        node = Node(self.genesis, self.params, pk=pk, archive=archive)
        node.headers = self.headers[: height - 1]
        node.heights = {h.block_id: i + 2 for i, h in enumerate(node.headers)}
        blocks = {h: b for h, b in self.full_blocks.items() if h <= height}
        node.full_blocks = dict(blocks)
        node._block_sizes = {h: self._block_sizes[h] for h in blocks}
        pool = {h: s for h, s in self._known_states().items() if h <= height}
        node.tip_state = self._state_at(height, pool, blocks)
        node._remember(node.tip_state)
        if pk is not None:
            for h in sorted(set(node.snapshot_heights())):
                if h != GENESIS_HEIGHT:
                    node.snapshots[h] = pool[h] = self._state_at(h, pool, blocks)
        node.prune()
        return node

    def peer_view(self, peer_id: object) -> PeerView:
        heights = set(self.snapshots) | {GENESIS_HEIGHT, self.length}
        return PeerView(peer_id, frozenset(heights), self.retained_block_range())

    def storage(self) -> StorageReport:
        snap_bytes = sum(4 + SNAPSHOT_ENTRY_SIZE * len(s) for s in self.snapshots.values())
        return StorageReport(
            headers=HEADER_SIZE * len(self.headers),
            blocks=sum(self._block_sizes.values()),
            snapshots=snap_bytes,
            state=sum(4 + SNAPSHOT_ENTRY_SIZE * len(st) for st in self._undo_states()),
            block_count=len(self.full_blocks),
        )

    def _undo_states(self) -> list[StateSnapshot]:
        held = {id(st): st for st in self.recent.values()}
        held[id(self.tip_state)] = self.tip_state
        return list(held.values())

    # -- state derivation

    def _state_at(
        self,
        height: int,
        states: dict[int, StateSnapshot] | None = None,
        blocks: dict[int, FullBlock] | None = None,
    ) -> StateSnapshot:
        """Re-derive the state at ``height`` from locally retained data."""
        states = self._known_states() if states is None else states
        blocks = self.full_blocks if blocks is None else blocks
        if height in states:
            return states[height]
        bases = [h for h in states if h <= height]
        if not bases:
            raise ForkTooDeep(f"no retained state at or below height {height}")
        base = max(bases)
        state = states[base]
        for h in range(base + 1, height + 1):
            blk = blocks.get(h)
            if blk is None:
                raise ForkTooDeep(f"block {h} needed to rebuild state {height} is pruned")
            state = apply_block(state, blk.tau)
        return state

    def _known_states(self) -> dict[int, StateSnapshot]:
        states = dict(self.recent)
        states.update(self.snapshots)
        states[GENESIS_HEIGHT] = self.genesis
        states[self.length] = self.tip_state
        return states

    def _roll_snapshots(self) -> None:
        if self.pk is None:
            return
        states = self._known_states()
        new = {}
        for h in sorted(set(self.snapshot_heights())):
            if h == GENESIS_HEIGHT:
                continue
            st = self._state_at(h, states)
            new[h] = st
            states[h] = st
        self.snapshots = new

    def prune(self) -> None:
        """Drop full blocks and snapshots no longer needed for mining.

        Headers are never pruned.
        """
        if self.pk is not None:
            wanted = set(self.snapshot_heights())
            self.snapshots = {h: s for h, s in self.snapshots.items() if h in wanted}
            floor = min(wanted)
        elif self.snapshots:
            floor = min(self.snapshots)
        else:
            floor = GENESIS_HEIGHT
        if self.archive:
            return
        if self.window_server:
            floor = min(floor, self.length - self.params.n + 1)
        for h in [h for h in self.full_blocks if h < floor]:
            del self.full_blocks[h]
            self._block_sizes.pop(h, None)

    # -- chain extension

    def _append(self, block: FullBlock, new_state: StateSnapshot) -> None:
        self.headers.append(block.header)
        h = self.length
        self.heights[block.header.block_id] = h
        self.full_blocks[h] = block
        self._block_sizes[h] = len(block.to_bytes())
        self.tip_state = new_state
        self._remember(new_state)
        self._roll_snapshots()
        self.prune()

    def _remember(self, state: StateSnapshot) -> None:
        self.recent[state.height] = state
        for h in [h for h in self.recent if h <= state.height - RECENT_STATES or h > state.height]:
            del self.recent[h]

    def check_block(self, block: FullBlock) -> StateSnapshot | None:
        return verify_block(block, self.tip_state, self.tip_header, self.committed_root, self.params)

    def on_new_block(self, block: FullBlock) -> None:
        new_state = self.check_block(block)
        if new_state is None:
            raise InvalidBlock(self.length + 1)
        self._append(block, new_state)

    def mine(
        self,
        candidates: Iterable[Transaction],
        miner_lock: bytes,
        meter: QueryMeter | None = None,
        coinbase_nonce: int | None = None,
    ) -> FullBlock | None:
        """Run one RollerPow call on the current tip; adopt and return a win."""
        if self.pk is None:
            raise NodeError("node has no mining key")
        x = build_input(self.tip_state, candidates, miner_lock, self.params.ledger, coinbase_nonce)
        block = roller_pow(
            (x.a_tau, x.a_s, x.tau),
            self.tip_header,
            self.pk,
            self.mining_snapshots(),
            self.params.difficulty,
            meter,
        )
        if block is not None:
            self._append(block, x.state)
        return block

    def mine_until(
        self, candidates: Sequence[Transaction], miner_lock: bytes, max_calls: int = 1 << 20
    ) -> FullBlock:
        """Call RollerPow with fresh coinbase nonces until a block is found."""
        for attempt in range(max_calls):
            block = self.mine(candidates, miner_lock, coinbase_nonce=(attempt << 32) + self.length + 1)
            if block is not None:
                return block
        raise RuntimeError("no block found")

    # -- forks

    def offer_block(self, block: FullBlock) -> bool:
        """Handle a block received from the network; True if the tip changed.

        Blocks that do not extend the tip wait in a bounded side pool until
        a branch through them becomes strictly longer than the main chain.
        """
        bid = block.header.block_id
        if bid in self.heights or bid in self.side_blocks:
            return False
        self._add_side(block)
        return self._try_branch(self._deepest_descendant(bid))

    def _add_side(self, block: FullBlock) -> None:
        bid = block.header.block_id
        self.side_blocks[bid] = block
        self._children.setdefault(block.header.s, []).append(bid)
        while len(self.side_blocks) > MAX_SIDE_BLOCKS:
            self._drop_side(next(iter(self.side_blocks)))

    def _drop_side(self, bid: bytes) -> None:
        blk = self.side_blocks.pop(bid, None)
        if blk is None:
            return
        siblings = self._children.get(blk.header.s)
        if siblings is not None:
            siblings.remove(bid)
            if not siblings:
                del self._children[blk.header.s]

    def _deepest_descendant(self, bid: bytes) -> bytes:
        best_depth, best = 0, bid
        stack = [(bid, 0)]
        while stack:
            cur, depth = stack.pop()
            if depth > best_depth:
                best_depth, best = depth, cur
            for child in self._children.get(cur, ()):
                stack.append((child, depth + 1))
        return best

    def _try_branch(self, tip: bytes) -> bool:
        branch = []
        cur = tip
        while cur in self.side_blocks:
            blk = self.side_blocks[cur]
            branch.append(blk)
            cur = blk.header.s
        if cur == ZERO_DIGEST:
            base = GENESIS_HEIGHT
        elif cur in self.heights:
            base = self.heights[cur]
        else:
            return False  # not connected yet
        if base + len(branch) <= self.length:
            return False
        branch.reverse()
        if base == self.length:
            changed = False
            for i, blk in enumerate(branch):
                try:
                    self.on_new_block(blk)
                except InvalidBlock:
                    for bad in branch[i:]:
                        self._drop_side(bad.header.block_id)
                    return changed
                self._drop_side(blk.header.block_id)
                changed = True
            return changed
        candidate = self.headers[: base - 1] + [b.header for b in branch]
        by_height = {base + 1 + i: b for i, b in enumerate(branch)}
        try:
            return self.resolve_fork(candidate, lambda h, hdr: by_height[h])
        except (InvalidBlock, ForkTooDeep) as exc:
            log.debug("fork rejected: %s", exc)
            for b in branch:
                self._drop_side(b.header.block_id)
            return False

    def resolve_fork(
        self,
        candidate: Sequence[BlockHeader],
        fetch_block: Callable[[int, BlockHeader], FullBlock],
    ) -> bool:
        """Adopt ``candidate`` (a full header list) if it is strictly longer.

        Returns True when the switch happened.  Raises ForkTooDeep when the
        state at the fork point cannot be rebuilt from retained data, and
        InvalidBlock when the candidate fails validation; in both cases the
        node is left unchanged.
        """
        cand_len = len(candidate) + 1
        if cand_len <= self.length:
            return False
        j = min(len(candidate), len(self.headers))
        while j > 0 and candidate[j - 1].block_id != self.headers[j - 1].block_id:
            j -= 1
        fork_height = j + 1
        prev = candidate[j - 1] if j else None
        bad = header_chain_failure(candidate[j:], self.params.difficulty, prev)
        if bad is not None:
            raise InvalidBlock(fork_height + 1 + bad, "header chain")

        states = {h: s for h, s in self._known_states().items() if h <= fork_height}
        # only heights <= fork_height are ever read from the local store here
        state = self._state_at(fork_height, states, self.full_blocks)

        def committed(h: int) -> bytes:
            return self.genesis.root if h == GENESIS_HEIGHT else candidate[h - 2].a_s

        new_blocks = {}
        derived = {fork_height: state}
        for h in range(fork_height + 1, cand_len + 1):
            hdr = candidate[h - 2]
            blk = fetch_block(h, hdr)
            if blk is None or blk.header != hdr:
                raise InvalidBlock(h, "fetched block does not match header")
            state = verify_block(blk, state, candidate[h - 3] if h > 2 else None, committed, self.params)
            if state is None:
                raise InvalidBlock(h)
            new_blocks[h] = blk
            derived[h] = state

        all_blocks = ChainMap(new_blocks, self.full_blocks)
        new_snaps = {}
        if self.pk is not None:
            wanted = choose_snapshots(cand_len, self.pk, self.params.n, self.params.k)
            pool = {**states, **derived}
            for h in sorted(set(wanted)):
                if h != GENESIS_HEIGHT:
                    new_snaps[h] = self._state_at(h, pool, all_blocks)
                    pool[h] = new_snaps[h]
        else:
            new_snaps = {h: s for h, s in self.snapshots.items() if h <= fork_height}

        old_branch = self.headers[j:]
        for h in list(self.full_blocks):
            if h > fork_height:
                self._add_side(self.full_blocks[h])
                del self.full_blocks[h]
                self._block_sizes.pop(h, None)
        for hdr in old_branch:
            self.heights.pop(hdr.block_id, None)
        self.headers = list(candidate)
        for h, blk in new_blocks.items():
            self.heights[blk.header.block_id] = h
            self.full_blocks[h] = blk
            self._block_sizes[h] = len(blk.to_bytes())
            self._drop_side(blk.header.block_id)
        self.tip_state = state
        self.snapshots = new_snaps
        self.recent = {h: s for h, s in {**states, **derived}.items() if h > cand_len - RECENT_STATES}
        self.prune()
        return True

    # -- serving

    def serve(self, req):
        if isinstance(req, HeadersRequest):
            if not 2 <= req.start <= req.stop <= self.length:
                raise NotRetained(f"headers {req.start}..{req.stop}")
            return HeadersResponse(tuple(self.headers[req.start - 2 : req.stop - 1]))
        if isinstance(req, BlockRequest):
            blk = self.full_blocks.get(req.height)
            if blk is None:
                raise NotRetained(f"block {req.height}")
            return BlockResponse(req.height, blk)
        if isinstance(req, SnapshotRequest):
            if req.height == GENESIS_HEIGHT:
                return SnapshotResponse(self.genesis)
            if req.height == self.length:
                return SnapshotResponse(self.tip_state)
            st = self.snapshots.get(req.height)
            if st is None:
                raise NotRetained(f"snapshot {req.height}")
            return SnapshotResponse(st)
        raise TypeError(f"unsupported request {type(req).__name__}")

    def serve_frame(self, frame: bytes) -> bytes:
        try:
            return encode_message(self.serve(decode_message(frame)))
        except NotRetained as exc:
            return encode_message(NotRetainedResponse(str(exc)))


def serve_request(store: Node, req):
    return store.serve(req)


# ------------------------------------------------------------------ bootstrap

Fetch = Callable[[object, object], object]


def bootstrap_full(
    genesis: StateSnapshot, blocks: Iterable[FullBlock], params: ChainParams
) -> Node:
    """Replay every full block from genesis into a fresh archive node."""
    node = Node(genesis, params, archive=True)
    for blk in blocks:
        node.on_new_block(blk)
    return node


def _ask(fetch: Fetch, peer: object, req):
    resp = fetch(peer, req)
    if isinstance(resp, NotRetainedResponse):
        raise NotRetained(resp.reason)
    return resp


def bootstrap_light(
    genesis: StateSnapshot,
    headers: Sequence[BlockHeader],
    peers: Sequence[PeerView],
    fetch: Fetch,
    params: ChainParams,
) -> Node:
    """Headers first, then one committed snapshot and the full blocks after it.

    ``fetch(peer_id, request)`` returns the peer's response object.
    """
    bad = header_chain_failure(headers, params.difficulty)
    if bad is not None:
        raise InvalidBlock(bad + 2, "header chain")
    length = len(headers) + 1

    def holders(h: int) -> list[object]:
        return [p.peer_id for p in peers if p.block_range[0] <= h <= p.block_range[1]]

    if length <= params.n:
        choices = [GENESIS_HEIGHT]
    else:
        floor = length - params.n
        choices = sorted({h for p in peers for h in p.snapshot_heights if floor <= h <= length})
    # deepest first; a height qualifies only if every later block is servable
    choices = [i for i in choices if all(holders(h) for h in range(i + 1, length + 1))]
    if not choices:
        raise NoSnapshotAvailable(f"no servable snapshot within the last {params.n} heights")

    state = None
    mismatch = False
    for i in choices:
        if i == GENESIS_HEIGHT:
            state = genesis
            break
        committed = headers[i - 2].a_s
        for peer in (p.peer_id for p in peers if i in p.snapshot_heights):
            try:
                got = _ask(fetch, peer, SnapshotRequest(i)).state
            except NotRetained:
                continue
            if got.height == i and got.root == committed:
                state = got
                break
            mismatch = True
        if state is not None:
            break
    if state is None:
        if mismatch:
            raise SnapshotRootMismatch("no served snapshot matches its committed root")
        raise NoSnapshotAvailable("advertised snapshots could not be fetched")
    chosen = state.height

    node = Node(genesis, params)
    node.headers = list(headers[: chosen - 1])
    node.heights = {h.block_id: i + 2 for i, h in enumerate(node.headers)}
    node.tip_state = state
    if chosen != GENESIS_HEIGHT:
        node.snapshots = {chosen: state}
    for h in range(chosen + 1, length + 1):
        want = headers[h - 2]
        blk = None
        for peer in holders(h):
            try:
                got = _ask(fetch, peer, BlockRequest(h)).block
            except NotRetained:
                continue
            if got.header == want:
                blk = got
                break
        if blk is None:
            raise NotRetained(f"no peer served block {h} matching the header chain")
        node.on_new_block(blk)
    return node

"""Authenticated dictionary: a canonical Merkle tree over sorted entry ids.

Entries are sorted by id and paired level by level; an odd node at the end of
a level is promoted unchanged.  The tree shape therefore depends only on the
number of entries, and the root only on the entry set.

Each leaf commits to its entry and to the id of the next entry in key order::

    leaf     = H(0x00 || id || succFlag || succId || valueBytes)
    internal = H(0x01 || left || right)

so a single authenticated leaf proves the absence of every id strictly between
it and its successor.  Values are any objects convertible with ``bytes()``.
"""
from __future__ import annotations

from bisect import bisect_left, insort
from dataclasses import dataclass
from functools import cached_property
from enum import IntEnum
from hashlib import sha256
from collections.abc import Iterable, Mapping

from .hashing import DIGEST_SIZE, ZERO_DIGEST

EMPTY_ROOT = ZERO_DIGEST
ID_SIZE = 32

_LEAF = b"\x00"
_NODE = b"\x01"
_NO_SUCC = b"\x00" + ZERO_DIGEST


class AuthDictError(Exception):
    pass


class EmptyDictionary(AuthDictError):
    pass


class InvalidProof(AuthDictError):
    pass


class MissingRemoval(AuthDictError):
    pass


class DuplicateInsertion(AuthDictError):
    pass


class ProofKind(IntEnum):
    MEMBERSHIP = 1
    NON_MEMBERSHIP = 2


class Side(IntEnum):
    """Which side of the running hash the sibling digest sits on."""

    LEFT = 0
    RIGHT = 1


def leaf_hash(entry_id: bytes, successor: bytes | None, value: bytes) -> bytes:
    succ = _NO_SUCC if successor is None else b"\x01" + successor
    return sha256(_LEAF + entry_id + succ + value).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(_NODE + left + right).digest()


@dataclass(frozen=True)
class LookupProof:
    kind: ProofKind
    queried_id: bytes
    anchor_id: bytes
    anchor_value: bytes
    successor: bytes | None
    path: tuple[tuple[bytes, Side], ...]

    def to_bytes(self) -> bytes:
        return self.encoded

    @cached_property
    def encoded(self) -> bytes:
        out = bytearray()
        out.append(int(self.kind))
        out += self.queried_id
        out += self.anchor_id
        out += len(self.anchor_value).to_bytes(2, "big")
        out += self.anchor_value
        if self.successor is None:
            out.append(0)
        else:
            out.append(1)
            out += self.successor
        out += len(self.path).to_bytes(2, "big")
        for digest, side in self.path:
            out.append(int(side))
            out += digest
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> LookupProof:
        proof, end = cls.read(data, 0)
        if end != len(data):
            raise ValueError("trailing bytes after proof")
        return proof

    @classmethod
    def read(cls, data: bytes, pos: int) -> tuple[LookupProof, int]:
        """Parse one proof starting at ``pos``; returns (proof, end offset)."""

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise ValueError("truncated proof")
            chunk = bytes(data[pos : pos + n])
            pos += n
            return chunk

        try:
            kind = ProofKind(take(1)[0])
        except ValueError:
            raise ValueError("bad proof kind") from None
        queried = take(ID_SIZE)
        anchor = take(ID_SIZE)
        value = take(int.from_bytes(take(2), "big"))
        flag = take(1)[0]
        if flag == 0:
            successor = None
        elif flag == 1:
            successor = take(ID_SIZE)
        else:
            raise ValueError("bad successor flag")
        path = []
        for _ in range(int.from_bytes(take(2), "big")):
            side_byte = take(1)[0]
            if side_byte > 1:
                raise ValueError("bad path side")
            path.append((take(DIGEST_SIZE), Side(side_byte)))
        return cls(kind, queried, anchor, value, successor, tuple(path)), pos


class AuthDict:
    """Immutable id -> value dictionary with a cached Merkle root.

    Updates go through :meth:`batch_update`, which returns a new version and
    leaves this one untouched.
    """

    __slots__ = ("_values", "_keys", "_leaf_cache", "_levels")

    def __init__(self, items: Mapping[bytes, object] | Iterable[tuple[bytes, object]] = ()):
        pairs = items.items() if isinstance(items, Mapping) else items
        values: dict[bytes, object] = {}
        for entry_id, value in pairs:
            _check_id(entry_id)
            if entry_id in values:
                raise DuplicateInsertion(entry_id.hex())
            values[entry_id] = value
        self._values = values
        self._keys = sorted(values)
        self._leaf_cache: dict[bytes, tuple[bytes | None, bytes]] = {}
        self._levels: list[list[bytes]] | None = None

    @classmethod
    def _from_parts(cls, values, keys, leaf_cache) -> AuthDict:
        d = cls.__new__(cls)
        d._values = values
        d._keys = keys
        d._leaf_cache = leaf_cache
        d._levels = None
        return d

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._values

    def __getitem__(self, entry_id: bytes):
        return self._values[entry_id]

    def get(self, entry_id: bytes, default=None):
        return self._values.get(entry_id, default)

    def keys(self) -> list[bytes]:
        return list(self._keys)

    def items(self) -> list[tuple[bytes, object]]:
        return [(k, self._values[k]) for k in self._keys]

    def values(self) -> list[object]:
        return [self._values[k] for k in self._keys]

    def __repr__(self) -> str:
        return f"AuthDict(n={len(self)}, root={self.root.hex()[:16]})"

    def _build(self) -> list[list[bytes]]:
        if self._levels is not None:
            return self._levels
        keys = self._keys
        values = self._values
        cache = self._leaf_cache
        lookup = cache.get
        leaves = []
        append = leaves.append
        for k, succ in zip(keys, keys[1:] + [None]):
            hit = lookup(k)
            if hit is not None and hit[0] == succ:
                append(hit[1])
            else:
                digest = leaf_hash(k, succ, bytes(values[k]))
                cache[k] = (succ, digest)
                append(digest)
        levels = [leaves]
        level = leaves
        sha, tag = sha256, _NODE
        while len(level) > 1:
            pairs = iter(level)
            nxt = [sha(tag + a + b).digest() for a, b in zip(pairs, pairs)]
            if len(level) & 1:
                nxt.append(level[-1])
            levels.append(nxt)
            level = nxt
        self._levels = levels
        return levels

    @property
    def root(self) -> bytes:
        if not self._keys:
            return EMPTY_ROOT
        return self._build()[-1][0]

    def generate(self, entry_id: bytes) -> LookupProof:
        keys = self._keys
        if not keys:
            raise EmptyDictionary("cannot name a member of an empty dictionary")
        _check_id(entry_id)
        i = bisect_left(keys, entry_id)
        if i < len(keys) and keys[i] == entry_id:
            kind, pos = ProofKind.MEMBERSHIP, i
        elif i == 0:
            kind, pos = ProofKind.NON_MEMBERSHIP, 0
        else:
            kind, pos = ProofKind.NON_MEMBERSHIP, i - 1
        anchor = keys[pos]
        successor = keys[pos + 1] if pos + 1 < len(keys) else None
        return LookupProof(
            kind=kind,
            queried_id=entry_id,
            anchor_id=anchor,
            anchor_value=bytes(self._values[anchor]),
            successor=successor,
            path=self._path(pos),
        )

    def _path(self, pos: int) -> tuple[tuple[bytes, Side], ...]:
        path = []
        for level in self._build()[:-1]:
            sib = pos ^ 1
            if sib < len(level):
                path.append((level[sib], Side.LEFT if sib < pos else Side.RIGHT))
            pos >>= 1
        return tuple(path)

    def batch_update(
        self,
        removals: Iterable[bytes] = (),
        insertions: Mapping[bytes, object] | Iterable[tuple[bytes, object]] = (),
    ) -> AuthDict:
        removals = set(removals)
        pairs = list(insertions.items() if isinstance(insertions, Mapping) else insertions)
        values = self._values
        for r in removals:
            if r not in values:
                raise MissingRemoval(r.hex())
        seen = set()
        for entry_id, _ in pairs:
            _check_id(entry_id)
            if entry_id in seen or (entry_id in values and entry_id not in removals):
                raise DuplicateInsertion(entry_id.hex())
            seen.add(entry_id)
        if not removals and not pairs:
            return self

        new_values = dict(values)
        cache = dict(self._leaf_cache)
        for r in removals:
            del new_values[r]
            cache.pop(r, None)
        for entry_id, value in pairs:
            new_values[entry_id] = value
            cache.pop(entry_id, None)

        changes = len(removals) + len(pairs)
        if changes * 8 > len(self._keys):
            keys = sorted(new_values)
        else:
            keys = list(self._keys)
            for r in removals:
                del keys[bisect_left(keys, r)]
            for entry_id in seen:
                insort(keys, entry_id)
        return AuthDict._from_parts(new_values, keys, cache)


def _check_id(entry_id: bytes) -> None:
    if not isinstance(entry_id, bytes) or len(entry_id) != ID_SIZE:
        raise ValueError("entry ids are 32-byte strings")


def root(d: AuthDict) -> bytes:
    return d.root


def check_root(d: AuthDict, digest: bytes) -> bool:
    return d.root == digest


def generate(d: AuthDict, entry_id: bytes) -> LookupProof:
    return d.generate(entry_id)


def batch_update(d: AuthDict, removals=(), insertions=()) -> AuthDict:
    return d.batch_update(removals, insertions)


def check_path(dict_root: bytes, entry_id: bytes, proof: LookupProof) -> bool:
    """Verify ``proof`` for ``entry_id`` against a root digest.

    Malformed proofs return False rather than raising.
    """
    try:
        if dict_root == EMPTY_ROOT or proof.queried_id != entry_id:
            return False
        if len(entry_id) != ID_SIZE or len(proof.anchor_id) != ID_SIZE:
            return False
        succ = proof.successor
        if succ is not None and len(succ) != ID_SIZE:
            return False
        anchor = proof.anchor_id
        if proof.kind == ProofKind.MEMBERSHIP:
            if anchor != entry_id:
                return False
        elif proof.kind == ProofKind.NON_MEMBERSHIP:
            if anchor < entry_id:
                if succ is not None and not entry_id < succ:
                    return False
            elif entry_id < anchor:
                # below the minimum: the anchor must be the leftmost leaf
                if any(side != Side.RIGHT for _, side in proof.path):
                    return False
            else:
                return False
        else:
            return False

        acc = leaf_hash(anchor, succ, proof.anchor_value)
        for digest, side in proof.path:
            if len(digest) != DIGEST_SIZE:
                return False
            if side == Side.LEFT:
                acc = sha256(_NODE + digest + acc).digest()
            elif side == Side.RIGHT:
                acc = sha256(_NODE + acc + digest).digest()
            else:
                return False
        return acc == dict_root
    except (TypeError, AttributeError, ValueError):
        return False


def member(dict_root: bytes, proof: LookupProof) -> tuple[bytes, bytes]:
    """The deterministically chosen member named by a verified proof.

    Returns ``(entry_id, value_bytes)``: the queried entry for a membership
    proof, otherwise the lower neighbour (or the minimum entry when the query
    lies below every key).
    """
    if not check_path(dict_root, proof.queried_id, proof):
        raise InvalidProof("proof does not verify against root")
    return proof.anchor_id, proof.anchor_value

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import framed, header_id, snapshot_heights
from rollerchain.consensus import (
    HEADER_SIZE,
    BlockHeader,
    ChainParams,
    Difficulty,
    FullBlock,
    Ticket,
    bitcoin_pow,
    choose_snapshots,
    header_chain_failure,
    key_eligible,
    link_hash,
    roller_pow,
    snapshot_residues,
    ticket_seed,
    validate_header_chain,
    validate_ticket,
    verify_block,
)
from rollerchain.hashing import H, ZERO_DIGEST
from rollerchain.ledger import Box, LedgerParams, build_input, hash_lock, make_genesis

# frozen from tests/oracles.py
HEADER_VECTOR = "1a366609c7fe7832e9c2db6a977a23f7b4f9e453468f51ffe4d1f25c15a22613"
HEIGHTS_PK1 = [978, 910, 949]

ALWAYS = Difficulty(2**32)
NEVER = Difficulty(0)
N, K = 8, 2


class Counter:
    def __init__(self):
        self.calls = 0

    def charge(self, n=1):
        self.calls += n


def eligible_key(n=N, k=K, start=0):
    i = start
    while not key_eligible(b"pk%d" % i, n, k):
        i += 1
    return b"pk%d" % i


def ineligible_key(n=N, k=K):
    i = 0
    while key_eligible(b"pk%d" % i, n, k):
        i += 1
    return b"pk%d" % i


def test_header_layout_and_id():
    hdr = BlockHeader(ZERO_DIGEST, b"\x11" * 32, b"\x22" * 32, b"\x33" * 32, 5)
    raw = hdr.to_bytes()
    assert len(raw) == HEADER_SIZE == 136
    assert hdr.block_id.hex() == HEADER_VECTOR == header_id(ZERO_DIGEST, b"\x11" * 32, b"\x22" * 32, b"\x33" * 32, 5).hex()
    assert BlockHeader.from_bytes(raw) == hdr
    with pytest.raises(ValueError):
        BlockHeader.from_bytes(raw[:-1])
    with pytest.raises(ValueError):
        BlockHeader(b"short", ZERO_DIGEST, ZERO_DIGEST, ZERO_DIGEST, 0)
    with pytest.raises(ValueError):
        BlockHeader(ZERO_DIGEST, ZERO_DIGEST, ZERO_DIGEST, ZERO_DIGEST, 2**64)


def test_choose_snapshots_vectors():
    assert choose_snapshots(1000, b"pk-1", 100, 3) == HEIGHTS_PK1 == snapshot_heights(1000, b"pk-1", 100, 3)
    assert choose_snapshots(10, b"pk-1", 100, 3) == [1, 1, 1]
    with pytest.raises(ValueError):
        choose_snapshots(10, b"pk", 2, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5000), st.binary(min_size=1, max_size=16), st.integers(1, 200), st.data())
def test_choose_snapshots_matches_reference_and_window(length, pk, n, data):
    k = data.draw(st.integers(1, n))
    got = choose_snapshots(length, pk, n, k)
    assert got == snapshot_heights(length, pk, n, k)
    assert all(max(1, length - n) <= h <= max(1, length - 1) for h in got)


def test_eligibility_is_distinct_residues():
    for i in range(200):
        pk = b"k%d" % i
        res = [int.from_bytes(framed(pk, struct.pack(">I", j)), "big") % 10 for j in (1, 2, 3)]
        assert key_eligible(pk, 10, 3) == (len(set(res)) == 3)
        assert snapshot_residues(pk, 10, 3) == res
    # with k == n the residues must be a permutation
    assert sum(key_eligible(b"k%d" % i, 3, 3) for i in range(300)) > 0


def test_difficulty_bounds_and_rates():
    with pytest.raises(ValueError):
        Difficulty(2**32 + 1)
    with pytest.raises(ValueError):
        Difficulty(-1)
    with pytest.raises(ValueError):
        Difficulty(1, q=0)
    d = Difficulty(2**30, q=4)
    assert d.attempt_probability == 0.25
    assert d.call_probability == pytest.approx(1 - 0.75**4)
    assert d.linear_probability == 1.0
    assert Difficulty.from_rate(0.1, q=4).D == round(0.1 * 2**32 / 4)
    assert ALWAYS.wins(b"\xff" * 32) and not NEVER.wins(bytes(32))
    assert Difficulty(1).wins(bytes(32)) and not Difficulty(1).wins(b"\x00\x00\x00\x01" + bytes(28))


def _chain(pk, length, difficulty=ALWAYS, n=N, k=K):
    """Mine ``length - 1`` blocks on a fresh genesis; returns (params, states, headers, blocks)."""
    params = ChainParams(n, k, difficulty, LedgerParams(50))
    genesis, _ = make_genesis([Box(100, hash_lock(b"g"), i) for i in range(4)])
    states, headers, blocks = [genesis], [], []
    while len(states) < length:
        tip = states[-1]
        x = build_input(tip, [], H(pk), params.ledger, coinbase_nonce=len(states))
        snaps = [states[h - 1] for h in choose_snapshots(tip.height, pk, n, k)]
        prev = headers[-1] if headers else None
        block = roller_pow((x.a_tau, x.a_s, x.tau), prev, pk, snaps, difficulty)
        assert block is not None
        roots = [s.root for s in states]
        new = verify_block(block, tip, prev, lambda h: roots[h - 1], params)
        assert new is not None and new.root == x.a_s
        states.append(new)
        headers.append(block.header)
        blocks.append(block)
    return params, states, headers, blocks


def test_mined_chain_verifies_and_links():
    pk = eligible_key()
    params, states, headers, blocks = _chain(pk, 14)
    assert validate_header_chain(headers, ALWAYS)
    assert headers[0].s == ZERO_DIGEST
    assert all(b.s == link_hash(a) for a, b in zip(headers, headers[1:]))
    assert header_chain_failure(headers, NEVER) == 0
    broken = headers[:5] + headers[6:]
    assert header_chain_failure(broken, ALWAYS) == 5


def test_full_block_round_trip():
    pk = eligible_key()
    _, _, _, blocks = _chain(pk, 6)
    for b in blocks:
        again = FullBlock.from_bytes(b.to_bytes())
        assert again == b and again.header.block_id == b.header.block_id
    raw = blocks[-1].to_bytes()
    for cut in (0, 10, HEADER_SIZE + 3, len(raw) - 1):
        with pytest.raises(ValueError):
            FullBlock.from_bytes(raw[:cut])
    with pytest.raises(ValueError):
        FullBlock.from_bytes(raw + b"\x00")


def _setup(pk, length=12):
    params, states, headers, blocks = _chain(pk, length)
    tip = states[-1]
    x = build_input(tip, [], H(pk), params.ledger, coinbase_nonce=999)
    snaps = [states[h - 1] for h in choose_snapshots(tip.height, pk, N, K)]
    roots = [s.root for s in states]
    return params, states, headers, x, snaps, roots


def test_ticket_checks_and_tampering():
    pk = eligible_key()
    params, states, headers, x, snaps, roots = _setup(pk)
    block = roller_pow((x.a_tau, x.a_s, x.tau), headers[-1], pk, snaps, ALWAYS)
    hdr, t = block.header, block.ticket
    committed = [s.root for s in snaps]
    s_t = ticket_seed(hdr.s, hdr.a_s, hdr.a_tau)
    assert validate_ticket(t, s_t, committed, hdr.a_t, N, K)
    assert not validate_ticket(t, H(b"other"), committed, hdr.a_t, N, K)
    assert not validate_ticket(t, s_t, [H(b"x")] * K, hdr.a_t, N, K)
    assert not validate_ticket(t, s_t, committed, H(b"wrong"), N, K)
    assert not validate_ticket(t, s_t, committed[:1], hdr.a_t, N, K)
    wrong_box = Box(1, ZERO_DIGEST, 0)
    e0 = t.entries[0]
    forged = Ticket(t.pk, t.ctr, (type(e0)(e0.entry_id, e0.a_s, e0.proof, wrong_box),) + t.entries[1:])
    assert not validate_ticket(forged, s_t, committed, forged.root, N, K)
    again, end = Ticket.read(t.to_bytes())
    assert again == t and end == len(t.to_bytes())


def test_verify_block_rejects_tampered_blocks():
    pk = eligible_key()
    params, states, headers, x, snaps, roots = _setup(pk)
    prev = headers[-1]
    good = roller_pow((x.a_tau, x.a_s, x.tau), prev, pk, snaps, ALWAYS)
    tip = states[-1]
    lookup = lambda h: roots[h - 1]  # noqa: E731
    assert verify_block(good, tip, prev, lookup, params) is not None
    # wrong parent link
    assert verify_block(good, tip, headers[-2], lookup, params) is None
    # ticket built from the wrong snapshots
    wrong = [states[0]] * K
    bad = roller_pow((x.a_tau, x.a_s, x.tau), prev, pk, wrong, ALWAYS)
    if [s.root for s in wrong] != [s.root for s in snaps]:
        assert verify_block(bad, tip, prev, lookup, params) is None
    # content that does not match a_s
    hacked = roller_pow((x.a_tau, H(b"bogus"), x.tau), prev, pk, snaps, ALWAYS)
    assert verify_block(hacked, tip, prev, lookup, params) is None
    # ticket counter out of step with the header
    swapped = FullBlock(good.header, Ticket(good.ticket.pk, good.ticket.ctr + 1, good.ticket.entries), good.tau)
    assert verify_block(swapped, tip, prev, lookup, params) is None
    # a key whose residues collide is never accepted
    bad_pk = ineligible_key()
    bad_snaps = [states[h - 1] for h in choose_snapshots(tip.height, bad_pk, N, K)]
    foreign = roller_pow((x.a_tau, x.a_s, x.tau), prev, bad_pk, bad_snaps, ALWAYS)
    assert verify_block(foreign, tip, prev, lookup, params) is None
    # difficulty 0 rejects even a well-formed block
    hard = ChainParams(N, K, NEVER, params.ledger)
    assert verify_block(good, tip, prev, lookup, hard) is None
    # snapshot heights the verifier cannot resolve
    assert verify_block(good, tip, prev, lambda h: {}[h], params) is None


def test_pow_charges_meter_per_attempt():
    pk = eligible_key()
    _, _, headers, x, snaps, _ = _setup(pk)
    m = Counter()
    assert roller_pow((x.a_tau, x.a_s, x.tau), headers[-1], pk, snaps, Difficulty(0, q=7), m) is None
    assert m.calls == 7
    m = Counter()
    assert roller_pow((x.a_tau, x.a_s, x.tau), headers[-1], pk, snaps, Difficulty(2**32, q=7), m) is not None
    assert m.calls == 1
    m = Counter()
    assert bitcoin_pow((x.a_tau, x.a_s, x.tau), None, Difficulty(0, q=5), m) is None
    assert m.calls == 5
    b = bitcoin_pow((x.a_tau, x.a_s, x.tau), None, ALWAYS)
    assert b.header.s == ZERO_DIGEST and b.header.ctr == 1
    assert bitcoin_pow((x.a_tau, x.a_s, x.tau), b.header, ALWAYS).header.s == b.header.block_id

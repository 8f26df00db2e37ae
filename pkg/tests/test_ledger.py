import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import box_id, sha, tx_bytes
from rollerchain.authdict import AuthDict
from rollerchain.hashing import H
from rollerchain.ledger import (
    BOX_SIZE,
    Box,
    FeeDirection,
    LedgerParams,
    MissingBox,
    StateSnapshot,
    Transaction,
    apply_block,
    build_input,
    content_valid,
    execute_block,
    fold_contents,
    hash_lock,
    make_genesis,
    read_chain,
    tx_root,
    validate_block,
)
from vectors import KINDS, suite

# frozen from tests/oracles.py: box_id(50, sha(b"alice"), 7)
BOX_VECTOR_ID = "b22d8538581bab333bd58f88571fc3b3d88cc9d1b01522312174b3d3c4b7582e"

PARAMS = LedgerParams(const_reward=50)


def to_tx(t):
    removals, creations = t
    return Transaction(tuple(removals), tuple(Box(*c) for c in creations))


def state_of(entries, height=1):
    return StateSnapshot(height, AuthDict({i: Box.from_bytes(v) for i, v in entries.items()}))


def test_box_encoding_and_id():
    lock = sha(b"alice")
    b = Box(50, lock, 7)
    assert len(b.encoded) == BOX_SIZE == 48
    assert b.id.hex() == BOX_VECTOR_ID == box_id(50, lock, 7).hex()
    assert Box.from_bytes(bytes(b)) == b
    with pytest.raises(ValueError):
        Box(-1, lock, 0)
    with pytest.raises(ValueError):
        Box(1, b"short", 0)
    with pytest.raises(ValueError):
        Box.from_bytes(b"\x00" * 47)


def test_transaction_encoding_matches_reference():
    lock = sha(b"bob")
    rid = sha(b"r")
    tx = Transaction(((rid, b"open"),), (Box(3, lock, 1), Box(4, lock, 2)))
    assert tx.encoded == tx_bytes([(rid, b"open")], [(3, lock, 1), (4, lock, 2)])
    assert Transaction.from_bytes(tx.encoded) == tx
    with pytest.raises(ValueError):
        Transaction.from_bytes(tx.encoded + b"\x00")
    with pytest.raises(ValueError):
        Transaction((), ())
    with pytest.raises(ValueError):
        Transaction(((rid, b""), (rid, b"")), ())
    with pytest.raises(ValueError):
        Transaction((), (Box(1, lock, 1), Box(1, lock, 1)))


@pytest.mark.parametrize("vector", suite(), ids=lambda v: v[0])
def test_conformance_vectors(vector):
    kind, prev, tau, a_s, a_tau, expected = vector
    got = validate_block(state_of(prev), a_s, [to_tx(t) for t in tau], a_tau, PARAMS)
    assert got is expected


def test_suite_covers_every_rule():
    assert {v[0] for v in suite()} == set(KINDS)


def _funded():
    pre = b"key"
    boxes = [Box(100, hash_lock(pre), i) for i in range(3)]
    genesis, _ = make_genesis(boxes)
    return genesis, boxes, pre


def _block(state, txs, miner=H(b"m"), params=PARAMS, nonce=99):
    x = build_input(state, txs, miner, params, coinbase_nonce=nonce)
    return x


def test_intra_block_spend_is_valid():
    genesis, boxes, pre = _funded()
    mid = Box(100, hash_lock(b"k2"), 50)
    t1 = Transaction(((boxes[0].id, pre),), (mid,))
    t2 = Transaction(((mid.id, b"k2"),), (Box(100, hash_lock(pre), 51),))
    x = _block(genesis, [t1, t2])
    assert x.tau[1:] == (t1, t2)
    assert validate_block(genesis, x.a_s, x.tau, x.a_tau, PARAMS)


def test_fee_directions():
    genesis, boxes, pre = _funded()
    shrink = Transaction(((boxes[0].id, pre),), (Box(90, hash_lock(pre), 70),))
    grow = Transaction(((boxes[1].id, pre),), (Box(110, hash_lock(pre), 71),))
    verbatim = PARAMS
    standard = LedgerParams(50, FeeDirection.STANDARD)
    xv = build_input(genesis, [shrink, grow], H(b"m"), verbatim)
    assert xv.tau[1:] == (grow,) and xv.tau[0].creations[0].value == 60
    xs = build_input(genesis, [shrink, grow], H(b"m"), standard)
    assert xs.tau[1:] == (shrink,) and xs.tau[0].creations[0].value == 60
    assert validate_block(genesis, xs.a_s, xs.tau, xs.a_tau, standard)
    assert not validate_block(genesis, xs.a_s, xs.tau, xs.a_tau, verbatim)


def test_duplicate_creation_rejected():
    genesis, boxes, pre = _funded()
    # recreating a live box is refused even with a valid opener elsewhere
    dup = Transaction(((boxes[0].id, pre),), (boxes[1],))
    x = build_input(genesis, [dup], H(b"m"), PARAMS)
    assert x.tau[1:] == ()
    forced = (Transaction.coinbase(Box(50, H(b"m"), 1)), dup)
    assert execute_block(genesis, bytes(32), forced, tx_root(forced), PARAMS) is None


def test_coinbase_colliding_with_live_box_rejected():
    genesis, boxes, _ = _funded()
    tau = (Transaction.coinbase(boxes[0]),)
    assert execute_block(genesis, genesis.root, tau, tx_root(tau), LedgerParams(100)) is None


def test_build_input_is_greedy_in_order():
    genesis, boxes, pre = _funded()
    a = Transaction(((boxes[0].id, pre),), (Box(100, hash_lock(pre), 80),))
    a_again = Transaction(((boxes[0].id, pre),), (Box(100, hash_lock(pre), 81),))
    bad = Transaction(((boxes[1].id, b"wrong"),), (Box(100, hash_lock(pre), 82),))
    x = build_input(genesis, [a, a_again, bad], H(b"m"), PARAMS)
    assert x.tau[1:] == (a,)
    assert x.state.height == 2
    assert x.state.root == x.a_s


def test_apply_block_and_missing_box():
    genesis, boxes, pre = _funded()
    t = Transaction(((boxes[0].id, pre),), (Box(100, hash_lock(pre), 90),))
    x = build_input(genesis, [t], H(b"m"), PARAMS)
    assert apply_block(genesis, x.tau).root == x.a_s
    with pytest.raises(MissingBox):
        apply_block(genesis, (Transaction(((H(b"nope"), b""),), ()),))


def test_content_valid_and_read_chain():
    genesis, boxes, pre = _funded()
    _, content0 = make_genesis(boxes)
    x1 = build_input(genesis, [], H(b"m"), PARAMS)
    x2 = build_input(x1.state, [Transaction(((boxes[2].id, pre),), (Box(100, H(b"z"), 1),))], H(b"m"), PARAMS)
    contents = [content0, (x1.a_s, x1.tau, x1.a_tau), (x2.a_s, x2.tau, x2.a_tau)]
    assert content_valid(contents, genesis, PARAMS)
    assert fold_contents(contents, genesis, PARAMS).root == x2.a_s
    assert read_chain(contents, genesis, PARAMS) == contents
    assert read_chain([], genesis, PARAMS) == []
    broken = contents[:2] + [(x1.a_s, x2.tau, x2.a_tau)]
    assert not content_valid(broken, genesis, PARAMS)
    assert read_chain(broken, genesis, PARAMS) is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3), st.booleans()), max_size=12),
       st.sampled_from(list(FeeDirection)))
def test_build_input_always_yields_a_valid_block(ops, direction):
    params = LedgerParams(50, direction)
    genesis, boxes, pre = _funded()
    ids = [b.id for b in boxes]
    candidates = []
    for n, (src, delta, good) in enumerate(ops):
        rid = ids[src % len(ids)]
        opener = pre if good else b"bad"
        candidates.append(Transaction(((rid, opener),), (Box(100 + delta - 1, hash_lock(pre), 1000 + n),)))
    x = build_input(genesis, candidates, H(b"m"), params)
    assert validate_block(genesis, x.a_s, x.tau, x.a_tau, params)
    assert execute_block(genesis, x.a_s, x.tau, x.a_tau, params).root == x.state.root

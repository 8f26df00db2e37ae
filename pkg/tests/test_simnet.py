import math
import random
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rollerchain.consensus import Difficulty
from rollerchain.hashing import H
from rollerchain.node import Node
from rollerchain.simnet import stats
from rollerchain.simnet.config import ParseError, SimConfig
from rollerchain.simnet.experiments import (
    experiment_archiving_availability,
    experiment_bootstrap_equivalence,
    experiment_network,
    experiment_pow_indistinguishability,
    experiment_storage_profile,
    run_equivalence,
)
from rollerchain.simnet.world import (
    HashMeter,
    InvariantViolation,
    Message,
    Transcript,
    World,
    adversary_spoof_origin,
    audit_chain,
    stream_rng,
)

SMALL = SimConfig(party_count=3, n=12, k=2, D=2**32 // 4, rounds=40, genesis_boxes=8, target_state_size=8)


def transcript_of(config):
    t = Transcript()
    World(config, t).run()
    return t.text()


def test_same_seed_same_transcript_and_seed_matters():
    a = transcript_of(SMALL)
    assert a == transcript_of(SMALL)
    assert a != transcript_of(SMALL.replace(rng_seed=2))
    assert "event=mined" in a and "event=storage" in a


def test_stream_rng_is_per_party_and_round():
    draws = {(p, r): stream_rng(7, p, r).random() for p in range(3) for r in range(3)}
    assert len(set(draws.values())) == 9
    assert stream_rng(7, 1, 2).random() == draws[(1, 2)]


def test_single_party_with_max_difficulty_mines_every_round():
    cfg = SimConfig(party_count=1, D=2**32, rounds=25, n=10, k=2)
    world = World(cfg).run()
    assert world.reference().length == 26
    assert world.parties[0].mined == 25


def test_messages_arrive_at_every_other_party_next_round(monkeypatch):
    seen = []
    original = Node.offer_block

    def spy(self, block):
        seen.append((id(self), block.header.block_id))
        return original(self, block)

    monkeypatch.setattr(Node, "offer_block", spy)
    world = World(SMALL.replace(D=2**32 // 2))
    for _ in range(15):
        world.run_round()
        sent = list(world.in_flight)
        seen.clear()
        world.run_round()
        for msg in sent:
            for p in world.parties:
                if p.index != msg.sender:
                    assert (id(p.node), msg.block.header.block_id) in seen


def test_altered_payload_is_caught():
    world = World(SMALL.replace(D=2**32))
    world.run_round()
    msg = world.in_flight[0]
    world.in_flight[0] = Message(msg.origin, msg.sender, msg.sent_round, msg.payload + b"x", msg.digest, msg.block)
    with pytest.raises(InvariantViolation):
        world.run_round()


def test_late_delivery_is_caught():
    world = World(SMALL.replace(D=2**32))
    world.run_round()
    world.run_round()
    stale = world.in_flight[0]
    world.in_flight.append(Message(stale.origin, stale.sender, stale.sent_round - 1, stale.payload, stale.digest, stale.block))
    with pytest.raises(InvariantViolation):
        world.run_round()


def test_spoofing_rewrites_origin_only():
    payload = b"block-bytes"
    m = Message(1, 1, 4, payload, H(payload), None)
    s = adversary_spoof_origin(m, 3)
    assert s.origin == 3 and s.sender == 1
    assert s.payload is m.payload and s.digest == m.digest


def test_adversary_run_keeps_honest_chains_valid():
    cfg = SMALL.replace(party_count=4, adversary_count=1, rounds=60)
    world, rep = experiment_network(cfg)
    assert rep.passed and rep.summary["audit_failures"] == 0
    for p in world.honest:
        assert audit_chain(p.node, world.blocks) is None


def test_spoofed_snapshot_origin_leaves_bootstrap_unchanged():
    cfg = SMALL.replace(rounds=80, n=8)
    plain = run_equivalence(cfg, 0, fork=False, spoof=False)
    spoofed = run_equivalence(cfg, 0, fork=False, spoof=True)
    assert plain["equal"] and spoofed["equal"]
    assert plain["light_root"] == spoofed["light_root"]
    assert plain["light_snapshot_height"] > 1


def test_hash_meter_enforces_budget():
    m = HashMeter(2)
    m.charge()
    m.charge()
    with pytest.raises(InvariantViolation):
        m.charge()


def test_chain_growth_matches_binomial():
    cfg = SimConfig(party_count=1, D=2**32 // 5, rounds=600, n=10, k=2, tx_gen_rate=0.0)
    world = World(cfg).run()
    rho = cfg.chain_params().difficulty.call_probability
    grown = world.reference().length - 1
    mean, sigma = cfg.rounds * rho, math.sqrt(cfg.rounds * rho * (1 - rho))
    assert abs(grown - mean) <= 5 * sigma


def test_short_chain_equivalence_is_trivial():
    rep = experiment_bootstrap_equivalence(SMALL.replace(n=50, rounds=20), runs=2, fork_attempts=0)
    assert rep.passed
    assert all(r["light_snapshot_height"] == 1 for r in rep.rows)


def test_forced_fork_hits_pruned_light_verifier():
    row = run_equivalence(SMALL.replace(n=6, rounds=60), 0, fork=True)
    assert row["equal"]
    assert row["fork_light"] == "ForkTooDeep"
    assert row["fork_full"] == "adopted"


def test_pow_experiment_with_zero_difficulty_is_symmetric():
    rep = experiment_pow_indistinguishability(400, Difficulty(0, q=3), seed=4)
    s = rep.summary
    assert s["roller_rate"] == s["bitcoin_rate"] == 0.0
    assert s["z_p_value"] == 1.0
    accs = {s[f"{name}_accuracy"] for name in ("always_zero", "majority_on_success")}
    # every outcome is (fail, fail), so all guessers say 0 and score the share of b == 0
    assert len(accs) == 1
    assert rep.passed


def test_pow_experiment_small_run_passes():
    rep = experiment_pow_indistinguishability(2000, Difficulty.from_rate(0.3, q=2), seed=9)
    assert rep.passed
    assert rep.summary["analytic_rate"] == pytest.approx(1 - (1 - 0.15) ** 2, rel=1e-6)


def test_archiving_single_draw_and_single_slot():
    rep = experiment_archiving_availability(20000, p=1, k=1, n=200, chain_length=1000, seed=3)
    expected = 1000 - 200 + (200 - 1) / 2
    sd = 200 / math.sqrt(12)  # uniform over 200 slots
    assert abs(rep.summary["mean_min_height"] - expected) < 4 * sd / math.sqrt(20000)
    assert rep.summary["discrete_min_height"] == pytest.approx(expected)
    one = experiment_archiving_availability(200, p=3, k=1, n=1, chain_length=50)
    assert {r["min_height"] for r in one.rows} == {49}
    with pytest.raises(ValueError):
        experiment_archiving_availability(10, 2, 2, 10, chain_length=10)


def test_storage_profile_rational_node_keeps_what_its_key_dictates():
    cfg = SimConfig(party_count=2, n=10, k=2, D=2**32 // 2, rounds=80, genesis_boxes=8, target_state_size=8)
    rep = experiment_storage_profile(cfg)
    s = rep.summary
    assert rep.passed
    assert s["rational_header_count"] == s["chain_header_count"]
    assert s["rational_block_count"] == s["rational_expected_block_count"]
    assert s["rational_block_count"] < s["archive_block_count"]
    assert s["measured_ratio"] > 1 and s["extrapolated_ratio"] > s["measured_ratio"]
    assert s["header_bytes"] == 136


def test_storage_profile_without_transactions_is_header_dominated():
    cfg = SimConfig(party_count=2, n=10, k=2, D=2**32 // 2, rounds=60, tx_gen_rate=0.0, genesis_boxes=4)
    s = experiment_storage_profile(cfg).summary
    assert s["mean_block_bytes"] < 8 * 136


def test_config_validation():
    for bad in (dict(k=5, n=4), dict(party_count=0), dict(q=0), dict(D=2**32 + 1),
                dict(adversary_count=4, party_count=4), dict(rng_seed=-1), dict(tx_gen_rate=-0.1)):
        with pytest.raises(ParseError):
            SimConfig(**bad)


# --------------------------------------------------------------- stats


def test_normal_sf_reference_values():
    assert stats.normal_sf(0) == 0.5
    assert stats.normal_sf(1.959963984540054) == pytest.approx(0.025, abs=1e-12)
    assert stats.normal_sf(3) == pytest.approx(0.0013498980316301, rel=1e-9)


def test_wilson_interval_reference():
    # z = 1.96, 10/100: published textbook interval
    lo, hi = stats.wilson_interval(10, 100, z=1.96)
    assert lo == pytest.approx(0.05523, abs=1e-4) and hi == pytest.approx(0.17437, abs=1e-4)
    assert stats.wilson_interval(0, 10)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        stats.wilson_interval(0, 0)


def test_two_proportion_z_reference():
    t = stats.two_proportion_z(45, 100, 55, 100)
    assert t.z == pytest.approx(-1.41421356, rel=1e-6)
    assert t.p_value == pytest.approx(0.157299, rel=1e-4)
    assert not t.rejects(0.01)
    assert stats.two_proportion_z(0, 10, 0, 20).p_value == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6))
def test_expected_min_uniform_matches_enumeration(n, draws):
    if n ** draws > 50_000:
        rng = random.Random(n * 100 + draws)
        sample = [min(rng.randrange(n) for _ in range(draws)) for _ in range(20000)]
        sd = statistics.pstdev(sample) or 1
        assert abs(statistics.fmean(sample) - stats.expected_min_uniform(n, draws)) < 5 * sd / math.sqrt(20000)
    else:
        from itertools import product

        exact = statistics.fmean(min(c) for c in product(range(n), repeat=draws))
        assert stats.expected_min_uniform(n, draws) == pytest.approx(exact)

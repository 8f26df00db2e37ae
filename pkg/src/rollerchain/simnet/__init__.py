"""Deterministic q-bounded synchronous network simulator and experiments."""
from .config import EXPERIMENTS, ParseError, Scenario, SimConfig, load_scenario, parse_scenario
from .experiments import (
    Report,
    experiment_archiving_availability,
    experiment_bootstrap_equivalence,
    experiment_network,
    experiment_pow_indistinguishability,
    experiment_storage_profile,
)
from .world import (
    HashMeter,
    InvariantViolation,
    Message,
    Transcript,
    World,
    adversary_spoof_origin,
    audit_chain,
    genesis_for,
    run_network,
)

__all__ = [
    "EXPERIMENTS", "ParseError", "Scenario", "SimConfig", "load_scenario", "parse_scenario",
    "Report", "experiment_archiving_availability", "experiment_bootstrap_equivalence",
    "experiment_network", "experiment_pow_indistinguishability", "experiment_storage_profile",
    "HashMeter", "InvariantViolation", "Message", "Transcript", "World",
    "adversary_spoof_origin", "audit_chain", "genesis_for", "run_network",
]

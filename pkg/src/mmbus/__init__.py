"""Interoperability switch for simulated mobile-money and rural-bank ledgers."""

from .canonical import CanonicalMessage, Money, PartyKind, PartyRef, make_money, parse_party, render_money, render_party
from .contracts import FeeSchedule, ServiceContract, compute_fee
from .engine import ProcessEngine, SagaState
from .harness import Simulator, load_scenario, run_scenario, verify_run, replay_journal
from .ledgers import Ledger, conservation

__version__ = "0.1.0"

__all__ = [
    "CanonicalMessage",
    "FeeSchedule",
    "Ledger",
    "Money",
    "PartyKind",
    "PartyRef",
    "ProcessEngine",
    "SagaState",
    "ServiceContract",
    "Simulator",
    "compute_fee",
    "conservation",
    "load_scenario",
    "make_money",
    "parse_party",
    "render_money",
    "render_party",
    "replay_journal",
    "run_scenario",
    "verify_run",
    "__version__",
]

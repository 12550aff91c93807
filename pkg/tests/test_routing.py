"""Routing table semantics against a brute-force oracle, plus bus dispatch basics."""
from __future__ import annotations

import random

import pytest

from conftest import ghs, mk
from mmbus.bus import (
    BusError,
    NoRoute,
    RoutingRule,
    RoutingTable,
    ServiceBus,
)
from mmbus.canonical import PartyKind, PartyRef
from mmbus.faults import FaultDirective, FaultInjector, parse_directive

INSTITUTIONS = ("MTNG", "VODAG", "ABBANK", "KUBANK")
KIND_TOKENS = ("wallet", "bank", "agent")
CMD_TYPES = ("hold.cmd", "credit.cmd", "commit.cmd", "release.cmd")


def oracle_route(rules: list[RoutingRule], msg) -> str | None:
    """Reference behavior: min (priority, insertion index) over matching rules."""
    best = None
    target = None
    for index, rule in enumerate(rules):
        if rule.matches(msg) and (best is None or (rule.priority, index) < best):
            best = (rule.priority, index)
            target = rule.target
    return target


def random_rule(rng: random.Random, rule_id: str) -> RoutingRule:
    kwargs = {}
    if rng.random() < 0.5:
        kwargs["msg_type"] = rng.choice(CMD_TYPES) if rng.random() < 0.6 else tuple(rng.sample(CMD_TYPES, 2))
    if rng.random() < 0.4:
        kwargs["party_kind"] = rng.choice(KIND_TOKENS)
    if rng.random() < 0.6:
        kwargs["party_institution"] = rng.choice(INSTITUTIONS)
    if rng.random() < 0.3:
        kwargs["amount_min"] = rng.randrange(0, 5000)
    if rng.random() < 0.3:
        kwargs["amount_max"] = rng.randrange(5000, 20000)
    return RoutingRule(rule_id, rng.randrange(1, 10), rng.choice(INSTITUTIONS), **kwargs)


def random_cmd(rng: random.Random, mid: str):
    kind = rng.choice(KIND_TOKENS)
    institution = rng.choice(INSTITUTIONS)
    identifier = str(rng.randrange(10**8, 10**12)) if kind == "wallet" else f"A{rng.randrange(1000)}"
    token = {"wallet": PartyKind.WALLET, "bank": PartyKind.BANK_ACCOUNT, "agent": PartyKind.AGENT_TILL}[kind]
    body = {
        "saga": "sg-000001",
        "party": PartyRef(token, institution, identifier),
        "amount": ghs(rng.randrange(1, 25000)),
    }
    return mk(rng.choice(CMD_TYPES), body, mid=mid, src="ENGINE", dst="bus")


def check_pairs(seed: int, tables: int, messages: int) -> int:
    """Compare table.route with the oracle over random (rule-set, message) pairs."""
    rng = random.Random(seed)
    compared = 0
    for t in range(tables):
        rules = [random_rule(rng, f"r{t}-{i}") for i in range(rng.randrange(1, 9))]
        table = RoutingTable()
        for rule in rules:
            table.add(rule)
        for m in range(messages):
            msg = random_cmd(rng, f"m-{t}-{m}")
            expected = oracle_route(rules, msg)
            if expected is None:
                with pytest.raises(NoRoute):
                    table.route(msg)
            else:
                assert table.route(msg) == expected
            compared += 1
    return compared


def test_routing_matches_oracle_eight_rules():
    assert check_pairs(seed=7, tables=25, messages=200) == 5000


def test_priority_ties_break_by_insertion_order():
    table = RoutingTable()
    table.add(RoutingRule("first", 5, "MTNG", party_institution="MTNG"))
    table.add(RoutingRule("second", 5, "VODAG", party_institution="MTNG"))
    msg = mk("hold.cmd", {"saga": "s", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(1)})
    assert table.route(msg) == "MTNG"


def test_lower_priority_wins_regardless_of_order():
    table = RoutingTable()
    table.add(RoutingRule("late", 9, "VODAG"))
    table.add(RoutingRule("early", 1, "MTNG"))
    msg = mk("hold.cmd", {"saga": "s", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(1)})
    assert table.route(msg) == "MTNG"


def test_amount_bounds_are_inclusive():
    rule = RoutingRule("r", 1, "MTNG", amount_min=100, amount_max=200)
    low = mk("hold.cmd", {"saga": "s", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(100)})
    high = mk("hold.cmd", {"saga": "s", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(200)})
    out = mk("hold.cmd", {"saga": "s", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(201)})
    assert rule.matches(low) and rule.matches(high) and not rule.matches(out)


def test_empty_table_raises_noroute():
    with pytest.raises(NoRoute):
        RoutingTable().route(mk("hold.cmd", {"saga": "s", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(1)}))


def test_duplicate_rule_id_rejected():
    table = RoutingTable()
    table.add(RoutingRule("r", 1, "MTNG"))
    with pytest.raises(BusError):
        table.add(RoutingRule("r", 2, "VODAG"))


# -- dispatch basics ----------------------------------------------------------


def make_bus(directives=(), permits=lambda target, msg_type: None):
    table = RoutingTable()
    table.add(RoutingRule("all", 1, "MTNG"))
    return ServiceBus(table, FaultInjector([parse_directive(d) for d in directives]), permits)


def hold_msg(mid="m-1"):
    return mk(
        "hold.cmd",
        {"saga": "sg-000001", "party": PartyRef(PartyKind.WALLET, "MTNG", "233240000011"), "amount": ghs(10)},
        mid=mid,
        src="ENGINE",
        dst="bus",
    )


def test_dispatch_clean_delivery():
    bus = make_bus()
    decision = bus.dispatch(hold_msg(), tick=3)
    assert len(decision.deliveries) == 1
    delivery = decision.deliveries[0]
    assert delivery.target == "MTNG"
    assert delivery.msg.destination == "MTNG"
    receipt = decision.receipts[0]
    assert receipt.outcome == "delivered"
    assert receipt.attempt == 1
    assert receipt.deliver_tick == 4


def test_dispatch_drop_then_retry_increments_attempt():
    bus = make_bus([{"msg_type": "hold.cmd", "occurrence": 1, "action": "drop"}])
    first = bus.dispatch(hold_msg(), tick=0)
    assert first.deliveries == [] and first.receipts[0].outcome == "dropped"
    second = bus.dispatch(hold_msg(), tick=5)  # engine re-emits the same command id
    assert second.receipts[0].outcome == "delivered"
    assert second.receipts[0].attempt == 2


def test_dispatch_contract_gate_refuses_unexposed_type():
    bus = make_bus(permits=lambda target, msg_type: False)
    decision = bus.dispatch(hold_msg(), tick=0)
    assert decision.deliveries == []
    assert decision.receipts[0].outcome == "refused"


def test_dispatch_duplicate_creates_two_deliveries():
    bus = make_bus([{"msg_type": "hold.cmd", "occurrence": 1, "action": "duplicate"}])
    decision = bus.dispatch(hold_msg(), tick=0)
    assert len(decision.deliveries) == 2
    assert [r.outcome for r in decision.receipts].count("duplicated") >= 1


def test_dispatch_delay_shifts_delivery_tick():
    bus = make_bus([{"msg_type": "hold.cmd", "occurrence": 1, "action": "delay", "ticks": 7}])
    decision = bus.dispatch(hold_msg(), tick=0)
    assert decision.deliveries[0].delay == 7
    assert decision.receipts[0].outcome == "delayed"
    assert decision.receipts[0].deliver_tick == 7


def test_dispatch_crash_directives_flagged():
    bus = make_bus([{"msg_type": "hold.cmd", "occurrence": 1, "action": "crash_bus"}])
    decision = bus.dispatch(hold_msg(), tick=0)
    assert decision.crash_bus is True

    bus = make_bus([{"msg_type": "hold.cmd", "occurrence": 1, "action": "crash_endpoint", "restart_after": 10}])
    decision = bus.dispatch(hold_msg(), tick=0)
    assert decision.crash_endpoint == ("MTNG", 10)

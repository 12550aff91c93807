"""Fault vocabulary for the dispatch layer.

Directives match (msg_type, occurrence) where occurrence counts
dispatches of that type from 1, or "*" for every dispatch. The first
matching directive in schedule order wins.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class FaultError(Exception):
    pass


class FaultAction(Enum):
    DROP = "drop"
    DUPLICATE = "duplicate"
    DELAY = "delay"
    CRASH_ENDPOINT = "crash_endpoint"
    CRASH_BUS = "crash_bus"


@dataclass(frozen=True)
class FaultDirective:
    msg_type: str
    occurrence: int | str
    action: FaultAction
    delay_ticks: int = 0
    restart_after: int = 0

    def __post_init__(self) -> None:
        if self.occurrence != "*":
            if not isinstance(self.occurrence, int) or self.occurrence < 1:
                raise FaultError(f"occurrence must be a positive int or '*', got {self.occurrence!r}")
        if self.action is FaultAction.DELAY and self.delay_ticks < 1:
            raise FaultError("delay requires delay_ticks >= 1")
        if self.action is FaultAction.CRASH_ENDPOINT and self.restart_after < 1:
            raise FaultError("crash_endpoint requires restart_after >= 1")


def parse_directive(obj: dict) -> FaultDirective:
    """Build a directive from its scenario JSON form."""
    try:
        action = FaultAction(obj["action"])
    except (KeyError, ValueError):
        raise FaultError(f"unknown fault action: {obj.get('action')!r}") from None
    occurrence = obj.get("occurrence", 1)
    return FaultDirective(
        msg_type=obj["msg_type"],
        occurrence=occurrence,
        action=action,
        delay_ticks=int(obj.get("ticks", 0)),
        restart_after=int(obj.get("restart_after", 0)),
    )


class FaultInjector:
    """Stateful matcher: feed each dispatch, get back the directive to apply."""

    def __init__(self, directives: list[FaultDirective]) -> None:
        self.directives = list(directives)
        self.counts: dict[str, int] = {}

    def decide(self, msg_type: str) -> FaultDirective | None:
        n = self.counts.get(msg_type, 0) + 1
        self.counts[msg_type] = n
        for d in self.directives:
            if d.msg_type != msg_type:
                continue
            if d.occurrence == "*" or d.occurrence == n:
                return d
        return None

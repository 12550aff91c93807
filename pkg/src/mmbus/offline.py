"""Store-and-forward agent: queue transactions offline, sync in order on reconnect.

Each queued item is submitted as a normal request and awaited to a
terminal state before the next item goes, so admission order is exactly
queue order; failures are recorded and do not block the rest.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .canonical import CanonicalMessage, IdGenerator, Money, PartyRef, REQUEST_TYPES


class OfflineError(Exception):
    pass


@dataclass(frozen=True)
class QueueItem:
    kind: str  # transfer.request | cashout.request | cashin.request
    source: PartyRef
    destination: PartyRef
    amount: Money
    client_ref: str
    local_tick: int  # when the agent captured it, before connectivity

    def __post_init__(self) -> None:
        if self.kind not in REQUEST_TYPES:
            raise OfflineError(f"not a queueable request: {self.kind}")


@dataclass
class SyncAgent:
    """Agent terminal that reconnects at a known tick and drains its queue FIFO."""

    agent_id: str
    channel_id: str
    queue: list[QueueItem]
    reconnect_tick: int
    ids: IdGenerator = field(init=False)
    cursor: int = 0
    awaiting_ref: str | None = None
    outcomes: list[dict] = field(default_factory=list)
    done: bool = False

    def __post_init__(self) -> None:
        self.ids = IdGenerator("ag" + self.agent_id.lower())

    def start(self, tick: int) -> list[CanonicalMessage]:
        """Announce the batch and submit the first item."""
        msg_id = self.ids.next()
        batch = CanonicalMessage(
            message_id=msg_id,
            correlation_id=msg_id,
            msg_type="sync.batch",
            source=self.channel_id,
            destination="bus",
            timestamp=tick,
            body={"agent": self.agent_id, "count": len(self.queue)},
        )
        out = [batch]
        first = self._next_request(tick)
        if first is not None:
            out.append(first)
        else:
            self.done = True
            out.append(self._report(tick))
        return out

    def on_result(self, msg: CanonicalMessage, tick: int) -> CanonicalMessage | None:
        """Record a saga.result for the awaited item; returns the next message to send."""
        if self.done or msg.body.get("client_ref") != self.awaiting_ref:
            return None
        self.outcomes.append(
            {
                "client_ref": msg.body["client_ref"],
                "saga": msg.body["saga"],
                "state": msg.body["state"],
                "reason": msg.body["reason"],
            }
        )
        self.awaiting_ref = None
        nxt = self._next_request(tick)
        if nxt is not None:
            return nxt
        self.done = True
        return self._report(tick)

    def _next_request(self, tick: int) -> CanonicalMessage | None:
        if self.cursor >= len(self.queue):
            return None
        item = self.queue[self.cursor]
        self.cursor += 1
        self.awaiting_ref = item.client_ref
        msg_id = self.ids.next()
        return CanonicalMessage(
            message_id=msg_id,
            correlation_id=msg_id,
            msg_type=item.kind,
            source=self.channel_id,
            destination="bus",
            timestamp=tick,
            body={
                "from": item.source,
                "to": item.destination,
                "amount": item.amount,
                "client_ref": item.client_ref,
            },
        )

    def _report(self, tick: int) -> CanonicalMessage:
        completed = sum(1 for o in self.outcomes if o["state"] == "COMPLETED")
        failed = len(self.outcomes) - completed
        encoded = ",".join(f"{o['client_ref']}:{o['state']}" for o in self.outcomes)
        msg_id = self.ids.next()
        return CanonicalMessage(
            message_id=msg_id,
            correlation_id=msg_id,
            msg_type="sync.report",
            source=self.channel_id,
            destination="bus",
            timestamp=tick,
            body={
                "agent": self.agent_id,
                "count": len(self.queue),
                "completed": completed,
                "failed": failed,
                "outcomes": encoded,
            },
        )

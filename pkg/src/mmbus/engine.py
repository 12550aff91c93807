"""Process engine: compensating-saga orchestration over a write-ahead journal.

Transfer flow: authorize -> hold (sender, amount+fee) -> credit
(receiver, amount) -> commit (sender, amount/fee split). A failed or
timed-out credit compensates by releasing the hold. Every state change
appends a journal record before the commands it emits are dispatched,
so a crashed engine can be rebuilt from the journal alone and re-emit
pending commands under their original ids.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .canonical import (
    REQUEST_TYPES,
    CanonicalMessage,
    IdGenerator,
    Money,
    PartyRef,
    parse_party,
    render_party,
)

RETRY_LIMIT = 3  # timeout events per command before giving up
TIMEOUT_TICKS = 5  # initial reply window
BACKOFF_FACTOR = 2


class EngineError(Exception):
    pass


class CorruptJournal(EngineError):
    pass


class IllegalTransition(EngineError):
    pass


class SagaState(Enum):
    CREATED = "CREATED"
    AUTH_PENDING = "AUTH_PENDING"
    HOLD_PENDING = "HOLD_PENDING"
    CREDIT_PENDING = "CREDIT_PENDING"
    COMMIT_PENDING = "COMMIT_PENDING"
    COMPENSATING = "COMPENSATING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


TERMINAL_STATES = frozenset({SagaState.COMPLETED, SagaState.FAILED})

# states whose outstanding command is retried forever rather than capped
_UNBOUNDED_RETRY = frozenset({SagaState.COMMIT_PENDING, SagaState.COMPENSATING})


def next_state(state: SagaState, event: dict) -> SagaState:
    """The transition table; raises IllegalTransition off the table."""
    kind = event["kind"]
    if kind in ("stale", "recovered"):
        return state
    if kind == "timeout":
        if state in _UNBOUNDED_RETRY:
            return state
        if state not in (SagaState.AUTH_PENDING, SagaState.HOLD_PENDING, SagaState.CREDIT_PENDING):
            raise IllegalTransition(f"timeout in {state.value}")
        if event["n"] < RETRY_LIMIT:
            return state
        return SagaState.COMPENSATING if state is SagaState.CREDIT_PENDING else SagaState.FAILED
    table = {
        (SagaState.CREATED, "submitted"): SagaState.AUTH_PENDING,
        (SagaState.AUTH_PENDING, "auth.ok"): SagaState.HOLD_PENDING,
        (SagaState.AUTH_PENDING, "auth.denied"): SagaState.FAILED,
        (SagaState.HOLD_PENDING, "hold.ok"): SagaState.CREDIT_PENDING,
        (SagaState.HOLD_PENDING, "hold.err"): SagaState.FAILED,
        (SagaState.CREDIT_PENDING, "credit.ok"): SagaState.COMMIT_PENDING,
        (SagaState.CREDIT_PENDING, "credit.err"): SagaState.COMPENSATING,
        (SagaState.COMMIT_PENDING, "commit.ok"): SagaState.COMPLETED,
        (SagaState.COMPENSATING, "release.ok"): SagaState.FAILED,
    }
    try:
        return table[(state, kind)]
    except KeyError:
        raise IllegalTransition(f"{kind} in {state.value}") from None


@dataclass
class Saga:
    saga_id: str
    kind: str
    client_ref: str
    reply_to: str
    request_corr: str
    source: PartyRef
    destination: PartyRef
    amount: Money
    state: SagaState = SagaState.CREATED
    fee: Money | None = None
    reason: str = ""
    outstanding_cmd: str | None = None
    outstanding_type: str | None = None
    timeouts: int = 0

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


def _money_json(m: Money) -> dict:
    return {"ccy": m.currency, "minor": m.minor_units}


def _money_from(d: dict) -> Money:
    return Money(d["ccy"], d["minor"])


class Journal:
    """Append-only NDJSON record log with gapless seq, flushed per record."""

    def __init__(self, path: str | None, start_seq: int = 0) -> None:
        self.path = path
        self.seq = start_seq
        # highest seq whose emissions all reached dispatch; only records
        # past this point can be torn by a crash
        self.settled_seq = start_seq
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def append(self, record: dict) -> None:
        self.seq += 1
        record["seq"] = self.seq
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def load_journal(path: str) -> list[dict]:
    """Read and structurally check a journal file (gapless seq from 1)."""
    records: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptJournal(f"line {lineno}: bad json: {exc}") from None
            records.append(record)
    for i, record in enumerate(records, start=1):
        for key in ("seq", "tick", "saga", "from_state", "event", "to_state", "cmds"):
            if key not in record:
                raise CorruptJournal(f"seq {record.get('seq', '?')}: missing {key}")
        if record["seq"] != i:
            raise CorruptJournal(f"gap: expected seq {i}, found {record['seq']}")
    return records


def truncate_last_record(path: str) -> None:
    """Drop the final record, as a torn tail write would."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines[:-1]:
            fh.write(line + "\n")


def fold_records(records: list[dict]) -> dict[str, Saga]:
    """Rebuild saga objects by replaying records through the transition table."""
    sagas: dict[str, Saga] = {}
    for record in records:
        saga_id = record["saga"]
        event = record["event"]
        kind = event["kind"]
        try:
            from_state = SagaState(record["from_state"])
            to_state = SagaState(record["to_state"])
        except ValueError as exc:
            raise CorruptJournal(f"seq {record['seq']}: {exc}") from None
        saga = sagas.get(saga_id)
        if saga is None:
            if kind != "submitted":
                raise CorruptJournal(f"seq {record['seq']}: {saga_id} begins with {kind}")
            saga = Saga(
                saga_id=saga_id,
                kind=event["msg_type"],
                client_ref=event["client_ref"],
                reply_to=event["reply_to"],
                request_corr=event["corr"],
                source=parse_party(event["from"]),
                destination=parse_party(event["to"]),
                amount=_money_from(event["amount"]),
            )
            sagas[saga_id] = saga
        if saga.state is not from_state:
            raise CorruptJournal(
                f"seq {record['seq']}: {saga_id} is in {saga.state.value}, record says {record['from_state']}"
            )
        try:
            expected = next_state(saga.state, event)
        except IllegalTransition as exc:
            raise CorruptJournal(f"seq {record['seq']}: {exc}") from None
        if expected is not to_state:
            raise CorruptJournal(
                f"seq {record['seq']}: {kind} in {record['from_state']} goes to {expected.value}, record says {record['to_state']}"
            )
        if kind == "auth.ok":
            saga.fee = _money_from(event["fee"])
        elif kind == "auth.denied":
            saga.reason = event["reason"]
        elif kind == "hold.err":
            saga.reason = event["reason"]
        elif kind == "credit.err":
            saga.reason = f"compensated:{event['reason']}"
        elif kind == "timeout":
            saga.timeouts = event["n"]
            if to_state is SagaState.FAILED:
                saga.reason = f"{'auth' if from_state is SagaState.AUTH_PENDING else 'hold'}_timeout"
            elif to_state is SagaState.COMPENSATING and from_state is not to_state:
                saga.reason = "compensated:credit_timeout"
        if to_state is not from_state:
            saga.timeouts = 0 if kind != "timeout" else saga.timeouts
        if kind == "timeout" and to_state is SagaState.COMPENSATING and from_state is SagaState.CREDIT_PENDING:
            saga.timeouts = 0
        if kind == "credit.err":
            saga.timeouts = 0
        saga.state = to_state
        if saga.terminal:
            saga.outstanding_cmd = None
            saga.outstanding_type = None
        elif record["cmds"]:
            saga.outstanding_cmd = record["cmds"][0]
            saga.outstanding_type = _outstanding_type_for(to_state)
    return sagas


def _outstanding_type_for(state: SagaState) -> str:
    return {
        SagaState.AUTH_PENDING: "authorize.cmd",
        SagaState.HOLD_PENDING: "hold.cmd",
        SagaState.CREDIT_PENDING: "credit.cmd",
        SagaState.COMMIT_PENDING: "commit.cmd",
        SagaState.COMPENSATING: "release.cmd",
    }[state]


class ProcessEngine:
    """Single orchestrator owning every saga transition."""

    def __init__(
        self,
        journal: Journal,
        now: Callable[[], int],
        emit: Callable[[CanonicalMessage], None],
        arm_timer: Callable[[int, str, str], None],
        msg_seq_start: int = 0,
        saga_seq_start: int = 0,
    ) -> None:
        self.journal = journal
        self.now = now
        self.emit = emit
        self.arm_timer = arm_timer
        self.ids = IdGenerator("eg", msg_seq_start)
        self.saga_ids = IdGenerator("sg", saga_seq_start)
        self.sagas: dict[str, Saga] = {}
        self.by_client_ref: dict[str, str] = {}

    # -- ingress --------------------------------------------------------

    def submit(self, msg: CanonicalMessage) -> tuple[str, bool]:
        """Start (or dedupe) a saga for a financial request; returns (saga_id, created)."""
        if msg.msg_type not in REQUEST_TYPES:
            raise EngineError(f"not a financial request: {msg.msg_type}")
        client_ref = msg.body["client_ref"]
        existing = self.by_client_ref.get(client_ref)
        if existing is not None:
            return existing, False
        saga = Saga(
            saga_id=self.saga_ids.next(),
            kind=msg.msg_type,
            client_ref=client_ref,
            reply_to=msg.source,
            request_corr=msg.correlation_id,
            source=msg.body["from"],
            destination=msg.body["to"],
            amount=msg.body["amount"],
        )
        self.sagas[saga.saga_id] = saga
        self.by_client_ref[client_ref] = saga.saga_id
        event = {
            "kind": "submitted",
            "msg_type": msg.msg_type,
            "client_ref": client_ref,
            "reply_to": saga.reply_to,
            "corr": saga.request_corr,
            "from": render_party(saga.source),
            "to": render_party(saga.destination),
            "amount": _money_json(saga.amount),
        }
        self._advance(saga, event)
        return saga.saga_id, True

    def on_reply(self, msg: CanonicalMessage) -> None:
        """Feed an auth/hold/credit/commit/release reply into its saga."""
        saga = self.sagas.get(msg.body.get("saga", ""))
        if saga is None:
            return  # reply for a saga this engine never started; drop
        cmd = msg.body.get("cmd", "")
        if saga.terminal or cmd != saga.outstanding_cmd:
            self._stale(saga, msg.message_id)
            return
        kind = msg.msg_type
        event: dict = {"kind": kind, "cmd": cmd}
        if kind == "auth.ok":
            event["fee"] = _money_json(msg.body["fee"])
        elif kind in ("auth.denied", "hold.err", "credit.err"):
            event["reason"] = msg.body["reason"]
        expected = _REPLY_FOR_STATE.get(saga.state, ())
        if kind not in expected:
            self._stale(saga, msg.message_id)
            return
        self._advance(saga, event)

    def _stale(self, saga: Saga, about: str) -> None:
        self._journal(saga, {"kind": "stale", "about": about}, saga.state, [])
        self.journal.settled_seq = self.journal.seq

    def on_timeout(self, saga_id: str, cmd_id: str) -> None:
        saga = self.sagas.get(saga_id)
        if saga is None or saga.terminal or saga.outstanding_cmd != cmd_id:
            return  # stale timer, nothing outstanding under that id
        self._advance(saga, {"kind": "timeout", "cmd": cmd_id, "n": saga.timeouts + 1})

    # -- the one transition path ----------------------------------------

    def _advance(self, saga: Saga, event: dict) -> None:
        from_state = saga.state
        to_state = next_state(from_state, event)
        kind = event["kind"]

        if kind == "auth.ok":
            saga.fee = _money_from(event["fee"])
        elif kind == "auth.denied":
            saga.reason = event["reason"]
        elif kind == "hold.err":
            saga.reason = event["reason"]
        elif kind == "credit.err":
            saga.reason = f"compensated:{event['reason']}"
        elif kind == "timeout":
            saga.timeouts = event["n"]
            if to_state is SagaState.FAILED:
                saga.reason = f"{'auth' if from_state is SagaState.AUTH_PENDING else 'hold'}_timeout"
            elif to_state is SagaState.COMPENSATING:
                saga.reason = "compensated:credit_timeout"

        emissions = self._emissions(saga, event, from_state, to_state)
        self._journal(saga, event, to_state, [m.message_id for m in emissions])
        saga.state = to_state
        if to_state is not from_state:
            if kind != "timeout" or to_state is SagaState.COMPENSATING:
                saga.timeouts = 0
        if saga.terminal:
            saga.outstanding_cmd = None
            saga.outstanding_type = None
        for m in emissions:
            if m.msg_type != "saga.result":
                saga.outstanding_cmd = m.message_id
                saga.outstanding_type = m.msg_type
        for m in emissions:
            self.emit(m)
            if m.msg_type != "saga.result":
                window = TIMEOUT_TICKS * (BACKOFF_FACTOR ** saga.timeouts)
                self.arm_timer(self.now() + window, saga.saga_id, m.message_id)
        self.journal.settled_seq = self.journal.seq

    def _emissions(self, saga: Saga, event: dict, from_state: SagaState, to_state: SagaState) -> list[CanonicalMessage]:
        kind = event["kind"]
        if kind == "timeout" and to_state is from_state:
            return [self._rebuild_outstanding(saga)]
        if kind == "recovered":
            return [self._rebuild_outstanding(saga)]
        if to_state is SagaState.AUTH_PENDING:
            return [self._cmd(saga, "authorize.cmd", {"saga": saga.saga_id, "op": saga.kind, "party": saga.source, "amount": saga.amount})]
        if to_state is SagaState.HOLD_PENDING:
            return [self._cmd(saga, "hold.cmd", {"saga": saga.saga_id, "party": saga.source, "amount": saga.amount + saga.fee})]
        if to_state is SagaState.CREDIT_PENDING:
            return [self._cmd(saga, "credit.cmd", {"saga": saga.saga_id, "party": saga.destination, "amount": saga.amount})]
        if to_state is SagaState.COMMIT_PENDING:
            return [self._cmd(saga, "commit.cmd", {"saga": saga.saga_id, "party": saga.source, "amount": saga.amount, "fee": saga.fee})]
        if to_state is SagaState.COMPENSATING:
            return [self._cmd(saga, "release.cmd", {"saga": saga.saga_id, "party": saga.source, "amount": saga.amount + saga.fee})]
        if to_state in TERMINAL_STATES:
            return [self._result(saga, to_state)]
        raise IllegalTransition(f"nothing to emit for {kind} -> {to_state.value}")

    def _cmd(self, saga: Saga, msg_type: str, body: dict) -> CanonicalMessage:
        return CanonicalMessage(
            message_id=self.ids.next(),
            correlation_id=saga.request_corr,
            msg_type=msg_type,
            source="bus",
            destination="bus",
            timestamp=self.now(),
            body=body,
        )

    def _result(self, saga: Saga, state: SagaState) -> CanonicalMessage:
        return CanonicalMessage(
            message_id=self.ids.next(),
            correlation_id=saga.request_corr,
            msg_type="saga.result",
            source="bus",
            destination=saga.reply_to,
            timestamp=self.now(),
            body={"saga": saga.saga_id, "client_ref": saga.client_ref, "state": state.value, "reason": saga.reason},
        )

    def _rebuild_outstanding(self, saga: Saga) -> CanonicalMessage:
        """The same command, same id, for retry or post-recovery re-emission."""
        assert saga.outstanding_cmd is not None and saga.outstanding_type is not None
        bodies = {
            "authorize.cmd": lambda: {"saga": saga.saga_id, "op": saga.kind, "party": saga.source, "amount": saga.amount},
            "hold.cmd": lambda: {"saga": saga.saga_id, "party": saga.source, "amount": saga.amount + saga.fee},
            "credit.cmd": lambda: {"saga": saga.saga_id, "party": saga.destination, "amount": saga.amount},
            "commit.cmd": lambda: {"saga": saga.saga_id, "party": saga.source, "amount": saga.amount, "fee": saga.fee},
            "release.cmd": lambda: {"saga": saga.saga_id, "party": saga.source, "amount": saga.amount + saga.fee},
        }
        return CanonicalMessage(
            message_id=saga.outstanding_cmd,
            correlation_id=saga.request_corr,
            msg_type=saga.outstanding_type,
            source="bus",
            destination="bus",
            timestamp=self.now(),
            body=bodies[saga.outstanding_type](),
        )

    def _journal(self, saga: Saga, event: dict, to_state: SagaState, cmds: list[str]) -> None:
        self.journal.append(
            {
                "tick": self.now(),
                "saga": saga.saga_id,
                "from_state": saga.state.value,
                "event": event,
                "to_state": to_state.value,
                "cmds": cmds,
            }
        )

    # -- recovery ---------------------------------------------------------

    @classmethod
    def recover(
        cls,
        records: list[dict],
        journal: Journal,
        now: Callable[[], int],
        emit: Callable[[CanonicalMessage], None],
        arm_timer: Callable[[int, str, str], None],
    ) -> tuple["ProcessEngine", int]:
        """Rebuild from journal records; re-emit pending commands, original ids."""
        sagas = fold_records(records)
        max_eg = 0
        max_sg = 0
        for record in records:
            for cmd in record["cmds"]:
                node, _, seq = cmd.partition("-")
                if node == "eg":
                    max_eg = max(max_eg, int(seq))
        for saga_id in sagas:
            node, _, seq = saga_id.partition("-")
            if node == "sg":
                max_sg = max(max_sg, int(seq))
        engine = cls(journal, now, emit, arm_timer, msg_seq_start=max_eg, saga_seq_start=max_sg)
        engine.sagas = sagas
        engine.by_client_ref = {s.client_ref: s.saga_id for s in sagas.values()}
        resumed = 0
        for saga_id in sorted(sagas):
            saga = sagas[saga_id]
            if saga.terminal:
                continue
            resumed += 1
            engine._advance(saga, {"kind": "recovered"})
        return engine, resumed

    # -- introspection ---------------------------------------------------

    def pending(self) -> list[str]:
        return sorted(s.saga_id for s in self.sagas.values() if not s.terminal)

    def saga_rows(self) -> list[dict]:
        rows = []
        for saga_id in sorted(self.sagas):
            s = self.sagas[saga_id]
            rows.append(
                {
                    "saga": s.saga_id,
                    "kind": s.kind,
                    "client_ref": s.client_ref,
                    "state": s.state.value,
                    "reason": s.reason,
                    "from": render_party(s.source),
                    "to": render_party(s.destination),
                    "amount": _money_json(s.amount),
                    "fee": _money_json(s.fee) if s.fee is not None else None,
                }
            )
        return rows


_REPLY_FOR_STATE = {
    SagaState.AUTH_PENDING: ("auth.ok", "auth.denied"),
    SagaState.HOLD_PENDING: ("hold.ok", "hold.err"),
    SagaState.CREDIT_PENDING: ("credit.ok", "credit.err"),
    SagaState.COMMIT_PENDING: ("commit.ok",),
    SagaState.COMPENSATING: ("release.ok",),
}

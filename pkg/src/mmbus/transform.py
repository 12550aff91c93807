"""Boundary codecs: canonical NDJSON, bank_pipe records, wallet_kv records.

from_native(to_native(msg, fmt), fmt) == msg for every validated message;
amounts are carried verbatim in minor units, never rescaled.
"""
from __future__ import annotations

import json

from .canonical import (
    BODY_SCHEMAS,
    CanonicalError,
    CanonicalMessage,
    Money,
    body_from_json,
    body_to_json,
    parse_party,
    render_party,
    validate_message,
)


class TransformError(Exception):
    pass


class UnknownFormat(TransformError):
    pass


class UnmappableField(TransformError):
    pass


class MalformedNative(TransformError):
    pass


NATIVE_FORMATS = ("canonical", "bank_pipe", "wallet_kv")

_PIPE_MAGIC = "MMB1"

_PIPE_OPCODES = {
    "transfer.request": "XFER",
    "cashout.request": "CASHOUT",
    "cashin.request": "CASHIN",
    "balance.request": "BALQ",
    "balance.reply": "BALR",
    "authorize.cmd": "AUTH",
    "auth.ok": "AUTHOK",
    "auth.denied": "AUTHNO",
    "hold.cmd": "HOLD",
    "hold.ok": "HOLDOK",
    "hold.err": "HOLDERR",
    "credit.cmd": "CREDIT",
    "credit.ok": "CREDOK",
    "credit.err": "CREDERR",
    "commit.cmd": "COMMIT",
    "commit.ok": "COMMITOK",
    "release.cmd": "RELEASE",
    "release.ok": "RELOK",
    "saga.result": "RESULT",
    "sync.batch": "SYNCB",
    "sync.report": "SYNCR",
}
_TYPE_FOR_OPCODE = {v: k for k, v in _PIPE_OPCODES.items()}

_KV_OPS = {
    "transfer.request": "transfer",
    "cashout.request": "cashout",
    "cashin.request": "cashin",
    "balance.request": "bal_q",
    "balance.reply": "bal_r",
    "authorize.cmd": "auth",
    "auth.ok": "auth_ok",
    "auth.denied": "auth_denied",
    "hold.cmd": "hold",
    "hold.ok": "hold_ok",
    "hold.err": "hold_err",
    "credit.cmd": "credit",
    "credit.ok": "credit_ok",
    "credit.err": "credit_err",
    "commit.cmd": "commit",
    "commit.ok": "commit_ok",
    "release.cmd": "release",
    "release.ok": "release_ok",
    "saga.result": "result",
    "sync.batch": "sync_batch",
    "sync.report": "sync_report",
}
_TYPE_FOR_KV_OP = {v: k for k, v in _KV_OPS.items()}


def encode_canonical(msg: CanonicalMessage) -> str:
    """One JSON line: {"v":1,"id",...,"type","src","dst","body"}."""
    obj = {
        "v": 1,
        "id": msg.message_id,
        "corr": msg.correlation_id,
        "ts": msg.timestamp,
        "type": msg.msg_type,
        "src": msg.source,
        "dst": msg.destination,
        "body": body_to_json(msg.msg_type, msg.body),
    }
    return json.dumps(obj, separators=(",", ":"))


def decode_canonical(line: str) -> CanonicalMessage:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedNative(f"bad json: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedNative("line is not an object")
    if obj.get("v") != 1:
        raise MalformedNative(f"unsupported version: {obj.get('v')!r}")
    for key in ("id", "corr", "type", "src", "dst"):
        if not isinstance(obj.get(key), str) or not obj[key]:
            raise MalformedNative(f"{key}: missing or not a string")
    body_raw = obj.get("body")
    if not isinstance(body_raw, dict):
        raise MalformedNative("body: missing or not an object")
    ts = obj.get("ts", 0)
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise MalformedNative("ts: not an integer")
    msg_type = obj["type"]
    if msg_type not in BODY_SCHEMAS:
        # keep the raw body; validation reports the unknown type
        body = dict(body_raw)
    else:
        try:
            body = body_from_json(msg_type, body_raw)
        except CanonicalError as exc:
            raise MalformedNative(str(exc)) from None
    return CanonicalMessage(
        message_id=obj["id"],
        correlation_id=obj["corr"],
        msg_type=msg_type,
        source=obj["src"],
        destination=obj["dst"],
        timestamp=ts,
        body=body,
    )


def _require_valid(msg: CanonicalMessage) -> None:
    problems = validate_message(msg)
    if problems:
        raise UnmappableField("; ".join(problems))


def _pipe_cells(msg: CanonicalMessage) -> list[str]:
    cells = [_PIPE_OPCODES[msg.msg_type]]
    for name, kind in BODY_SCHEMAS[msg.msg_type]:
        value = msg.body[name]
        if kind == "party":
            cells.append(render_party(value))
        elif kind == "money":
            cells.append(str(value.minor_units))
            cells.append(value.currency)
        else:
            cells.append(str(value))
    return cells


def to_bank_pipe(msg: CanonicalMessage) -> str:
    _require_valid(msg)
    head = [_PIPE_MAGIC, msg.message_id, msg.correlation_id, str(msg.timestamp), msg.source, msg.destination]
    return "|".join(head + _pipe_cells(msg)) + "\n"


def from_bank_pipe(text: str) -> CanonicalMessage:
    if not text.endswith("\n"):
        raise MalformedNative("record not newline-terminated")
    cells = text[:-1].split("|")
    if len(cells) < 7 or cells[0] != _PIPE_MAGIC:
        raise MalformedNative("bad record header")
    _, msg_id, corr, ts_text, src, dst, opcode = cells[:7]
    msg_type = _TYPE_FOR_OPCODE.get(opcode)
    if msg_type is None:
        raise MalformedNative(f"unknown opcode: {opcode!r}")
    try:
        ts = int(ts_text)
    except ValueError:
        raise MalformedNative(f"bad ts: {ts_text!r}") from None
    fields = cells[7:]
    body: dict = {}
    pos = 0
    try:
        for name, kind in BODY_SCHEMAS[msg_type]:
            if kind == "money":
                body[name] = Money(fields[pos + 1], int(fields[pos]))
                pos += 2
            elif kind == "party":
                body[name] = parse_party(fields[pos])
                pos += 1
            elif kind == "int":
                body[name] = int(fields[pos])
                pos += 1
            else:
                body[name] = fields[pos]
                pos += 1
    except (IndexError, ValueError, CanonicalError) as exc:
        raise MalformedNative(f"{msg_type}: {exc}") from None
    if pos != len(fields):
        raise MalformedNative(f"{msg_type}: {len(fields) - pos} trailing cells")
    return CanonicalMessage(msg_id, corr, msg_type, src, dst, ts, body)


def _kv_money_keys(name: str) -> tuple[str, str]:
    # the amount field keeps the legacy bare ccy key
    return (name, "ccy" if name == "amount" else f"{name}_ccy")


# schema field names that collide with (or are aliased by) the header keys
_KV_FIELD_KEYS = {"party": "acct", "op": "req_op"}


def _kv_key(name: str) -> str:
    return _KV_FIELD_KEYS.get(name, name)


def to_wallet_kv(msg: CanonicalMessage) -> str:
    _require_valid(msg)
    lines = [
        f"id={msg.message_id}",
        f"corr={msg.correlation_id}",
        f"ts={msg.timestamp}",
        f"src={msg.source}",
        f"dst={msg.destination}",
        f"op={_KV_OPS[msg.msg_type]}",
    ]
    for name, kind in BODY_SCHEMAS[msg.msg_type]:
        value = msg.body[name]
        if kind == "party":
            lines.append(f"{_kv_key(name)}={render_party(value)}")
        elif kind == "money":
            minor_key, ccy_key = _kv_money_keys(name)
            lines.append(f"{minor_key}={value.minor_units}")
            lines.append(f"{ccy_key}={value.currency}")
        else:
            lines.append(f"{_kv_key(name)}={value}")
    return "\n".join(lines) + "\n"


def from_wallet_kv(text: str) -> CanonicalMessage:
    if not text.endswith("\n"):
        raise MalformedNative("record not newline-terminated")
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text[:-1].split("\n"), start=1):
        if "=" not in line:
            raise MalformedNative(f"line {lineno}: no '='")
        key, value = line.split("=", 1)
        if key in pairs:
            raise MalformedNative(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    for key in ("id", "corr", "ts", "src", "dst", "op"):
        if key not in pairs:
            raise MalformedNative(f"missing header key {key!r}")
    msg_type = _TYPE_FOR_KV_OP.get(pairs["op"])
    if msg_type is None:
        raise MalformedNative(f"unknown op: {pairs['op']!r}")
    try:
        ts = int(pairs["ts"])
    except ValueError:
        raise MalformedNative(f"bad ts: {pairs['ts']!r}") from None
    consumed = {"id", "corr", "ts", "src", "dst", "op"}
    body: dict = {}
    try:
        for name, kind in BODY_SCHEMAS[msg_type]:
            if kind == "party":
                key = _kv_key(name)
                body[name] = parse_party(pairs[key])
                consumed.add(key)
            elif kind == "money":
                minor_key, ccy_key = _kv_money_keys(name)
                body[name] = Money(pairs[ccy_key], int(pairs[minor_key]))
                consumed.update((minor_key, ccy_key))
            elif kind == "int":
                key = _kv_key(name)
                body[name] = int(pairs[key])
                consumed.add(key)
            else:
                key = _kv_key(name)
                body[name] = pairs[key]
                consumed.add(key)
    except KeyError as exc:
        raise MalformedNative(f"{msg_type}: missing key {exc}") from None
    except (ValueError, CanonicalError) as exc:
        raise MalformedNative(f"{msg_type}: {exc}") from None
    extra = set(pairs) - consumed
    if extra:
        raise MalformedNative(f"{msg_type}: unexpected keys {sorted(extra)}")
    return CanonicalMessage(pairs["id"], pairs["corr"], msg_type, pairs["src"], pairs["dst"], ts, body)


def to_native(msg: CanonicalMessage, fmt: str) -> str:
    if fmt == "canonical":
        _require_valid(msg)
        return encode_canonical(msg) + "\n"
    if fmt == "bank_pipe":
        return to_bank_pipe(msg)
    if fmt == "wallet_kv":
        return to_wallet_kv(msg)
    raise UnknownFormat(fmt)


def from_native(text: str, fmt: str) -> CanonicalMessage:
    if fmt == "canonical":
        if not text.endswith("\n"):
            raise MalformedNative("record not newline-terminated")
        return decode_canonical(text[:-1])
    if fmt == "bank_pipe":
        return from_bank_pipe(text)
    if fmt == "wallet_kv":
        return from_wallet_kv(text)
    raise UnknownFormat(fmt)

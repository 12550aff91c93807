"""Store-and-forward agent: strict FIFO drain with per-item outcomes."""
from __future__ import annotations

import pytest

from conftest import bank, ghs, mk, wallet
from mmbus.offline import OfflineError, QueueItem, SyncAgent

W1 = wallet("MTNG", "233240000011")
B1 = bank("ABBANK", "ACC200")


def item(ref, amount=5000, kind="transfer.request"):
    return QueueItem(kind=kind, source=W1, destination=B1, amount=ghs(amount),
                     client_ref=ref, local_tick=0)


def result_for(agent, state="COMPLETED", reason=""):
    return mk("saga.result",
              {"saga": "sg-000001", "client_ref": agent.awaiting_ref, "state": state, "reason": reason},
              mid="eg-000099", src="bus", dst=agent.channel_id)


def test_queue_item_rejects_non_request():
    with pytest.raises(OfflineError):
        item("q1", kind="auth.ok")


def test_start_announces_batch_then_first_item():
    agent = SyncAgent("A7", "ch:agent:A7", [item("q1"), item("q2")], reconnect_tick=30)
    batch, first = agent.start(30)
    assert batch.msg_type == "sync.batch"
    assert batch.body == {"agent": "A7", "count": 2}
    assert first.msg_type == "transfer.request"
    assert first.body["client_ref"] == "q1"
    assert first.message_id.startswith("aga7-")
    assert agent.awaiting_ref == "q1" and not agent.done


def test_drain_is_strictly_sequential():
    agent = SyncAgent("A7", "ch:agent:A7", [item("q1"), item("q2"), item("q3")], reconnect_tick=30)
    agent.start(30)
    nxt = agent.on_result(result_for(agent), 31)
    assert nxt.msg_type == "transfer.request" and nxt.body["client_ref"] == "q2"
    nxt = agent.on_result(result_for(agent), 32)
    assert nxt.body["client_ref"] == "q3"
    report = agent.on_result(result_for(agent), 33)
    assert report.msg_type == "sync.report"
    assert agent.done
    assert [o["client_ref"] for o in agent.outcomes] == ["q1", "q2", "q3"]


def test_failure_recorded_and_drain_continues():
    agent = SyncAgent("A7", "ch:agent:A7", [item("q1"), item("q2")], reconnect_tick=30)
    agent.start(30)
    nxt = agent.on_result(result_for(agent, state="FAILED", reason="insufficient"), 31)
    assert nxt.body["client_ref"] == "q2"
    report = agent.on_result(result_for(agent), 32)
    assert report.body["completed"] == 1 and report.body["failed"] == 1
    assert report.body["outcomes"] == "q1:FAILED,q2:COMPLETED"


def test_stray_results_are_ignored():
    agent = SyncAgent("A7", "ch:agent:A7", [item("q1")], reconnect_tick=30)
    agent.start(30)
    stray = mk("saga.result", {"saga": "sg-000009", "client_ref": "someone-else", "state": "COMPLETED", "reason": ""},
               mid="eg-000100", src="bus", dst="ch:agent:A7")
    assert agent.on_result(stray, 31) is None
    assert agent.awaiting_ref == "q1"
    report = agent.on_result(result_for(agent), 32)
    assert report.msg_type == "sync.report"
    # anything arriving after the report is dropped too
    assert agent.on_result(result_for(agent), 33) is None


def test_empty_queue_reports_immediately():
    agent = SyncAgent("A7", "ch:agent:A7", [], reconnect_tick=30)
    batch, report = agent.start(30)
    assert batch.body["count"] == 0
    assert report.msg_type == "sync.report"
    assert report.body == {"agent": "A7", "count": 0, "completed": 0, "failed": 0, "outcomes": ""}
    assert agent.done

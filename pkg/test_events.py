import json
from datetime import timedelta

import numpy as np
import pytest

from conftest import at, login, nudge, order
from events import (
    EventIndex,
    EventKind,
    MalformedLine,
    SchemaViolation,
    between,
    merge_events,
    parse_event_log,
    read_event_log,
    save_event_log,
    write_event_log,
)


def line(ts, kind, payload, user="u1", pharmacy="p1"):
    return json.dumps({"ts": ts, "user": user, "pharmacy": pharmacy, "kind": kind, "payload": payload})


def test_empty_stream():
    assert parse_event_log([]) == []
    assert list(write_event_log([])) == []


def test_parse_sorts_by_timestamp():
    lines = [
        line("2024-01-02T00:00:00Z", "login", {"lang": "id"}),
        line("2024-01-01T00:00:00Z", "order", {"lines": [{"sku": "A", "qty": 2, "price": 10.5}]}),
    ]
    records = parse_event_log(lines)
    assert [r.kind for r in records] == [EventKind.ORDER, EventKind.LOGIN]
    assert records[0].payload.expenditure == 21.0


def test_ties_keep_input_order():
    lines = [line("2024-01-01T00:00:00Z", "login", {}, user=f"u{i}") for i in range(5)]
    assert [r.user_id for r in parse_event_log(lines)] == [f"u{i}" for i in range(5)]


def test_order_without_lines_is_a_schema_violation():
    lines = [line("2024-01-01T00:00:00Z", "login", {}), line("2024-01-01T00:00:00Z", "order", {"lines": []})]
    with pytest.raises(SchemaViolation) as e:
        parse_event_log(lines)
    assert e.value.line_no == 2
    assert "lines" in e.value.field


def test_malformed_json_reports_line():
    with pytest.raises(MalformedLine) as e:
        parse_event_log([line("2024-01-01T00:00:00Z", "login", {}), "{not json"])
    assert e.value.line_no == 2


def test_nudge_with_same_anchor_and_target():
    payload = {"decision": "d1", "anchor": "A", "target": "A"}
    with pytest.raises(SchemaViolation):
        parse_event_log([line("2024-01-01T00:00:00Z", "nudge_sent", payload)])


def test_missing_field():
    obj = {"ts": "2024-01-01T00:00:00Z", "user": "u1", "kind": "login", "payload": {}}
    with pytest.raises(SchemaViolation) as e:
        parse_event_log([json.dumps(obj)])
    assert e.value.field == "pharmacy"


def test_write_one_login():
    out = list(write_event_log([login("u1", "p1", at(0, 9), region="Bali")]))
    assert len(out) == 1
    obj = json.loads(out[0])
    assert obj == {
        "ts": "2024-01-01T09:00:00Z",
        "user": "u1",
        "pharmacy": "p1",
        "kind": "login",
        "payload": {"lang": "id", "region": "Bali", "session_seconds": 60.0},
    }


def random_records(n, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        when = at(int(rng.integers(0, 90))) + timedelta(seconds=int(rng.integers(0, 24 * 3600)))
        user, pharmacy = f"u{rng.integers(0, 20)}", f"p{rng.integers(0, 8)}"
        kind = rng.integers(0, 3)
        if kind == 0:
            records.append(login(user, pharmacy, when, seconds=float(rng.integers(0, 10000)) / 10))
        elif kind == 1:
            lines = [(f"sku{k}", int(rng.integers(1, 5)), float(rng.integers(0, 100000)) / 100) for k in rng.choice(30, size=int(rng.integers(1, 4)), replace=False)]
            records.append(order(user, pharmacy, when, lines))
        else:
            kinds = [EventKind.NUDGE_SENT, EventKind.NUDGE_OPENED, EventKind.NUDGE_CLOSED, EventKind.NUDGE_EXPIRED]
            records.append(nudge(kinds[int(rng.integers(0, 4))], user, pharmacy, when, decision=f"d{i}", anchor="A", target=f"B{i}"))
    return records


def test_round_trip_is_byte_identical():
    records = parse_event_log(write_event_log(random_records(1000)))
    first = "".join(write_event_log(records))
    again = parse_event_log(first.splitlines())
    assert again == records
    assert "".join(write_event_log(again)) == first


def test_parse_output_is_sorted():
    records = parse_event_log(write_event_log(random_records(300, seed=3)))
    stamps = [r.timestamp for r in records]
    assert stamps == sorted(stamps)


def test_save_and_read(tmp_path):
    records = merge_events(random_records(50, seed=1), random_records(50, seed=2))
    path = tmp_path / "events.jsonl"
    save_event_log(path, records)
    assert read_event_log(path) == records


def test_between_bounds():
    records = [login("u1", "p1", at(d)) for d in range(5)]
    assert len(between(records, at(1), at(3))) == 2
    assert len(between(records, at(1), at(3), closed="right")) == 2
    assert between(records, at(1), at(3), closed="right")[0].timestamp == at(2)
    assert len(between(records, end=at(3))) == 3


def test_index_lookups():
    records = [
        login("u1", "p1", at(0)),
        order("u1", "p1", at(1), [("A", 1, 30.0)]),
        order("u2", "p1", at(2), [("B", 2, 35.0)]),
        login("u3", "p2", at(3)),
        nudge(EventKind.NUDGE_SENT, "u1", "p1", at(4), decision="d7"),
    ]
    index = EventIndex(records)
    assert index.pharmacy_spend("p1", at(0), at(2)) == 30.0
    assert index.pharmacy_spend("p1", at(1), at(2), closed="right") == 70.0
    assert index.pharmacy_users("p1", at(2)) == {"u1"}
    assert index.pharmacy_users("p1", at(3)) == {"u1", "u2"}
    assert index.pharmacy_of("u3") == "p2"
    assert index.users_before(at(3)) == {"u1", "u2"}
    assert [e.kind for e in index.decision_events("d7")] == [EventKind.NUDGE_SENT]
    assert index.pharmacies_before(at(3)) == {"p1"}
    assert index.end == at(4)

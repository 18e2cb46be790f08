import json
import random

import pytest

from conftest import NS, ev, net, proc
from tracehunt.ontology import Action, NodeClass
from tracehunt.trace_store import (
    CycleError,
    LabelSet,
    ParseError,
    SchemaError,
    TelemetryIndex,
    Trace,
    UnknownChannel,
    event_to_record,
    load_trace,
    resolve_actor,
    save_trace,
    write_json,
)


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def test_roundtrip(tmp_path, small_events):
    trace = Trace(tuple(small_events), LabelSet({"e2"}, "fam", "s1"))
    p = tmp_path / "t.jsonl"
    save_trace(trace, p)
    write_json(trace.labels.to_dict(), tmp_path / "labels.json")
    write_json({"hosts": {"h1": "windows"}}, tmp_path / "hosts.json")
    loaded = load_trace(p, tmp_path / "labels.json", hosts=tmp_path / "hosts.json")
    assert len(loaded) == 3
    assert [e.uid for e in loaded.events] == ["e1", "e2", "e3"]
    assert loaded.labels == trace.labels
    assert loaded.hosts["h1"] == "windows"
    for a, b in zip(loaded.events, trace.events):
        assert event_to_record(a) == event_to_record(b)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    trace = load_trace(p)
    assert len(trace) == 0


def test_parse_error_line(tmp_path, small_events):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(event_to_record(small_events[0])) + "\n{not json\n")
    with pytest.raises(ParseError) as exc:
        load_trace(p)
    assert exc.value.line == 2


def test_schema_error_port_on_line_two(tmp_path, small_events):
    recs = [event_to_record(e) for e in small_events[:2]]
    bad = event_to_record(small_events[2])
    bad["dst"]["attr"]["dst_port"] = "99999"
    recs.insert(1, bad)
    p = tmp_path / "bad.jsonl"
    _write_lines(p, recs)
    with pytest.raises(SchemaError) as exc:
        load_trace(p)
    assert exc.value.line == 2


def test_duplicate_uid(tmp_path, small_events):
    rec = event_to_record(small_events[0])
    p = tmp_path / "dup.jsonl"
    _write_lines(p, [rec, rec])
    with pytest.raises(ParseError):
        load_trace(p)


def test_cycle_error(tmp_path):
    a, b = proc(1), proc(2)
    p = tmp_path / "cyc.jsonl"
    _write_lines(p, [event_to_record(ev("x", a, Action.INJECT, b, 5)), event_to_record(ev("y", b, Action.INJECT, a, 5))])
    with pytest.raises(CycleError):
        load_trace(p)


def test_query_window_filter_identity(small_events):
    idx = TelemetryIndex(Trace(tuple(small_events)))
    got = idx.query_window({"h1"}, (0, 10 * NS), "netflow", NodeClass.NET)
    assert [e.uid for e in got] == ["e3"]
    assert idx.query_window(set(), (0, 10 * NS), "netflow", NodeClass.NET) == []
    assert [e.uid for e in idx.query_window({"h1"}, (2 * NS, 2 * NS), "sysmon", NodeClass.FILE)] == ["e2"]
    with pytest.raises(UnknownChannel):
        idx.query_window({"h1"}, (0, 1), "nope", NodeClass.NET)
    with pytest.raises(ValueError):
        idx.query_window({"h1"}, (5, 1), "sysmon", NodeClass.NET)


def test_query_window_vs_linear_scan():
    rng = random.Random(11)
    hosts = ["h1", "h2", "h3"]
    channels = ["sysmon", "etw", "netflow"]
    events = []
    for k in range(400):
        h = rng.choice(hosts)
        src = proc(rng.randint(1, 30), host=h)
        dst = proc(1000 + k, host=h) if rng.random() < 0.5 else net(sport=1024 + k)
        action = Action.PROCESS_CREATE if dst.node_class is NodeClass.PROCESS else Action.NET_CONNECT
        events.append(ev(f"u{k:04d}", src, action, dst, rng.randint(0, 10_000), rng.choice(channels), h))
    trace = Trace(tuple(events))
    idx = TelemetryIndex(trace)
    for _ in range(1000):
        hs = set(rng.sample(hosts, rng.randint(0, 3)))
        lo = rng.randint(0, 10_000)
        hi = rng.randint(lo, 10_000)
        ch = rng.choice(channels)
        cls = rng.choice([NodeClass.PROCESS, NodeClass.NET])
        want = [
            e for e in trace.events
            if e.host_id in hs and lo <= e.t <= hi and e.channel == ch and e.dst.node_class is cls
        ]
        assert idx.query_window(hs, (lo, hi), ch, cls) == want


def test_resolve_actor():
    table = {"a": "canon", "b": "canon"}
    assert resolve_actor(table, "a") == "canon"
    assert resolve_actor(table, "z") == "z"
    assert resolve_actor(table, "a") == resolve_actor(table, "b")


def test_parent_chain_and_path_resolution():
    a, b, c = proc(1), proc(2), proc(3)
    from conftest import fnode

    f1, f2 = fnode(10, "C:\\x.txt"), fnode(11, "C:\\x.txt")
    trace = Trace((
        ev("p1", a, Action.PROCESS_CREATE, b, 1),
        ev("p2", b, Action.PROCESS_CREATE, c, 2),
        ev("w1", c, Action.FILE_WRITE, f1, 3),
        ev("w2", c, Action.FILE_WRITE, f2, 9),
    ))
    idx = TelemetryIndex(trace)
    assert idx.ancestors(c) == [b, a]
    assert idx.resolve_path("h1", "C:\\x.txt", 5).inode == 10
    assert idx.resolve_path("h1", "C:\\x.txt", 9).inode == 11
    assert idx.resolve_path("h1", "C:\\x.txt", 1) is None

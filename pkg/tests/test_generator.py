import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from conftest import proc
from tracehunt.generator import (
    GrammarError,
    Hypothesis,
    Provenance,
    RemoteGenerator,
    TransportError,
    propose_remote,
    propose_template,
)
from tracehunt.knowledge import Graphlet, NodeTemplate
from tracehunt.ontology import Action, NodeClass, ProvenanceNode

P, F, N = NodeClass.PROCESS, NodeClass.FILE, NodeClass.NET
PS = "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe"


def _net_graphlet(gid="g-net", port="443"):
    return Graphlet.build(
        gid, "T1059.001", "fam",
        [NodeTemplate(P, {"image_path": PS}), NodeTemplate(N, {"dst_port": port, "proto": "TCP"})],
        [(0, "NetConnect", 1, 0.5)],
    )


def _file_graphlet(gid):
    return Graphlet.build(
        gid, "T1105", "fam",
        [NodeTemplate(P, {}), NodeTemplate(F, {"path": "C:\\Users\\${user_sid}\\drop.bin"})],
        [(0, "FileWrite", 1)],
    )


def test_powershell_net_hypothesis():
    frontier = proc(5, PS)
    hyps = propose_template(frontier, [_net_graphlet()], None, 8, frontier_t=100)
    assert len(hyps) == 1
    h = hyps[0]
    assert h.dst.node_class is N and h.dst.attr["dst_port"] == "443"
    assert h.dst.virtual and h.action is Action.NET_CONNECT
    assert h.proposed_t == 100 + 500_000_000
    assert h.provenance is Provenance.TEMPLATE


def test_no_compatible_graphlet():
    frontier = ProvenanceNode(F, None, {"path": "C:\\x"})
    assert propose_template(frontier, [_net_graphlet()], None, 8) == []
    other_image = proc(5, "C:\\Windows\\notepad.exe")
    assert propose_template(other_image, [_net_graphlet()], None, 8) == []


def test_dedup_and_default_latency_and_substitution():
    frontier = proc(5, PS, user="S-1-5-21-7")
    hyps = propose_template(frontier, [_file_graphlet("a"), _file_graphlet("b")], None, 8, frontier_t=0)
    assert len(hyps) == 1
    assert hyps[0].dst.attr["path"] == "C:\\Users\\S-1-5-21-7\\drop.bin"
    assert hyps[0].proposed_t == 1_000_000_000
    assert hyps[0].source_graphlet == "a"


def test_k_max_and_rank_order():
    gs = [_net_graphlet(f"g{i}", str(1000 + i)) for i in range(5)]
    hyps = propose_template(proc(5, PS), gs, None, 3)
    assert [h.source_graphlet for h in hyps] == ["g0", "g1", "g2"]
    with pytest.raises(ValueError):
        propose_template(proc(5, PS), gs, None, 0)


def test_triples_come_from_inputs():
    gs = [_net_graphlet(), _file_graphlet("f")]
    licensed = {(g.nodes[s].node_class, a, g.nodes[d].node_class) for g in gs for s, a, d in g.edges}
    for h in propose_template(proc(5, PS), gs, None, 8):
        assert (h.src.node_class, h.action, h.dst.node_class) in licensed


def test_hypothesis_rejects_physical_id():
    with pytest.raises(ValueError):
        Hypothesis(proc(1), proc(2), Action.INJECT, 0, "g", 0)


class _Stub(BaseHTTPRequestHandler):
    reply = b"{}"
    seen = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        _Stub.seen.append(json.loads(body))
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(_Stub.reply)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    srv = HTTPServer(("127.0.0.1", 0), _Stub)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_port}/"
    srv.shutdown()
    srv.server_close()


def test_remote_echo_matches_template(stub_server):
    frontier = proc(5, PS)
    g = _net_graphlet()
    _Stub.reply = json.dumps(
        {"hypotheses": [{"dst_class": "Net", "attr": {"dst_port": "443", "proto": "TCP"}, "action": "NetConnect", "dt_hint_s": 0.5}]}
    ).encode()
    remote = propose_remote(frontier, [g], None, 8, stub_server, frontier_t=7)
    local = propose_template(frontier, [g], None, 8, frontier_t=7)
    assert [(h.dst, h.action, h.proposed_t, h.source_graphlet) for h in remote] == [
        (h.dst, h.action, h.proposed_t, h.source_graphlet) for h in local
    ]
    assert remote[0].provenance is Provenance.REMOTE
    assert _Stub.seen[-1]["k_max"] == 8


def test_remote_drops_unknown_action(stub_server):
    _Stub.reply = json.dumps({"hypotheses": [{"dst_class": "Net", "attr": {}, "action": "Teleport"}]}).encode()
    gen = RemoteGenerator(stub_server)
    assert gen.propose(proc(5, PS), [_net_graphlet()], None, 8, 0) == []
    assert gen.grammar_errors == 1


def test_remote_malformed_rejected_wholesale(stub_server):
    _Stub.reply = b"not json"
    gen = RemoteGenerator(stub_server)
    with pytest.raises(GrammarError):
        gen.propose(proc(5, PS), [_net_graphlet()], None, 8, 0)


def test_remote_unreachable_fallback():
    frontier = proc(5, PS)
    g = _net_graphlet()
    dead = "http://127.0.0.1:9/"
    got = propose_remote(frontier, [g], None, 8, dead, timeout_s=1.0)
    assert [h.dst for h in got] == [h.dst for h in propose_template(frontier, [g], None, 8)]
    with pytest.raises(TransportError):
        propose_remote(frontier, [g], None, 8, dead, fallback=False, timeout_s=1.0)

import itertools
import random

import numpy as np
import pytest

from tracehunt.knowledge import (
    DisconnectedError,
    EmptyInput,
    Graphlet,
    KnowledgeBase,
    NodeTemplate,
    canonical_serialize,
    cosine,
    embed,
    hop_text,
    retrieve,
    single_hop_projection,
    tokenize,
)
from tracehunt.ontology import Action, NodeClass

P, F, N = NodeClass.PROCESS, NodeClass.FILE, NodeClass.NET


def _ps_graphlet(gid="g-ps", family="fam-a"):
    nodes = [
        NodeTemplate(P, {"image_path": "C:\\Windows\\System32\\cmd.exe"}),
        NodeTemplate(P, {"image_path": "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe", "cmd_line": "-enc SQBFAFgA"}),
        NodeTemplate(N, {"dst_port": "443", "proto": "TCP"}),
    ]
    return Graphlet.build(gid, "T1059.001", family, nodes, [(0, "ProcessCreate", 1), (1, "NetConnect", 2)])


def test_single_node_serialization():
    text = canonical_serialize([NodeTemplate(F, {"path": "C:\\a.txt", "sha256": "0" * 64})], [])
    assert "File" in text and "C:" in text


def test_two_edge_powershell_sequence():
    g = _ps_graphlet()
    lines = [ln for ln in g.text.splitlines() if "ProcessCreate" in ln or "NetConnect" in ln]
    assert len(lines) == 2
    assert g.text.count("=Process") == 2 and g.text.count("=Net") == 1


def test_disconnected_raises():
    with pytest.raises(DisconnectedError):
        canonical_serialize([NodeTemplate(P, {}), NodeTemplate(F, {})], [])


def test_permutation_invariance_exhaustive():
    nodes = [
        NodeTemplate(P, {"image_path": "C:\\w.exe"}),
        NodeTemplate(P, {"image_path": "C:\\w.exe"}),
        NodeTemplate(F, {"path": "C:\\x.dll"}),
        NodeTemplate(N, {"dst_port": "80"}),
    ]
    edges = [(0, Action.PROCESS_CREATE, 1), (1, Action.FILE_WRITE, 2), (0, Action.FILE_WRITE, 2), (1, Action.NET_CONNECT, 3)]
    ref = canonical_serialize(nodes, edges)
    for perm in itertools.permutations(range(4)):
        inv = {old: new for new, old in enumerate(perm)}
        pn = [nodes[old] for old in perm]
        pe = [(inv[s], a, inv[d]) for s, a, d in edges]
        for eperm in itertools.permutations(pe):
            assert canonical_serialize(pn, list(eperm)) == ref


def test_embed_unit_norm_and_self_cosine():
    v = embed("Process image_path powershell")
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    assert cosine(v, v) == pytest.approx(1.0)
    assert np.array_equal(v, embed("Process image_path powershell"))
    with pytest.raises(EmptyInput):
        embed("   ")


def test_disjoint_tokens_near_orthogonal_on_average():
    rng = random.Random(0)
    sims = []
    for _ in range(100):
        a = " ".join("".join(rng.choice("abcdefghijklm") for _ in range(6)) for _ in range(8))
        b = " ".join("".join(rng.choice("nopqrstuvwxyz") for _ in range(6)) for _ in range(8))
        assert not set(tokenize(a)) & set(tokenize(b))
        sims.append(cosine(embed(a), embed(b)))
    assert abs(float(np.mean(sims))) <= 0.05
    assert all(-1.0 <= s <= 1.0 for s in sims)


def _random_kb(n=10, seed=3):
    rng = random.Random(seed)
    gs = []
    for i in range(n):
        img = f"C:\\bin\\tool{rng.randint(0, 99)}.exe"
        nodes = [NodeTemplate(P, {"image_path": img}), NodeTemplate(F, {"path": f"C:\\d\\f{rng.randint(0, 99)}.txt"})]
        gs.append(Graphlet.build(f"g{i:02d}", "T0000", f"fam{i % 3}", nodes, [(0, "FileWrite", 1)]))
    return KnowledgeBase(gs)


def test_retrieve_self_first():
    kb = _random_kb()
    g = kb.graphlets[4]
    res = retrieve(kb, g.whole_vec, 8)
    assert res.graphlets[0].id == g.id
    assert res.scores[0] == pytest.approx(1.0)


def test_retrieve_matches_bruteforce():
    kb = _random_kb()
    q = embed("Process FileWrite tool12 f40")
    got = [g.id for g in retrieve(kb, q, 3).graphlets]
    want = sorted(kb.graphlets, key=lambda g: (-round(float(g.whole_vec @ q), 12), g.id))[:3]
    assert got == [g.id for g in want]


def test_retrieve_excludes_family():
    kb = _random_kb()
    rng = np.random.default_rng(0)
    for _ in range(10_000 // 100):
        q = rng.normal(size=256)
        q /= np.linalg.norm(q)
        res = retrieve(kb, q, 8, exclude_family="fam1")
        assert all(g.family != "fam1" for g in res.graphlets)
    empty = retrieve(kb, q, 8, exclude_family=["fam0", "fam1", "fam2"])
    assert empty.graphlets == () and empty.underfull


def test_hop_projection():
    one = Graphlet.build("one", "T", "f", [NodeTemplate(P, {}), NodeTemplate(F, {"path": "C:\\a"})], [(0, "FileWrite", 1)])
    assert np.allclose(single_hop_projection(one, 0), one.whole_vec)
    g = _ps_graphlet()
    recomputed = embed(hop_text(P, Action.NET_CONNECT, N, g.nodes[2].attr))
    assert np.array_equal(single_hop_projection(g, 1), recomputed)
    other = Graphlet.build(
        "other", "T", "f",
        [NodeTemplate(P, {"image_path": "C:\\other.exe"}), NodeTemplate(N, {"dst_port": "443", "proto": "TCP"})],
        [(0, "NetConnect", 1)],
    )
    assert np.array_equal(single_hop_projection(other, 0), single_hop_projection(g, 1))
    with pytest.raises(IndexError):
        single_hop_projection(g, 5)


def test_kb_save_load_roundtrip(tmp_path):
    kb = KnowledgeBase([_ps_graphlet()])
    kb.save(tmp_path)
    back = KnowledgeBase.load(tmp_path)
    assert back.graphlets[0].text == kb.graphlets[0].text

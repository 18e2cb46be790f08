import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import NS, proc
from tracehunt.metrics import (
    ActorRule,
    Edge,
    PhysicsRuleSet,
    budget_exhaustion_rate,
    is_causally_eq,
    match_count,
    path_violations,
    phr,
    prf1,
    property1_check,
)
from tracehunt.ontology import Action, NodeClass, ProvenanceNode
from tracehunt.search import Hop


def E(src, dst, t, action="ProcessCreate", uid=""):
    return Edge(src, dst, action, t, uid)


def test_causal_eq_examples():
    alias = {"p:old": "p:canon", "p:new": "p:canon"}
    assert is_causally_eq(E("p:old", "q", int(0.4 * NS)), E("p:new", "q", 0), alias)
    assert not is_causally_eq(E("a", "b", int(1.2 * NS)), E("a", "b", 0))
    assert not is_causally_eq(E("a", "b", 0), E("c", "b", 0))
    assert not is_causally_eq(E("a", "b", 0, "Inject"), E("a", "b", 0))


def test_causal_eq_parent_chain_either_direction():
    parents = {"child": "parent", "parent": "grand"}
    assert is_causally_eq(E("child", "x", 0), E("grand", "x", 0), {}, parents)
    assert is_causally_eq(E("grand", "x", 0), E("child", "x", 0), {}, parents)


def test_prf1_examples():
    truth = [E("a", "b", 0), E("b", "c", 10), E("c", "d", 20), E("d", "e", 30)]
    assert prf1(truth, truth) == (1.0, 1.0, 1.0)
    assert prf1([], truth) == (1.0, 0.0, 0.0)
    inferred = [E("a", "b", 0), E("c", "d", 20), E("x", "y", 5)]
    p, r, f1 = prf1(inferred, truth)
    assert p == pytest.approx(2 / 3) and r == pytest.approx(1 / 2) and f1 == pytest.approx(4 / 7)


def test_greedy_no_double_count():
    truth = [E("a", "b", 0)]
    inferred = [E("a", "b", 0, uid="1"), E("a", "b", 100, uid="2")]
    assert match_count(inferred, truth) == 1


edge_st = st.builds(
    E,
    st.sampled_from(["a", "b", "c"]),
    st.sampled_from(["a", "b", "c"]),
    st.integers(0, 3 * NS),
    st.sampled_from(["ProcessCreate", "Inject"]),
)


@given(edge_st, edge_st)
def test_causal_eq_symmetric(x, y):
    parents = {"a": "b"}
    assert is_causally_eq(x, y, {}, parents) == is_causally_eq(y, x, {}, parents)


@given(st.lists(edge_st, max_size=6), st.lists(edge_st, max_size=6))
def test_tp_bounded(inf, truth):
    assert match_count(inf, truth) <= min(len(inf), len(truth))


def _hop(src, dst, t, action=Action.PROCESS_CREATE):
    return Hop(src, dst, action, t, True, "observed")


def test_phr_chronological():
    a, b, c = proc(1), proc(2), proc(3)
    good = [_hop(a, b, 1), _hop(b, c, 2)]
    bad = [_hop(a, b, 5), _hop(b, c, 2)]
    assert phr([good] * 9 + [bad], PhysicsRuleSet.default(), {"h1": "windows"}) == pytest.approx(0.1)
    assert phr([], PhysicsRuleSet.default(), {}) == 0.0


def test_phr_actor_rule_only_on_windows():
    user = proc(1, "C:\\Users\\u\\evil.exe", host="w", user="S-1-5-21-1001")
    lsass = proc(2, "C:\\Windows\\System32\\lsass.exe", host="w", user="S-1-5-18")
    path = [[_hop(user, lsass, 1, Action.INJECT)]]
    rules = PhysicsRuleSet.default()
    assert phr(path, rules, {"w": "windows"}) == 1.0
    rule_ids = {r.id for r in rules.actor_impossibility}
    assert rule_ids & set(path_violations(path[0], rules, {"w": "windows"}))
    assert not rule_ids & set(path_violations(path[0], rules, {"w": "posix"}))
    system = proc(3, "C:\\Windows\\System32\\services.exe", host="w", user="S-1-5-18")
    assert phr([[_hop(system, lsass, 1, Action.INJECT)]], rules, {"w": "windows"}) == 0.0


def test_phr_ontology_violation():
    a = proc(1)
    f = ProvenanceNode(NodeClass.FILE, None, {"path": "C:\\x"})
    assert phr([[_hop(a, f, 1, Action.INJECT)]], PhysicsRuleSet.default(), {}) == 1.0


def test_phr_monotone_under_rule_addition():
    a = proc(1, "C:\\tools\\x.exe")
    b = proc(2, "C:\\tools\\y.exe")
    paths = [[_hop(a, b, 1)], [_hop(b, a, 2)]]
    base = PhysicsRuleSet(True, True, ())
    extra = PhysicsRuleSet(True, True, (ActorRule("no-y", ("windows",), "ProcessCreate", {}, {"image_path": {"in": ["C:\\tools\\y.exe"]}}),))
    assert phr(paths, extra, {"h1": "windows"}) >= phr(paths, base, {"h1": "windows"})
    assert phr(paths, extra, {"h1": "windows"}) == 0.5


def test_property1_examples():
    r = property1_check([0.0] * 20, 3.0, 2.4)
    assert r.admit_above_q99_rate == 0.0 and r.holds
    assert r.bound == pytest.approx(0.024)
    r2 = property1_check([0.0] * 9 + [5.0], 3.0, 2.4)
    assert r2.admit_above_q99_rate == pytest.approx(0.1) and not r2.holds


def test_budget_exhaustion_rate():
    assert budget_exhaustion_rate([{"exhaustion": True}, {"exhaustion": False}]) == 0.5
    assert budget_exhaustion_rate([]) == 0.0

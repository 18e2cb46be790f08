from dataclasses import replace

import pytest

from tracehunt.calibration import fit_lognormal
from tracehunt.ontology import Action, NodeClass, is_dag
from tracehunt.synthbench import (
    LN_MU,
    LN_SIGMA,
    ROBUSTNESS_RATES,
    SECURITY_CHANNEL,
    ChainStep,
    NodeSpec,
    ScenarioSpec,
    SpecError,
    benign_trace,
    case_k_spec,
    generate,
    realize,
    scenario_suite,
)


def _three_hop(**kw):
    p = lambda img: NodeSpec(NodeClass.PROCESS, {"image_path": img})  # noqa: E731
    chain = (
        ChainStep(Action.PROCESS_CREATE, p("C:\\Windows\\System32\\cmd.exe"), ("sysmon",)),
        ChainStep(Action.PROCESS_CREATE, p("C:\\Windows\\System32\\rundll32.exe"), ("sysmon", "etw")),
        ChainStep(Action.NET_CONNECT, NodeSpec(NodeClass.NET, {"dst_ip": "198.51.100.4", "dst_port": "443", "proto": "TCP"}), ("netflow",)),
    )
    return ScenarioSpec("t3", "famX", p("C:\\Program Files\\Office\\winword.exe"), chain, **kw)


def test_generation_is_deterministic():
    spec = _three_hop(seed=11, benign_events=300)
    a, la = generate(spec)
    b, lb = generate(spec)
    assert a.events == b.events
    assert la == lb


def test_zero_benign_gives_chain_only():
    trace, labels = generate(_three_hop(benign_events=0))
    assert len(trace.events) == 4  # three primaries plus one ETW copy
    assert len(labels.attack_edges) == 3
    assert is_dag(trace.events)


def test_no_uid_collisions_and_dag():
    for spec in scenario_suite("pathlength", seed=0, benign_events=300)[::5]:
        sc = realize(spec)
        uids = [e.uid for e in sc.truth.events]
        assert len(uids) == len(set(uids))
        assert is_dag(sc.truth.events)
        assert sc.truth.labels.attack_edges <= set(uids)


def test_benign_latency_refit():
    trace = benign_trace(3, 120_000)
    lat = [
        (e.t - e.src.id.start_time) / 1e9 for e in trace.events
        if e.channel in ("sysmon", "auditd") and e.src.id.start_time > 0
    ]
    assert len(lat) > 40_000
    m = fit_lognormal(lat)
    assert abs(m.mu - LN_MU) <= 0.05 and abs(m.sigma - LN_SIGMA) <= 0.05


def test_robustness_preset_shape():
    specs = scenario_suite("robustness", seed=0)
    assert len(specs) == 80
    rates = sorted({s.perturbation[0][1] for s in specs})
    assert tuple(rates) == ROBUSTNESS_RATES
    assert len({s.family for s in specs}) == 20
    assert all(6 <= s.length <= 10 for s in specs)


def test_pathlength_preset():
    specs = scenario_suite("pathlength", seed=0)
    assert sorted({s.length for s in specs}) == [2, 4, 8, 12]


def test_case_k_structure():
    spec = case_k_spec()
    assert [s.action for s in spec.chain] == [Action.PROCESS_CREATE, Action.PROCESS_CREATE, Action.INJECT, Action.NET_CONNECT]
    sc = realize(spec)
    assert not any(e.channel == SECURITY_CHANNEL for e in sc.trace.events)
    assert any(e.channel == SECURITY_CHANNEL for e in sc.truth.events)
    assert sc.trace.labels == sc.truth.labels


def test_spec_errors():
    with pytest.raises(SpecError):
        _three_hop(benign_events=-1)
    with pytest.raises(SpecError):
        _three_hop(perturbation=(("wiz", 1.5),))
    with pytest.raises(SpecError):
        replace(_three_hop(), chain=())
    bad = ChainStep(Action.INJECT, NodeSpec(NodeClass.PROCESS, {}), ("sysmon",))
    with pytest.raises(SpecError):
        ScenarioSpec("x", "f", NodeSpec(NodeClass.FILE, {"path": "C:\\a"}), (bad,))
    with pytest.raises(SpecError):
        scenario_suite("nope")


def test_spec_roundtrip():
    spec = scenario_suite("small", seed=2)[7]
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError):
        ScenarioSpec.from_dict({"family": "x"})

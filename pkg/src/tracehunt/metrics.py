"""Edge-level precision/recall, path hallucination rate and the admit-rate check."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .ontology import Action, ProvenanceEvent, ProvenanceNode, action_fits, actor_key, schema_valid
from .trace_store import Trace, TelemetryIndex, resolve_actor

NS_PER_S = 1_000_000_000
TIME_TOLERANCE_NS = NS_PER_S
PPID_DEPTH = 16


@dataclass(frozen=True)
class Edge:
    src_actor: str
    dst_actor: str
    action: str
    t: int
    uid: str = ""

    @property
    def order_key(self) -> tuple:
        return (self.t, self.uid)

    @classmethod
    def from_event(cls, ev: ProvenanceEvent) -> "Edge":
        return cls(actor_key(ev.src), actor_key(ev.dst), ev.action.value, ev.t, ev.uid)

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "Edge":
        return cls(rec["src_actor"], rec["dst_actor"], rec["action"], int(rec["t"]), rec.get("event_uid") or "")


def _lineage(actor: str, alias: Mapping[str, str], parents: Mapping[str, str]) -> list[str]:
    cur = resolve_actor(alias, actor)
    out = [cur]
    while len(out) <= PPID_DEPTH:
        p = parents.get(cur)
        if p is None:
            break
        p = resolve_actor(alias, p)
        if p in out:
            break
        out.append(p)
        cur = p
    return out


def actors_equivalent(a: str, b: str, alias: Mapping[str, str], parents: Optional[Mapping[str, str]] = None) -> bool:
    """Alias-resolved equality, or one actor on the other's parent chain."""
    ra, rb = resolve_actor(alias, a), resolve_actor(alias, b)
    if ra == rb:
        return True
    if not parents:
        return False
    return rb in _lineage(a, alias, parents) or ra in _lineage(b, alias, parents)


def is_causally_eq(e: Edge, e_star: Edge, alias_table: Mapping[str, str] = {}, parents: Optional[Mapping[str, str]] = None) -> bool:
    if e.action != e_star.action:
        return False
    if abs(e.t - e_star.t) > TIME_TOLERANCE_NS:
        return False
    return actors_equivalent(e.src_actor, e_star.src_actor, alias_table, parents) and actors_equivalent(
        e.dst_actor, e_star.dst_actor, alias_table, parents
    )


def match_count(inferred: Sequence[Edge], truth: Sequence[Edge], alias_table: Mapping[str, str] = {}, parents=None) -> int:
    """Greedy one-to-one matching in (t, uid) order on both sides."""
    pool = sorted(truth, key=lambda e: e.order_key)
    used = [False] * len(pool)
    tp = 0
    for e in sorted(inferred, key=lambda e: e.order_key):
        for j, t in enumerate(pool):
            if not used[j] and is_causally_eq(e, t, alias_table, parents):
                used[j] = True
                tp += 1
                break
    return tp


def prf1(inferred: Sequence[Edge], truth: Sequence[Edge], alias_table: Mapping[str, str] = {}, parents=None) -> tuple[float, float, float]:
    tp = match_count(inferred, truth, alias_table, parents)
    p = tp / len(inferred) if inferred else 1.0
    r = tp / len(truth) if truth else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


# --- path hallucination ----------------------------------------------------


def _attr_condition(value: Any, cond: Mapping[str, Sequence[str]]) -> bool:
    if value is None:
        return False
    v = str(value)
    if "in" in cond and v not in cond["in"]:
        return False
    if "not_in" in cond and v in cond["not_in"]:
        return False
    if "basename_in" in cond:
        base = v.replace("\\", "/").rsplit("/", 1)[-1].lower()
        if base not in {b.lower() for b in cond["basename_in"]}:
            return False
    if "prefix_in" in cond and not any(v.upper().startswith(p.upper()) for p in cond["prefix_in"]):
        return False
    return True


@dataclass(frozen=True)
class ActorRule:
    id: str
    os_families: tuple
    action: str
    src: Mapping[str, Any] = field(default_factory=dict)
    dst: Mapping[str, Any] = field(default_factory=dict)

    def applies(self, os_family: Optional[str]) -> bool:
        return os_family in self.os_families

    def violated(self, src: ProvenanceNode, dst: ProvenanceNode, action: str) -> bool:
        if action != self.action:
            return False
        return all(_attr_condition(src.attr.get(k), c) for k, c in self.src.items()) and all(
            _attr_condition(dst.attr.get(k), c) for k, c in self.dst.items()
        )


@dataclass(frozen=True)
class PhysicsRuleSet:
    chronological_inversion: bool = True
    ontology_violation: bool = True
    actor_impossibility: tuple = ()

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PhysicsRuleSet":
        rules = tuple(
            ActorRule(r["id"], tuple(r["os_families"]), r["action"], r.get("src", {}), r.get("dst", {}))
            for r in raw.get("actor_impossibility", [])
        )
        return cls(bool(raw.get("chronological_inversion", True)), bool(raw.get("ontology_violation", True)), rules)

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "PhysicsRuleSet":
        if path is None:
            text = resources.files("tracehunt").joinpath("data/physics.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    @classmethod
    def default(cls) -> "PhysicsRuleSet":
        return cls.load()

    def hop_violations(self, hop, prev_t: Optional[int], os_family: Optional[str]) -> list[str]:
        out = []
        action = hop.action.value if isinstance(hop.action, Action) else str(hop.action)
        if self.chronological_inversion and prev_t is not None and hop.t < prev_t:
            out.append("chronological_inversion")
        if self.ontology_violation:
            try:
                ok = action_fits(Action(action), hop.src.node_class, hop.dst.node_class)
            except ValueError:
                ok = False
            if not ok or not schema_valid(hop.src, os_family) or not schema_valid(hop.dst, os_family):
                out.append("ontology_violation")
        for rule in self.actor_impossibility:
            if rule.applies(os_family) and rule.violated(hop.src, hop.dst, action):
                out.append(rule.id)
        return out


def _path_host(hops) -> Optional[str]:
    for h in hops:
        for n in (h.src, h.dst):
            if n.host is not None:
                return n.host
    return None


def path_violations(hops: Sequence, rules: PhysicsRuleSet, host_registry: Mapping[str, str]) -> list[str]:
    host = _path_host(hops)
    prev_t = None
    out: list[str] = []
    for h in hops:
        os_family = host_registry.get(h.src.host or host) if (h.src.host or host) else None
        out.extend(rules.hop_violations(h, prev_t, os_family))
        prev_t = h.t
    return out


def phr(paths: Iterable[Sequence], rules: PhysicsRuleSet, host_registry: Mapping[str, str]) -> float:
    """Fraction of paths (each a hop sequence) with at least one violating edge."""
    paths = list(paths)
    if not paths:
        return 0.0
    bad = sum(1 for p in paths if path_violations(p, rules, host_registry))
    return bad / len(paths)


# --- admit-rate check -------------------------------------------------------


@dataclass(frozen=True)
class Property1Report:
    admit_above_q99_rate: float
    rho_hat: float
    bound: float
    n_admitted: int

    @property
    def holds(self) -> bool:
        return self.admit_above_q99_rate <= self.bound

    def to_dict(self) -> dict[str, Any]:
        return {
            "admit_above_q99_rate": self.admit_above_q99_rate,
            "rho_hat": self.rho_hat,
            "bound": self.bound,
            "n_admitted": self.n_admitted,
            "holds": self.holds,
        }


def property1_check(admitted_costs: Sequence[float], benign_q99: float, rho_hat: float) -> Property1Report:
    n = len(admitted_costs)
    above = sum(1 for c in admitted_costs if c > benign_q99)
    rate = above / n if n else 0.0
    return Property1Report(rate, rho_hat, rho_hat * 0.01, n)


def budget_exhaustion_rate(results: Sequence[Any]) -> float:
    if not results:
        return 0.0
    return sum(1 for r in results if (r["exhaustion"] if isinstance(r, Mapping) else r.exhaustion)) / len(results)


# --- scoring a hunt -------------------------------------------------------


def truth_edges(truth: Trace, labels=None) -> list[Edge]:
    labels = labels or truth.labels
    wanted = labels.attack_edges
    return [Edge.from_event(ev) for ev in truth.events if ev.uid in wanted]


def actor_parents(trace: Trace) -> dict[str, str]:
    """Child actor -> parent actor from observed ProcessCreate events."""
    nodes: dict[tuple, ProvenanceNode] = {}
    for ev in trace.events:
        nodes.setdefault(ev.dst.key, ev.dst)
    return {actor_key(nodes[k]): actor_key(p) for k, p in TelemetryIndex(trace).parent_map().items()}


def score_result(
    result: Mapping[str, Any],
    truth: Sequence[Edge],
    alias_table: Mapping[str, str] = {},
    rules: Optional[PhysicsRuleSet] = None,
    host_registry: Mapping[str, str] = {},
    parents: Optional[Mapping[str, str]] = None,
) -> dict[str, Any]:
    """Metrics of one serialized hunt result against its truth edges."""
    from .search import Hop

    rules = rules or PhysicsRuleSet.default()
    verified = [Edge.from_record(r) for r in result["verified_layer"]]
    inferred = [Edge.from_record(r) for r in result["inferred_layer"]]
    p, r, f1 = prf1(verified + inferred, truth, alias_table, parents)
    vp, vr, _ = prf1(verified, truth, alias_table, parents)
    paths = [[Hop.from_dict(h) for h in path["hops"]] for path in result["paths"]]
    verified_only = [[h for h in hops if h.verified] for hops in paths]
    return {
        "status": result["status"],
        "exhaustion": result["exhaustion"],
        "precision": p,
        "recall": r,
        "f1": f1,
        "verified_precision": vp,
        "verified_recall": vr,
        "n_verified": len(verified),
        "n_inferred": len(inferred),
        "n_truth": len(truth),
        "n_paths": len(paths),
        "phr": phr(paths, rules, host_registry),
        "phr_verified": phr([v for v in verified_only if v], rules, host_registry),
    }


def score_hunt(res, case, rules: Optional[PhysicsRuleSet] = None) -> dict[str, Any]:
    truth_trace = case.truth
    parents = actor_parents(truth_trace)
    return score_result(
        res.to_dict(),
        truth_edges(truth_trace),
        truth_trace.alias_table,
        rules,
        truth_trace.hosts,
        parents,
    )

"""Deterministic grounding of hypotheses against surviving orthogonal telemetry."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .cost import hypothesis_text
from .generator import Hypothesis
from .knowledge import cosine, embed, hop_text
from .ontology import (
    NET_TUPLE_FIELDS,
    NodeClass,
    ProvenanceEvent,
    ProvenanceNode,
    actor_key,
)
from .trace_store import TelemetryIndex, resolve_actor

NS_PER_S = 1_000_000_000
PPID_DEPTH = 16


@dataclass(frozen=True)
class OrthogonalConfig:
    channels: tuple = ("etw", "netflow", "vmi")
    tau_net: int = 2 * NS_PER_S
    tau_proc: int = 1 * NS_PER_S
    tau_reg: int = 1 * NS_PER_S
    delta_look: int = 30 * NS_PER_S

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        for name in ("tau_net", "tau_proc", "tau_reg", "delta_look"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def bounded_evidence(self) -> bool:
        """False when no orthogonal channel is configured at all."""
        return bool(self.channels)

    def to_dict(self) -> dict[str, Any]:
        return {
            "channels": list(self.channels),
            "tau_net": self.tau_net,
            "tau_proc": self.tau_proc,
            "tau_reg": self.tau_reg,
            "delta_look": self.delta_look,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "OrthogonalConfig":
        return cls(**{k: raw[k] for k in ("channels", "tau_net", "tau_proc", "tau_reg", "delta_look") if k in raw})


@dataclass(frozen=True)
class VerifyOutcome:
    grounded: bool
    bound_node: Optional[ProvenanceNode] = None
    matched_event_uid: Optional[str] = None
    tie_count: int = 0
    bound_t: Optional[int] = None
    matched_event: Optional[ProvenanceEvent] = field(default=None, repr=False, compare=False)


UNGROUNDED = VerifyOutcome(False)


def reachable_hosts(frontier: ProvenanceNode, index: TelemetryIndex) -> frozenset:
    """Hosts of every node forward-reachable from ``frontier`` in the observed graph."""
    cache = index.reach_cache
    if frontier.key in cache:
        return cache[frontier.key]
    hosts = set(index.node_hosts.get(frontier.key, ()))
    if frontier.host is not None:
        hosts.add(frontier.host)
    seen = {frontier.key}
    queue = deque([frontier.key])
    while queue:
        k = queue.popleft()
        for ev in index.out_edges.get(k, ()):
            hosts.add(ev.host_id)
            if ev.dst.key not in seen:
                seen.add(ev.dst.key)
                queue.append(ev.dst.key)
    out = frozenset(hosts)
    cache[frontier.key] = out
    return out


def _wild_match(hyp_attr: Mapping[str, Any], observed: Mapping[str, Any], fields: Sequence[str]) -> bool:
    for f in fields:
        if f in hyp_attr and str(hyp_attr[f]) != str(observed.get(f)):
            return False
    return True


def ppid_consistent(ev: ProvenanceEvent, frontier: ProvenanceNode, index: TelemetryIndex) -> bool:
    """The event's parent chain must contain the frontier.

    Observed frontiers are compared by canonical actor id (alias-resolved).
    A virtual frontier has no id, so the event's direct parent must match
    its payload instead.
    """
    if frontier.virtual:
        return ev.src.node_class is frontier.node_class and _wild_match(
            frontier.attr, ev.src.attr, ("image_path", "user_sid")
        )
    alias = index.trace.alias_table
    want = resolve_actor(alias, actor_key(frontier))
    chain = [ev.src] + index.ancestors(ev.src, PPID_DEPTH - 1)
    return any(resolve_actor(alias, actor_key(c)) == want for c in chain)


def predicate(
    hyp: Hypothesis,
    ev: ProvenanceEvent,
    index: TelemetryIndex,
    cfg: OrthogonalConfig,
) -> bool:
    """Class-specific identifier collision between ``hyp`` and one event."""
    dst = ev.dst
    if ev.action is not hyp.action or dst.node_class is not hyp.dst.node_class or dst.id is None:
        return False
    a = hyp.dst.attr
    c = hyp.dst.node_class
    if c is NodeClass.NET:
        observed = {f: getattr(dst.id, f) for f in NET_TUPLE_FIELDS}
        return _wild_match(a, observed, NET_TUPLE_FIELDS) and abs(hyp.proposed_t - ev.t) <= cfg.tau_net
    if c is NodeClass.FILE:
        if "path" not in a:
            return False
        host = hyp.src.host or ev.host_id
        if ev.host_id != host:
            return False
        inode = index.resolve_path(ev.host_id, a["path"], max(hyp.proposed_t, ev.t))
        return inode is not None and inode == dst.id
    if c is NodeClass.PROCESS:
        if not _wild_match(a, dst.attr, ("image_path", "user_sid")):
            return False
        if "image_path" not in a:
            return False
        if abs(hyp.proposed_t - dst.id.start_time) > cfg.tau_proc:
            return False
        return ppid_consistent(ev, hyp.src, index)
    if c is NodeClass.REGISTRY:
        return "key_path" in a and a["key_path"] == dst.id.key_path and abs(hyp.proposed_t - ev.t) <= cfg.tau_reg
    return False


def ground_candidates(
    hyp: Hypothesis,
    index: TelemetryIndex,
    cfg: OrthogonalConfig,
    frontier_t: Optional[int] = None,
    origin: Optional[ProvenanceNode] = None,
    not_before: Optional[int] = None,
) -> list[ProvenanceEvent]:
    """Every orthogonal event that grounds ``hyp``, best first.

    ``frontier_t`` centres the look-around window (defaults to the proposed
    time). ``origin`` is the observed node whose reachable hosts bound the
    query, required when the frontier itself is virtual. Events earlier
    than ``not_before`` (default ``frontier_t``) are ignored; for a virtual
    frontier callers pass the time of the last observed node, since the
    frontier's own time is only a guess. Ties are broken by semantic
    distance to the hypothesis, then uid.
    """
    t_curr = hyp.proposed_t if frontier_t is None else frontier_t
    floor = t_curr if not_before is None else not_before
    if origin is None:
        origin = hyp.src
    hosts = reachable_hosts(origin, index)
    if not hosts:
        return []
    window = (min(floor, t_curr - cfg.delta_look), t_curr + cfg.delta_look)
    matches: list[ProvenanceEvent] = []
    for channel in sorted(set(cfg.channels)):
        if channel not in index.channels:
            continue
        for ev in index.query_window(hosts, window, channel, hyp.dst.node_class):
            if ev.t >= floor and predicate(hyp, ev, index, cfg):
                matches.append(ev)
    if len(matches) > 1:
        hv = embed(hypothesis_text(hyp))

        def rank(ev):
            ov = embed(hop_text(ev.src.node_class, ev.action, ev.dst.node_class, ev.dst.attr))
            return (1.0 - cosine(hv, ov), ev.uid)

        matches.sort(key=rank)
    return matches


def flow_dep(
    hyp: Hypothesis,
    index: TelemetryIndex,
    cfg: OrthogonalConfig,
    frontier_t: Optional[int] = None,
    origin: Optional[ProvenanceNode] = None,
    not_before: Optional[int] = None,
) -> VerifyOutcome:
    """Try to ground ``hyp`` in orthogonal telemetry; see ``ground_candidates``."""
    matches = ground_candidates(hyp, index, cfg, frontier_t, origin, not_before)
    if not matches:
        return UNGROUNDED
    best = matches[0]
    bound = ProvenanceNode(best.dst.node_class, best.dst.id, best.dst.attr)
    return VerifyOutcome(True, bound, best.uid, len(matches), best.t, best)

"""Cost-bounded beam search from an anchor to a disconnected target.

Each beam state carries its frontier, the hop list so far, the cumulative
deviation cost and the count of latent (unverified) hops. Observed
out-edges of the frontier are free verified expansions; generator
hypotheses are grounded by the verifier when possible and otherwise pay
their deviation cost. A successor survives only if the length-discounted
budget admits it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional

import numpy as np

from .calibration import CalibrationProfile, ConfigError, depth_bound
from .cost import INF, combine, d_sem_vec, hypothesis_text, phi_temporal
from .generator import Hypothesis, TemplateGenerator
from .knowledge import KnowledgeBase, cosine, embed, hop_text
from .ontology import Action, ProcessId, ProvenanceEvent, ProvenanceNode, actor_key, schema_valid
from .trace_store import TelemetryIndex, Trace
from .verifier import ground_candidates

log = logging.getLogger(__name__)

NEIGHBORHOOD_HOPS = 2
NEIGHBORHOOD_CAP = 32


class Status(str, Enum):
    PATHS = "PATHS"
    INSUFFICIENT_EVIDENCE = "INSUFFICIENT_EVIDENCE"


@dataclass(frozen=True)
class Hop:
    src: ProvenanceNode
    dst: ProvenanceNode
    action: Action
    t: int
    verified: bool
    via: str  # "observed" | "grounded" | "latent"
    cost: float = 0.0
    d_sem: float = 0.0
    phi: float = 0.0
    event_uid: Optional[str] = None
    graphlet_id: Optional[str] = None
    # observed identity of a virtual source, revealed when the hop grounds
    src_resolved: Optional[ProvenanceNode] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "src": self.src.to_dict(),
            "dst": self.dst.to_dict(),
            "action": self.action.value,
            "t": self.t,
            "verified": self.verified,
            "via": self.via,
            "cost": self.cost,
            "d_sem": self.d_sem,
            "phi": self.phi,
            "event_uid": self.event_uid,
            "graphlet_id": self.graphlet_id,
            "src_resolved": None if self.src_resolved is None else self.src_resolved.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw) -> "Hop":
        return cls(
            src=ProvenanceNode.from_dict(raw["src"]),
            dst=ProvenanceNode.from_dict(raw["dst"]),
            action=Action(raw["action"]),
            t=int(raw["t"]),
            verified=bool(raw["verified"]),
            via=raw["via"],
            cost=float(raw.get("cost", 0.0)),
            d_sem=float(raw.get("d_sem", 0.0)),
            phi=float(raw.get("phi", 0.0)),
            event_uid=raw.get("event_uid"),
            graphlet_id=raw.get("graphlet_id"),
            src_resolved=None if raw.get("src_resolved") is None else ProvenanceNode.from_dict(raw["src_resolved"]),
        )


@dataclass(frozen=True)
class BeamState:
    frontier: ProvenanceNode
    t: int
    hops: tuple = ()
    cost: float = 0.0
    l_lat: int = 0
    origin: Optional[ProvenanceNode] = None  # nearest observed node on the path
    start: Optional[ProvenanceNode] = None
    origin_t: int = 0  # when the path last touched observed evidence

    @property
    def nodes(self) -> list[ProvenanceNode]:
        first = self.start if self.start is not None else self.frontier
        return [first] + [h.dst for h in self.hops]

    @property
    def verified_hops(self) -> int:
        return sum(1 for h in self.hops if h.verified)

    @property
    def raw_cost(self) -> float:
        return sum(h.d_sem + h.phi for h in self.hops if not h.verified)

    @property
    def signature(self) -> tuple:
        return tuple((repr(h.dst.key), h.action.value) for h in self.hops)

    def rank_key(self, lam: float) -> tuple:
        return (self.cost / (1.0 + lam * self.l_lat), -self.verified_hops, self.signature)


def admit(cost: float, l_lat: int, profile: CalibrationProfile) -> bool:
    if cost == INF or math.isnan(cost):
        return False
    return cost <= profile.b_max * (1.0 + profile.lam * l_lat)


@dataclass
class HuntResult:
    status: Status
    paths: list
    verified_layer: list
    inferred_layer: list
    exhaustion: bool
    stats: dict
    anchor: Optional[ProvenanceNode] = None
    target: Optional[ProvenanceNode] = None
    profile_summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "exhaustion": self.exhaustion,
            "anchor": None if self.anchor is None else self.anchor.to_dict(),
            "target": None if self.target is None else self.target.to_dict(),
            "paths": [
                {"cost": p.cost, "l_lat": p.l_lat, "hops": [h.to_dict() for h in p.hops]} for p in self.paths
            ],
            "verified_layer": self.verified_layer,
            "inferred_layer": self.inferred_layer,
            "stats": dict(self.stats),
            "profile": dict(self.profile_summary),
        }


def path_edges(path: BeamState) -> list[dict[str, Any]]:
    """Edges of one path with resolved actors filled in for virtual endpoints."""
    out = []
    hops = list(path.hops)
    for i, h in enumerate(hops):
        src = h.src_resolved or h.src
        if h.src.virtual and h.src_resolved is None and i > 0:
            prev = hops[i - 1]
            src = prev.dst
        dst = h.dst
        if dst.virtual and i + 1 < len(hops) and hops[i + 1].src_resolved is not None:
            dst = hops[i + 1].src_resolved
        out.append({"hop": h, "src": src, "dst": dst})
    return out


def _edge_record(h: Hop, src: ProvenanceNode, dst: ProvenanceNode) -> dict[str, Any]:
    return {
        "src": h.src.to_dict(),
        "dst": h.dst.to_dict(),
        "src_actor": actor_key(src),
        "dst_actor": actor_key(dst),
        "src_label": h.src.label(),
        "dst_label": h.dst.label(),
        "action": h.action.value,
        "t": h.t,
        "via": h.via,
        "event_uid": h.event_uid,
    }


def stratify(paths: Iterable[BeamState]) -> tuple[list, list]:
    verified: dict[tuple, dict] = {}
    inferred: dict[tuple, dict] = {}
    for p in paths:
        for e in path_edges(p):
            h = e["hop"]
            rec = _edge_record(h, e["src"], e["dst"])
            key = (rec["src_actor"], rec["dst_actor"], h.action.value)
            if h.verified:
                verified.setdefault(key, rec)
            else:
                rec.update(tag="INVESTIGATIVE_LEAD", c_dev=h.cost, graphlet_id=h.graphlet_id, d_sem=h.d_sem, phi=h.phi)
                if key not in inferred or inferred[key]["c_dev"] > h.cost:
                    inferred[key] = rec
    order = lambda r: (r["t"], r["src_actor"], r["dst_actor"], r["action"])  # noqa: E731
    return sorted(verified.values(), key=order), sorted(inferred.values(), key=order)


def _retime(hops: tuple, bound_t: int) -> tuple:
    """Pull trailing latent hop times back so they do not postdate the evidence that grounded them."""
    out = list(hops)
    nxt = bound_t
    for i in range(len(out) - 1, -1, -1):
        if out[i].verified:
            break
        if out[i].t > nxt:
            out[i] = replace(out[i], t=nxt)
        nxt = out[i].t
    return tuple(out)


def payload_matches(virtual: ProvenanceNode, observed: ProvenanceNode) -> bool:
    """A proposed payload names ``observed`` when every proposed field agrees.

    Used only by leave-one-edge-out reconstruction, where the removed
    edge's destination is known and a latent hop may stand in for it.
    """
    if virtual.node_class is not observed.node_class or not virtual.attr:
        return False
    for k, v in virtual.attr.items():
        have = observed.attr.get(k)
        if have is None and observed.id is not None:
            have = getattr(observed.id, k, None)
        if have is None or str(have) != str(v):
            return False
    return True


def _triple(src: ProvenanceNode, action: Action, dst: ProvenanceNode) -> str:
    return hop_text(src.node_class, action, dst.node_class, dst.attr).replace("\n", " | ")


class Hunter:
    """Search engine bound to one (trace, knowledge base) pair.

    Retrieval and grounding results do not depend on cost weights or the
    budget, so they are cached and shared across calls with different
    profiles (calibration grid search relies on this).
    """

    def __init__(
        self,
        trace: Trace,
        kb: KnowledgeBase,
        profile: CalibrationProfile = CalibrationProfile(),
        generator=None,
        exclude_family=None,
        index: Optional[TelemetryIndex] = None,
    ):
        self.trace = trace
        self.kb = kb
        self.profile = profile
        self.generator = generator or TemplateGenerator()
        self.exclude_family = exclude_family
        self.index = index or TelemetryIndex(trace)
        self._retrieval: dict = {}
        self._neighborhood: dict = {}
        self._triples: dict = {}
        self._proposals: dict = {}
        self._ground: dict = {}
        self._arrival: Optional[dict] = None

    # --- helpers ---------------------------------------------------------

    def arrival_time(self, node: ProvenanceNode, before: Optional[int] = None) -> int:
        """Last time ``node`` was delivered by an event at or before ``before``.

        Falls back to the node's earliest appearance.
        """
        ins = [e.t for e in self.index.in_edges.get(node.key, ()) if before is None or e.t <= before]
        if ins:
            return max(ins) if before is not None else min(ins)
        outs = [e.t for e in self.index.out_edges.get(node.key, ())]
        if outs:
            return min(outs) if before is None else min(min(outs), before)
        return 0 if before is None else before

    def start_time(self, anchor: ProvenanceNode) -> int:
        """When the hunt clock starts: a process anchor's start, else its first appearance."""
        if isinstance(anchor.id, ProcessId):
            return anchor.id.start_time
        return self.arrival_time(anchor)

    def _os(self, node: ProvenanceNode, origin: Optional[ProvenanceNode]) -> Optional[str]:
        for n in (node, origin):
            if n is None:
                continue
            host = n.host
            if host is None:
                hosts = self.index.node_hosts.get(n.key)
                host = min(hosts) if hosts else None
            if host is not None:
                return self.trace.hosts.get(host)
        return None

    def neighborhood_text(self, state: BeamState) -> str:
        f = state.frontier
        describe = f"{f.node_class.value} " + " ".join(f'"{k}":"{v}"' for k, v in sorted(f.attr.items()))
        if f.virtual:
            recent = sorted(_triple(h.src, h.action, h.dst) for h in state.hops[-NEIGHBORHOOD_HOPS:])
            return "\n".join(recent) if recent else describe
        hit = self._neighborhood.get(f.key)
        if hit is not None:
            return hit
        lines: set[str] = set()
        seen = {f.key}
        frontier = [f.key]
        for _ in range(NEIGHBORHOOD_HOPS):
            nxt = []
            for k in frontier:
                for ev in list(self.index.out_edges.get(k, ())) + list(self.index.in_edges.get(k, ())):
                    if len(lines) >= NEIGHBORHOOD_CAP:
                        break
                    tri = self._triples.get(ev.uid)
                    if tri is None:
                        tri = self._triples[ev.uid] = _triple(ev.src, ev.action, ev.dst)
                    lines.add(tri)
                    for n in (ev.src, ev.dst):
                        if n.key not in seen:
                            seen.add(n.key)
                            nxt.append(n.key)
            frontier = nxt
        text = "\n".join(sorted(lines)) if lines else describe
        self._neighborhood[f.key] = text
        return text

    def retrieve(self, state: BeamState, k: int):
        text = self.neighborhood_text(state)
        key = (text, k)
        if key not in self._retrieval:
            self._retrieval[key] = self.kb.retrieve(embed(text), k, self.exclude_family)
        return self._retrieval[key]

    def _proposals_for(self, state: BeamState, profile: CalibrationProfile):
        retrieval = self.retrieve(state, profile.k_retrieve)
        key = (state.frontier.key, state.t, tuple(g.id for g in retrieval.graphlets), profile.k_max)
        hyps = self._proposals.get(key)
        if hyps is None:
            hyps = self.generator.propose(state.frontier, retrieval.graphlets, None, profile.k_max, state.t)
            self._proposals[key] = hyps
        return retrieval, hyps

    def _candidates(self, hyp: Hypothesis, state: BeamState, profile: CalibrationProfile) -> list[ProvenanceEvent]:
        origin = state.origin or state.frontier
        floor = state.origin_t if state.frontier.virtual else state.t
        key = (hyp.src.key, hyp.dst.key, hyp.action, hyp.proposed_t, state.t, floor, origin.key, profile.orth)
        hit = self._ground.get(key)
        if hit is None:
            hit = self._ground[key] = ground_candidates(hyp, self.index, profile.orth, state.t, origin, floor)
        return hit

    @staticmethod
    def _top1_hop(retrieval, hyp: Hypothesis) -> Optional[np.ndarray]:
        if not retrieval.graphlets:
            return None
        g = retrieval.graphlets[0]
        for want_action in (True, False):
            for ei in g.edge_order:
                s, a, d = g.edges[ei]
                if g.nodes[s].node_class is not hyp.src.node_class:
                    continue
                if want_action and (a is not hyp.action or g.nodes[d].node_class is not hyp.dst.node_class):
                    continue
                return g.hop_vecs[ei]
        return g.hop_vecs[g.edge_order[0]]

    # --- Algorithm 1 -----------------------------------------------------

    def is_goal(self, state: BeamState, target: ProvenanceNode, virtual_goal: bool = False) -> bool:
        f = state.frontier
        if f.virtual:
            return virtual_goal and state.hops != () and payload_matches(f, target)
        if not target.virtual:
            return f.key == target.key
        if f.node_class is not target.node_class:
            return False
        return all(f.attr.get(k) == v for k, v in target.attr.items())

    def expand(self, state: BeamState, profile: CalibrationProfile, stats: dict, mask: frozenset = frozenset(), budget: bool = True) -> list[BeamState]:
        stats["expansions"] += 1
        on_path = {n.key for n in state.nodes}
        succ: dict[tuple, BeamState] = {}
        dbound = depth_bound(profile) if budget else None
        if len(state.hops) + 1 > profile.max_depth:
            stats["depth_rejects"] += 1
            return []

        def offer(new: BeamState, key: tuple):
            if budget and not admit(new.cost, new.l_lat, profile):
                stats["budget_rejects"] += 1
                return
            if budget and dbound is not None and new.l_lat > dbound:
                stats["budget_rejects"] += 1
                return
            if key not in succ:
                succ[key] = new

        f = state.frontier
        observed: list[ProvenanceEvent] = []
        # Observed graph traversal is free evidence.
        if not f.virtual:
            for ev in self.index.out_edges.get(f.key, ()):
                if ev.uid in mask or ev.t < state.t or ev.dst.key in on_path:
                    continue
                observed.append(ev)
                hop = Hop(f, ev.dst, ev.action, ev.t, True, "observed", event_uid=ev.uid)
                new = replace(state, frontier=ev.dst, t=ev.t, hops=state.hops + (hop,), origin=ev.dst, origin_t=ev.t)
                offer(new, (ev.dst.key, ev.action))

        stats["generator_calls"] += 1
        retrieval, hyps = self._proposals_for(state, profile)
        os_family = self._os(f, state.origin)
        for hyp in hyps:
            if not schema_valid(hyp.dst, os_family):
                stats["schema_rejects"] += 1
                continue
            if any(ev.action is hyp.action and payload_matches(hyp.dst, ev.dst) for ev in observed):
                # an observed edge already delivers this successor
                stats["subsumed"] += 1
                continue
            stats["verifier_calls"] += 1
            matches = [ev for ev in self._candidates(hyp, state, profile) if ev.uid not in mask]
            if matches:
                ev = matches[0]
                bound = ProvenanceNode(ev.dst.node_class, ev.dst.id, ev.dst.attr)
                if bound.key in on_path:
                    continue
                resolved = ev.src if f.virtual else None
                hop = Hop(f, bound, hyp.action, ev.t, True, "grounded", event_uid=ev.uid,
                          graphlet_id=hyp.source_graphlet, src_resolved=resolved)
                new = replace(state, frontier=bound, t=ev.t, hops=_retime(state.hops, ev.t) + (hop,), origin=bound,
                              origin_t=ev.t)
                offer(new, (bound.key, hyp.action))
                continue
            if hyp.dst.key in on_path:
                continue
            dt = hyp.proposed_t - state.t
            top1 = self._top1_hop(retrieval, hyp)
            d = d_sem_vec(embed(hypothesis_text(hyp)), top1) if top1 is not None else 1.0
            phi = phi_temporal(dt, profile.lognormal)
            c = combine(d, phi, profile.weights, profile.baselines)
            top_id = retrieval.graphlets[0].id if retrieval.graphlets else None
            hop = Hop(f, hyp.dst, hyp.action, hyp.proposed_t, False, "latent", cost=c, d_sem=d, phi=phi,
                      graphlet_id=top_id)
            new = replace(state, frontier=hyp.dst, t=hyp.proposed_t, hops=state.hops + (hop,),
                          cost=state.cost + c, l_lat=state.l_lat + 1)
            offer(new, (hyp.dst.key, hyp.action))
        return list(succ.values())

    def run(self, anchor: ProvenanceNode, target: ProvenanceNode, start_t: int, profile: CalibrationProfile,
            beam_width: int, mask: frozenset = frozenset(), budget: bool = True, max_hops: Optional[int] = None,
            virtual_goal: bool = False):
        stats = {"expansions": 0, "generator_calls": 0, "verifier_calls": 0, "budget_rejects": 0,
                 "schema_rejects": 0, "depth_rejects": 0, "beam_truncated": 0, "subsumed": 0}
        beam = [BeamState(anchor, start_t, (), 0.0, 0, None if anchor.virtual else anchor, anchor, start_t)]
        finals: dict[tuple, BeamState] = {}
        while beam:
            nxt: dict[tuple, BeamState] = {}
            for state in beam:
                if self.is_goal(state, target, virtual_goal):
                    prev = finals.get(state.signature)
                    if prev is None or state.cost < prev.cost:
                        finals[state.signature] = state
                    continue
                if max_hops is not None and len(state.hops) >= max_hops:
                    continue
                for s in self.expand(state, profile, stats, mask, budget):
                    prev = nxt.get(s.signature)
                    if prev is None or s.cost < prev.cost:
                        nxt[s.signature] = s
            ranked = sorted(nxt.values(), key=lambda s: s.rank_key(profile.lam))
            stats["beam_truncated"] += max(0, len(ranked) - beam_width)
            beam = ranked[:beam_width]
        paths = sorted(finals.values(), key=lambda s: (s.cost, len(s.hops), s.signature))
        return paths, stats

    def hunt(self, anchor: ProvenanceNode, target: ProvenanceNode, profile: Optional[CalibrationProfile] = None,
             beam_width: Optional[int] = None, start_t: Optional[int] = None) -> HuntResult:
        profile = profile or self.profile
        if profile is None:
            raise ConfigError("hunt needs a calibration profile")
        w = beam_width or profile.beam_width
        if start_t is None:
            start_t = self.start_time(anchor)
        paths, stats = self.run(anchor, target, start_t, profile, w)
        verified, inferred = stratify(paths)
        status = Status.PATHS if paths else Status.INSUFFICIENT_EVIDENCE
        return HuntResult(
            status=status,
            paths=paths,
            verified_layer=verified,
            inferred_layer=inferred,
            exhaustion=(not paths) and stats["budget_rejects"] > 0,
            stats=stats,
            anchor=anchor,
            target=target,
            profile_summary={"b_max": profile.b_max, "lambda": profile.lam, "beam_width": w,
                             "depth_bound": depth_bound(profile)},
        )

    def hunt_between(self, src: ProvenanceNode, dst: ProvenanceNode, start_t: int, mask: frozenset = frozenset(),
                     budget: bool = True, profile: Optional[CalibrationProfile] = None, max_hops: Optional[int] = None,
                     virtual_goal: bool = False) -> HuntResult:
        profile = profile or self.profile
        paths, stats = self.run(src, dst, start_t, profile, profile.beam_width, mask, budget, max_hops, virtual_goal)
        verified, inferred = stratify(paths)
        return HuntResult(Status.PATHS if paths else Status.INSUFFICIENT_EVIDENCE, paths, verified, inferred,
                          (not paths) and stats["budget_rejects"] > 0, stats, src, dst)


def hunt(anchor, target, trace: Trace, kb: KnowledgeBase, profile: CalibrationProfile, beam_width: int = 6, **kw) -> HuntResult:
    return Hunter(trace, kb, profile, **kw).hunt(anchor, target, beam_width=beam_width)

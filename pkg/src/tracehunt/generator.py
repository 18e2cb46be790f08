"""Hypothesis proposers.

A hypothesis is a candidate edge from the current frontier to a virtual
node. Its type (action, destination class) is locked by a graphlet edge;
only the destination payload is generated. Physical identifiers are never
produced here; binding is the verifier's job.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Protocol, Sequence

from .knowledge import Graphlet
from .ontology import (
    Action,
    NodeClass,
    OntologyError,
    ProvenanceNode,
    action_fits,
    canonical_attr_text,
    parse_action,
    parse_class,
)

log = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
DEFAULT_DT_HINT_S = 1.0
DEFAULT_K_MAX = 8


class Provenance(str, Enum):
    TEMPLATE = "Template"
    REMOTE = "Remote"


@dataclass(frozen=True)
class Hypothesis:
    src: ProvenanceNode
    dst: ProvenanceNode
    action: Action
    proposed_t: int
    source_graphlet: str
    edge_idx: int
    provenance: Provenance = Provenance.TEMPLATE

    def __post_init__(self):
        if not self.dst.virtual:
            raise ValueError("hypothesis destination must be virtual; identifiers are bound by the verifier")
        if not action_fits(self.action, self.src.node_class, self.dst.node_class):
            raise ValueError(f"{self.action.value} cannot connect {self.src.node_class.value} to {self.dst.node_class.value}")

    @property
    def dedup_key(self) -> tuple:
        return (self.dst.node_class.value, canonical_attr_text(self.dst.attr), self.action.value)


class GeneratorPort(Protocol):
    def propose(
        self,
        frontier: ProvenanceNode,
        graphlets: Sequence[Graphlet],
        target: Optional[ProvenanceNode],
        k_max: int,
        frontier_t: int,
    ) -> list[Hypothesis]: ...


_PLACEHOLDER_RE = re.compile(r"\$\{([a-z_]+)\}")


def _context(frontier: ProvenanceNode) -> dict[str, str]:
    ctx = {k: v for k, v in frontier.attr.items() if isinstance(v, str)}
    host = frontier.host
    if host is not None:
        ctx["host"] = host
    return ctx


def _substitute(value: Any, ctx: Mapping[str, str]) -> Optional[Any]:
    if not isinstance(value, str):
        return value
    missing = False

    def repl(m):
        nonlocal missing
        if m.group(1) not in ctx:
            missing = True
            return ""
        return ctx[m.group(1)]

    out = _PLACEHOLDER_RE.sub(repl, value)
    return None if missing else out


def src_compatible(template_attr: Mapping[str, Any], frontier: ProvenanceNode) -> bool:
    """Template source fields are wildcard filters: absent matches anything."""
    for k, v in template_attr.items():
        if isinstance(v, str) and _PLACEHOLDER_RE.search(v):
            continue
        if frontier.attr.get(k) != v:
            return False
    return True


def instantiate(graphlet: Graphlet, edge_idx: int, frontier: ProvenanceNode) -> dict[str, Any]:
    _, _, d = graphlet.edges[edge_idx]
    tmpl = graphlet.nodes[d]
    ctx = _context(frontier)
    attr = {}
    for k, v in tmpl.attr.items():
        sub = _substitute(v, ctx)
        if sub is not None and sub != "":
            attr[k] = sub
    if tmpl.node_class is NodeClass.PROCESS and "user_sid" not in attr and "user_sid" in frontier.attr:
        attr["user_sid"] = frontier.attr["user_sid"]
    return attr


def dt_hint_ns(graphlet: Graphlet, edge_idx: int) -> int:
    h = graphlet.dt_hints_s[edge_idx] if edge_idx < len(graphlet.dt_hints_s) else None
    return int(round((DEFAULT_DT_HINT_S if h is None else h) * NS_PER_S))


def propose_template(
    frontier: ProvenanceNode,
    graphlets: Sequence[Graphlet],
    target: Optional[ProvenanceNode] = None,
    k_max: int = DEFAULT_K_MAX,
    frontier_t: int = 0,
) -> list[Hypothesis]:
    """Instantiate every class- and source-compatible graphlet edge.

    Ordered by graphlet retrieval rank, then canonical edge order;
    deduplicated on (destination class, payload, action); capped at k_max.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    out: list[Hypothesis] = []
    seen: set[tuple] = set()
    for g in graphlets:
        for ei in g.edge_order:
            s, action, d = g.edges[ei]
            if g.nodes[s].node_class is not frontier.node_class:
                continue
            if not src_compatible(g.nodes[s].attr, frontier):
                continue
            if not action_fits(action, frontier.node_class, g.nodes[d].node_class):
                continue
            attr = instantiate(g, ei, frontier)
            dst = ProvenanceNode(g.nodes[d].node_class, None, attr)
            hyp = Hypothesis(frontier, dst, action, frontier_t + dt_hint_ns(g, ei), g.id, ei)
            if hyp.dedup_key in seen:
                continue
            seen.add(hyp.dedup_key)
            out.append(hyp)
            if len(out) >= k_max:
                return out
    return out


class TemplateGenerator:
    def propose(self, frontier, graphlets, target, k_max, frontier_t):
        return propose_template(frontier, graphlets, target, k_max, frontier_t)


# --- remote adapter --------------------------------------------------------


class TransportError(RuntimeError):
    pass


class GrammarError(ValueError):
    pass


@dataclass
class RemoteGenerator:
    """Calls an external proposer over HTTP and re-validates every answer locally."""

    endpoint: str
    fallback: bool = True
    timeout_s: float = 10.0
    neighborhood: str = ""
    grammar_errors: int = 0
    transport_errors: int = 0
    dropped: list = field(default_factory=list)

    def request_body(self, frontier, graphlets, target, k_max) -> dict[str, Any]:
        return {
            "frontier": frontier.to_dict(),
            "neighborhood": self.neighborhood,
            "graphlets": [{"id": g.id, "text": g.text} for g in graphlets],
            "target": None if target is None else target.to_dict(),
            "k_max": k_max,
        }

    def propose(self, frontier, graphlets, target, k_max, frontier_t) -> list[Hypothesis]:
        body = json.dumps(self.request_body(frontier, graphlets, target, k_max)).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                raw = resp.read()
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            self.transport_errors += 1
            if self.fallback:
                log.warning("remote generator unreachable (%s); using templates", exc)
                return propose_template(frontier, graphlets, target, k_max, frontier_t)
            raise TransportError(str(exc)) from exc
        return self.parse_response(raw, frontier, graphlets, k_max, frontier_t)

    def parse_response(self, raw: bytes, frontier, graphlets, k_max, frontier_t) -> list[Hypothesis]:
        try:
            doc = json.loads(raw)
            items = doc["hypotheses"]
            if not isinstance(items, list):
                raise TypeError("hypotheses is not a list")
        except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
            self.grammar_errors += 1
            raise GrammarError(f"response rejected: {exc}") from exc

        # type-lock: (src class, action, dst class) must come from a provided graphlet
        locks: dict[tuple, tuple] = {}
        for g in graphlets:
            for ei in g.edge_order:
                s, a, d = g.edges[ei]
                if g.nodes[s].node_class is frontier.node_class:
                    locks.setdefault((a, g.nodes[d].node_class), (g.id, ei))

        out: list[Hypothesis] = []
        seen: set = set()
        for item in items:
            try:
                if not isinstance(item, Mapping):
                    raise GrammarError("hypothesis is not an object")
                action = parse_action(item["action"])
                dst_class = parse_class(item["dst_class"])
                attr = item.get("attr") or {}
                if not isinstance(attr, Mapping) or not all(isinstance(v, (str, list)) for v in attr.values()):
                    raise GrammarError("attr must map to strings")
                if (action, dst_class) not in locks:
                    raise GrammarError(f"{action.value}->{dst_class.value} not licensed by any retrieved graphlet")
                dt = item.get("dt_hint_s", DEFAULT_DT_HINT_S)
                if isinstance(dt, bool) or not isinstance(dt, (int, float)) or dt < 0:
                    raise GrammarError("dt_hint_s must be a non-negative number")
                gid, ei = locks[(action, dst_class)]
                hyp = Hypothesis(
                    frontier,
                    ProvenanceNode(dst_class, None, attr),
                    action,
                    frontier_t + int(round(dt * NS_PER_S)),
                    gid,
                    ei,
                    Provenance.REMOTE,
                )
            except (GrammarError, OntologyError, KeyError, ValueError, TypeError) as exc:
                self.grammar_errors += 1
                self.dropped.append(str(exc))
                continue
            if hyp.dedup_key not in seen:
                seen.add(hyp.dedup_key)
                out.append(hyp)
            if len(out) >= k_max:
                break
        return out


def propose_remote(frontier, graphlets, target, k_max, endpoint, frontier_t: int = 0, fallback: bool = True, timeout_s: float = 10.0):
    return RemoteGenerator(endpoint, fallback, timeout_s).propose(frontier, graphlets, target, k_max, frontier_t)

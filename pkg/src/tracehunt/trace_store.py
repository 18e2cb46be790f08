"""Event-stream ingestion, persistence and the indexed query surface."""

from __future__ import annotations

import bisect
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .ontology import (
    NodeClass,
    OntologyError,
    ProvenanceEvent,
    ProvenanceNode,
    is_dag,
    parse_action,
    schema_valid,
)

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class SchemaError(ValueError):
    def __init__(self, uid: str, reason: str, line: Optional[int] = None):
        where = f"line {line}, " if line is not None else ""
        super().__init__(f"{where}event {uid}: {reason}")
        self.uid = uid
        self.reason = reason
        self.line = line


class CycleError(ValueError):
    pass


class UnknownChannel(KeyError):
    pass


@dataclass(frozen=True)
class LabelSet:
    attack_edges: frozenset
    family: str = ""
    scenario_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "attack_edges", frozenset(self.attack_edges))

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario_id,
            "family": self.family,
            "attack_edges": sorted(self.attack_edges),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "LabelSet":
        return cls(frozenset(raw.get("attack_edges", ())), raw.get("family", ""), raw.get("scenario", ""))

    @classmethod
    def empty(cls) -> "LabelSet":
        return cls(frozenset())


@dataclass(frozen=True)
class Trace:
    events: tuple
    labels: LabelSet = field(default_factory=LabelSet.empty)
    alias_table: Mapping[str, str] = field(default_factory=dict)
    hosts: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.order_key)))
        hosts = dict(self.hosts)
        for ev in self.events:
            if ev.host_id not in hosts:
                hosts[ev.host_id] = _guess_os(ev)
        object.__setattr__(self, "hosts", MappingProxyType(hosts))
        object.__setattr__(self, "alias_table", MappingProxyType(dict(self.alias_table)))

    def __len__(self):
        return len(self.events)

    @property
    def channels(self) -> frozenset:
        return frozenset(e.channel for e in self.events)

    def by_uid(self) -> dict[str, ProvenanceEvent]:
        return {e.uid: e for e in self.events}

    def replace_events(self, events: Iterable[ProvenanceEvent]) -> "Trace":
        return Trace(tuple(events), self.labels, self.alias_table, self.hosts)


def _guess_os(ev: ProvenanceEvent) -> str:
    for node in (ev.src, ev.dst):
        for k in ("image_path", "path"):
            v = node.attr.get(k)
            if isinstance(v, str) and (v[1:3] == ":\\" or v.startswith("\\\\")):
                return "windows"
        if node.node_class is NodeClass.REGISTRY:
            return "windows"
    return "posix"


# --- records ---------------------------------------------------------------


def event_to_record(ev: ProvenanceEvent) -> dict[str, Any]:
    return {
        "uid": ev.uid,
        "t": ev.t,
        "host": ev.host_id,
        "channel": ev.channel,
        "action": ev.action.value,
        "src": ev.src.to_dict(),
        "dst": ev.dst.to_dict(),
    }


def event_from_record(rec: Mapping[str, Any]) -> ProvenanceEvent:
    for name in ("uid", "t", "host", "channel", "action", "src", "dst"):
        if name not in rec:
            raise OntologyError(f"missing field {name!r}")
    t = rec["t"]
    if isinstance(t, bool) or not isinstance(t, int):
        raise OntologyError("t must be integer nanoseconds")
    return ProvenanceEvent(
        uid=str(rec["uid"]),
        src=ProvenanceNode.from_dict(rec["src"]),
        dst=ProvenanceNode.from_dict(rec["dst"]),
        action=parse_action(rec["action"]),
        t=t,
        channel=str(rec["channel"]),
        host_id=str(rec["host"]),
    )


def dumps_event(ev: ProvenanceEvent) -> str:
    return json.dumps(event_to_record(ev), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dump_events(events: Iterable[ProvenanceEvent], path: PathLike) -> None:
    ordered = sorted(events, key=lambda e: e.order_key)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in ordered:
            fh.write(dumps_event(ev))
            fh.write("\n")


def write_json(obj: Any, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")


def read_json(path: PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_events(path: PathLike, hosts: Optional[Mapping[str, str]] = None) -> list[ProvenanceEvent]:
    events: list[ProvenanceEvent] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ParseError(lineno, "record is not an object")
            try:
                ev = event_from_record(rec)
            except (OntologyError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from None
            if ev.uid in seen:
                raise ParseError(lineno, f"duplicate uid {ev.uid}")
            seen.add(ev.uid)
            os_family = (hosts or {}).get(ev.host_id)
            for side, node in (("src", ev.src), ("dst", ev.dst)):
                if not schema_valid(node, os_family):
                    raise SchemaError(ev.uid, f"{side} {node.node_class.value} node violates schema", lineno)
            events.append(ev)
    return events


def load_trace(
    path: PathLike,
    labels: Union[None, PathLike, LabelSet] = None,
    aliases: Union[None, PathLike, Mapping[str, str]] = None,
    hosts: Union[None, PathLike, Mapping[str, str]] = None,
) -> Trace:
    """Load a line-delimited event file plus optional sidecar files.

    Raises ``ParseError``, ``SchemaError`` or ``CycleError``.
    """
    if isinstance(hosts, (str, Path)):
        hosts = read_json(hosts)["hosts"]
    if isinstance(aliases, (str, Path)):
        aliases = read_json(aliases)["aliases"]
    if isinstance(labels, (str, Path)):
        labels = LabelSet.from_dict(read_json(labels))
    events = load_events(path, hosts)
    if not is_dag(events):
        raise CycleError(f"{path}: temporally unrolled graph has a cycle")
    return Trace(tuple(events), labels or LabelSet.empty(), aliases or {}, hosts or {})


def save_trace(trace: Trace, path: PathLike) -> None:
    dump_events(trace.events, path)


def resolve_actor(alias_table: Mapping[str, str], key: str) -> str:
    return alias_table.get(key, key)


# --- index -----------------------------------------------------------------


class TelemetryIndex:
    """Read-only indexes over a trace.

    Primary structure is a time-sorted list per ``(channel, host, class)``
    where class is the event's destination class. Identifier indexes cover
    the per-class lookups the verifier and search need.
    """

    def __init__(self, trace: Trace):
        self.trace = trace
        self.channels = trace.channels
        buckets: dict[tuple, list] = defaultdict(list)
        self.by_five_tuple: dict[tuple, list] = defaultdict(list)
        self.by_inode: dict[tuple, list] = defaultdict(list)
        self.by_image_user: dict[tuple, list] = defaultdict(list)
        self.by_key_path: dict[str, list] = defaultdict(list)
        self.out_edges: dict[tuple, list] = defaultdict(list)
        self.in_edges: dict[tuple, list] = defaultdict(list)
        # (host, path) -> [(t, FileId)], for path->inode resolution
        self.path_obs: dict[tuple, list] = defaultdict(list)
        self.node_hosts: dict[tuple, set] = defaultdict(set)
        self.reach_cache: dict[tuple, frozenset] = {}
        for ev in trace.events:
            buckets[(ev.channel, ev.host_id, ev.dst.node_class)].append(ev)
            self.out_edges[ev.src.key].append(ev)
            self.in_edges[ev.dst.key].append(ev)
            self.node_hosts[ev.src.key].add(ev.host_id)
            self.node_hosts[ev.dst.key].add(ev.host_id)
            d = ev.dst
            if d.id is not None:
                if d.node_class is NodeClass.NET:
                    self.by_five_tuple[d.id.five_tuple()].append(ev)
                elif d.node_class is NodeClass.FILE:
                    self.by_inode[(d.id.volume_id, d.id.inode)].append(ev)
                    if "path" in d.attr:
                        self.path_obs[(ev.host_id, d.attr["path"])].append((ev.t, d.id))
                elif d.node_class is NodeClass.REGISTRY:
                    self.by_key_path[d.id.key_path].append(ev)
            if d.node_class is NodeClass.PROCESS:
                self.by_image_user[(d.attr.get("image_path"), d.attr.get("user_sid"))].append(ev)
        # events arrive sorted, so every list above is already time-ordered
        self._buckets = dict(buckets)
        self._bucket_times = {k: [e.t for e in v] for k, v in self._buckets.items()}
        self._parents: Optional[dict] = None

    def query_window(
        self,
        host_set: Iterable[str],
        window: Sequence[int],
        channel: str,
        node_class: NodeClass,
    ) -> list[ProvenanceEvent]:
        t_lo, t_hi = window
        if t_lo > t_hi:
            raise ValueError("window lower bound exceeds upper bound")
        if channel not in self.channels:
            raise UnknownChannel(channel)
        out: list[ProvenanceEvent] = []
        for host in sorted(set(host_set)):
            key = (channel, host, node_class)
            evs = self._buckets.get(key)
            if not evs:
                continue
            times = self._bucket_times[key]
            lo = bisect.bisect_left(times, t_lo)
            hi = bisect.bisect_right(times, t_hi)
            out.extend(evs[lo:hi])
        out.sort(key=lambda e: e.order_key)
        return out

    def resolve_path(self, host: str, path: str, t: int):
        """Latest inode observed for ``path`` on ``host`` at or before ``t``."""
        obs = self.path_obs.get((host, path))
        if not obs:
            return None
        i = bisect.bisect_right(obs, t, key=lambda o: o[0])
        return obs[i - 1][1] if i else None

    def parent_map(self) -> dict[tuple, ProvenanceNode]:
        """Process key -> observed parent process (first ProcessCreate seen)."""
        if self._parents is None:
            parents: dict[tuple, ProvenanceNode] = {}
            for ev in self.trace.events:
                if ev.action.value == "ProcessCreate" and ev.src.node_class is NodeClass.PROCESS:
                    parents.setdefault(ev.dst.key, ev.src)
            self._parents = parents
        return self._parents

    def ancestors(self, node: ProvenanceNode, depth: int = 16) -> list[ProvenanceNode]:
        parents = self.parent_map()
        chain: list[ProvenanceNode] = []
        cur = node
        seen = {node.key}
        while len(chain) < depth:
            p = parents.get(cur.key)
            if p is None or p.key in seen:
                break
            chain.append(p)
            seen.add(p.key)
            cur = p
        return chain

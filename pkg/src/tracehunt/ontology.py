"""Typed node/edge model for provenance traces.

Observed nodes carry a physical identifier; virtual (hypothesised) nodes
carry only a semantic payload. Equality follows that split: observed nodes
compare on ``(class, id)``, virtual nodes on ``(class, canonical attr)``.
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from graphlib import CycleError as _GraphlibCycleError
from graphlib import TopologicalSorter
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional, Union


class NodeClass(str, Enum):
    PROCESS = "Process"
    FILE = "File"
    NET = "Net"
    REGISTRY = "Registry"


class Action(str, Enum):
    PROCESS_CREATE = "ProcessCreate"
    FILE_WRITE = "FileWrite"
    FILE_READ = "FileRead"
    FILE_MAP = "FileMap"
    NET_CONNECT = "NetConnect"
    NET_ACCEPT = "NetAccept"
    REGISTRY_SET = "RegistrySet"
    REGISTRY_DELETE = "RegistryDelete"
    INJECT = "Inject"


class OntologyError(ValueError):
    pass


def parse_action(raw: str) -> Action:
    try:
        return Action(raw)
    except ValueError:
        raise OntologyError(f"unknown action {raw!r}") from None


def parse_class(raw: str) -> NodeClass:
    try:
        return NodeClass(raw)
    except ValueError:
        raise OntologyError(f"unknown node class {raw!r}") from None


# --- physical identifiers -------------------------------------------------
# Constructors coerce but do not bound-check; bounds belong to schema_valid,
# which must stay total over malformed input.


@dataclass(frozen=True)
class ProcessId:
    pid: int
    tid: int
    start_time: int
    host_id: str

    node_class = NodeClass.PROCESS


@dataclass(frozen=True)
class FileId:
    inode: int
    volume_id: str

    node_class = NodeClass.FILE


@dataclass(frozen=True)
class NetId:
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: str

    node_class = NodeClass.NET

    def five_tuple(self) -> tuple:
        return (self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto)


@dataclass(frozen=True)
class RegistryId:
    key_path: str

    node_class = NodeClass.REGISTRY


PhysicalId = Union[ProcessId, FileId, NetId, RegistryId]

_ID_TYPES = {
    NodeClass.PROCESS: ProcessId,
    NodeClass.FILE: FileId,
    NodeClass.NET: NetId,
    NodeClass.REGISTRY: RegistryId,
}

_INT_FIELDS = {"pid", "tid", "start_time", "inode", "src_port", "dst_port"}

NET_TUPLE_FIELDS = ("src_ip", "src_port", "dst_ip", "dst_port", "proto")

ATTR_VOCAB: dict[NodeClass, frozenset[str]] = {
    NodeClass.PROCESS: frozenset({"image_path", "cmd_line", "user_sid"}),
    NodeClass.FILE: frozenset({"path", "sha256"}),
    # Net payloads may restate 5-tuple fields (wildcard-matched by the
    # verifier) next to parsed L7 metadata, which lives under "l7_" keys.
    NodeClass.NET: frozenset(NET_TUPLE_FIELDS),
    NodeClass.REGISTRY: frozenset({"key_path", "values"}),
}


def id_from_dict(node_class: NodeClass, raw: Mapping[str, Any]) -> PhysicalId:
    cls = _ID_TYPES[node_class]
    names = list(cls.__dataclass_fields__)
    missing = [n for n in names if n not in raw]
    if missing:
        raise OntologyError(f"{node_class.value} id missing fields {missing}")
    extra = sorted(set(raw) - set(names))
    if extra:
        raise OntologyError(f"{node_class.value} id has unknown fields {extra}")
    values = {}
    for name in names:
        v = raw[name]
        if name in _INT_FIELDS:
            if isinstance(v, bool) or not isinstance(v, (int, str)):
                raise OntologyError(f"{name} must be an integer")
            try:
                v = int(v)
            except ValueError:
                raise OntologyError(f"{name} must be an integer") from None
        else:
            v = str(v)
        values[name] = v
    return cls(**values)


def id_to_dict(pid: PhysicalId) -> dict[str, Any]:
    return {name: getattr(pid, name) for name in pid.__dataclass_fields__}


def _freeze_attr(attr: Mapping[str, Any]) -> Mapping[str, Union[str, tuple]]:
    out = {}
    for k in sorted(attr):
        v = attr[k]
        if isinstance(v, (list, tuple)):
            out[str(k)] = tuple(str(x) for x in v)
        else:
            out[str(k)] = str(v)
    return MappingProxyType(out)


def canonical_attr_text(attr: Mapping[str, Any]) -> str:
    plain = {k: list(v) if isinstance(v, tuple) else v for k, v in attr.items()}
    return json.dumps(plain, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True, eq=False)
class ProvenanceNode:
    node_class: NodeClass
    id: Optional[PhysicalId] = None
    attr: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.node_class, NodeClass):
            object.__setattr__(self, "node_class", parse_class(self.node_class))
        if self.id is not None and type(self.id) is not _ID_TYPES[self.node_class]:
            raise TypeError(
                f"{type(self.id).__name__} is not an identifier for {self.node_class.value}"
            )
        object.__setattr__(self, "attr", _freeze_attr(self.attr))

    @property
    def virtual(self) -> bool:
        return self.id is None

    @property
    def key(self) -> tuple:
        if self.id is None:
            return (self.node_class.value, "~", canonical_attr_text(self.attr))
        return (self.node_class.value, "#", self.id)

    def __eq__(self, other):
        if not isinstance(other, ProvenanceNode):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        if self.id is None:
            return f"<{self.node_class.value}~{canonical_attr_text(self.attr)}>"
        return f"<{self.node_class.value}#{id_to_dict(self.id)}>"

    @property
    def host(self) -> Optional[str]:
        return self.id.host_id if isinstance(self.id, ProcessId) else None

    def label(self) -> str:
        """Short human-readable name used in reports."""
        a = self.attr
        for k in ("image_path", "path", "key_path"):
            if k in a:
                return str(a[k]).replace("\\", "/").rsplit("/", 1)[-1] or str(a[k])
        if isinstance(self.id, NetId):
            return f"{self.id.dst_ip}:{self.id.dst_port}/{self.id.proto}"
        if isinstance(self.id, RegistryId):
            return self.id.key_path
        if "dst_port" in a:
            return f"{a.get('dst_ip', '*')}:{a['dst_port']}/{a.get('proto', '*')}"
        return self.node_class.value

    def to_dict(self) -> dict[str, Any]:
        return {
            "class": self.node_class.value,
            "id": None if self.id is None else id_to_dict(self.id),
            "attr": {k: list(v) if isinstance(v, tuple) else v for k, v in self.attr.items()},
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ProvenanceNode":
        if not isinstance(raw, Mapping):
            raise OntologyError("node must be an object")
        node_class = parse_class(raw.get("class", ""))
        rid = raw.get("id")
        pid = None if rid is None else id_from_dict(node_class, rid)
        attr = raw.get("attr") or {}
        if not isinstance(attr, Mapping):
            raise OntologyError("attr must be an object")
        return cls(node_class, pid, attr)

    def with_id(self, pid: PhysicalId) -> "ProvenanceNode":
        return ProvenanceNode(self.node_class, pid, self.attr)


def actor_key(node: ProvenanceNode) -> str:
    """Stable string key for alias tables and metrics."""
    if node.id is None:
        return f"{node.node_class.value}~{canonical_attr_text(node.attr)}"
    parts = ":".join(str(v) for v in id_to_dict(node.id).values())
    return f"{node.node_class.value}:{parts}"


@dataclass(frozen=True)
class ProvenanceEvent:
    uid: str
    src: ProvenanceNode
    dst: ProvenanceNode
    action: Action
    t: int
    channel: str
    host_id: str

    @property
    def order_key(self) -> tuple[int, str]:
        return (self.t, self.uid)


# --- schema validity -------------------------------------------------------

_SID_RE = re.compile(r"^S-1-\d+(-\d+)*$")
_WIN_PATH_RE = re.compile(r"^(?:[A-Za-z]:\\|\\\\[^\\/:*?\"<>|\s]+\\)[^\x00/*?\"<>|]*$")
_POSIX_PATH_RE = re.compile(r"^/[^\x00]*$")
_SHA256_RE = re.compile(r"^[0-9a-fA-F]{64}$")
_HIVES = (
    "HKLM", "HKCU", "HKU", "HKCR", "HKCC",
    "HKEY_LOCAL_MACHINE", "HKEY_CURRENT_USER", "HKEY_USERS",
    "HKEY_CLASSES_ROOT", "HKEY_CURRENT_CONFIG",
)
PROTOCOLS = frozenset({"TCP", "UDP", "ICMP"})
OS_FAMILIES = frozenset({"windows", "posix"})


def _path_ok(value: Any, os_family: Optional[str]) -> bool:
    if not isinstance(value, str):
        return False
    if os_family == "windows":
        return bool(_WIN_PATH_RE.match(value))
    if os_family == "posix":
        return bool(_POSIX_PATH_RE.match(value))
    return bool(_WIN_PATH_RE.match(value) or _POSIX_PATH_RE.match(value))


def _port_ok(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, str):
        if not value.isascii() or not value.isdigit():
            return False
        value = int(value)
    return isinstance(value, int) and 0 <= value <= 65535


def _ip_ok(value: Any) -> bool:
    try:
        ipaddress.ip_address(value)
    except (ValueError, TypeError):
        return False
    return True


def _hive_ok(value: Any) -> bool:
    if not isinstance(value, str) or not value:
        return False
    head, sep, _ = value.partition("\\")
    return head.upper() in _HIVES


def _attr_ok(node: ProvenanceNode, os_family: Optional[str]) -> bool:
    vocab = ATTR_VOCAB[node.node_class]
    for k, v in node.attr.items():
        if k not in vocab and not (node.node_class is NodeClass.NET and k.startswith("l7_")):
            return False
        if not isinstance(v, (str, tuple)):
            return False
    a = node.attr
    c = node.node_class
    if c is NodeClass.PROCESS:
        if "image_path" in a and not _path_ok(a["image_path"], os_family):
            return False
        if "user_sid" in a and (
            not isinstance(a["user_sid"], str) or not _SID_RE.match(a["user_sid"])
        ):
            # POSIX hosts carry numeric uids instead of SIDs.
            if not (os_family in (None, "posix") and str(a["user_sid"]).isdigit()):
                return False
    elif c is NodeClass.FILE:
        if "path" in a and not _path_ok(a["path"], os_family):
            return False
        if "sha256" in a and not (isinstance(a["sha256"], str) and _SHA256_RE.match(a["sha256"])):
            return False
    elif c is NodeClass.NET:
        for p in ("src_port", "dst_port"):
            if p in a and not _port_ok(a[p]):
                return False
        for ip in ("src_ip", "dst_ip"):
            if ip in a and not _ip_ok(a[ip]):
                return False
        if "proto" in a and a["proto"] not in PROTOCOLS:
            return False
    elif c is NodeClass.REGISTRY:
        if "key_path" in a and not _hive_ok(a["key_path"]):
            return False
    return True


def _id_ok(pid: PhysicalId) -> bool:
    if isinstance(pid, ProcessId):
        return pid.pid >= 0 and pid.tid >= 0 and pid.start_time >= 0 and bool(pid.host_id)
    if isinstance(pid, FileId):
        return pid.inode > 0 and bool(pid.volume_id)
    if isinstance(pid, NetId):
        return (
            _port_ok(pid.src_port)
            and _port_ok(pid.dst_port)
            and _ip_ok(pid.src_ip)
            and _ip_ok(pid.dst_ip)
            and pid.proto in PROTOCOLS
        )
    if isinstance(pid, RegistryId):
        return _hive_ok(pid.key_path)
    return False


def schema_valid(node: ProvenanceNode, os_family: Optional[str] = None) -> bool:
    """Return True iff ``node`` satisfies the typed ontology bounds.

    ``os_family`` ("windows" or "posix") selects the path syntax; when
    unknown either family is accepted. Registry nodes are rejected on
    POSIX hosts. Never raises.
    """
    try:
        if not isinstance(node, ProvenanceNode):
            return False
        if node.node_class is NodeClass.REGISTRY and os_family == "posix":
            return False
        if node.id is not None and not _id_ok(node.id):
            return False
        return _attr_ok(node, os_family)
    except Exception:  # noqa: BLE001 - total by contract
        return False


# Which (src class, dst class) pairs each action may connect.
ACTION_SIGNATURES: dict[Action, tuple[frozenset, frozenset]] = {
    Action.PROCESS_CREATE: (frozenset({NodeClass.PROCESS, NodeClass.FILE}), frozenset({NodeClass.PROCESS})),
    Action.INJECT: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.PROCESS})),
    Action.FILE_WRITE: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.FILE})),
    Action.FILE_READ: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.FILE})),
    Action.FILE_MAP: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.FILE})),
    Action.NET_CONNECT: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.NET})),
    Action.NET_ACCEPT: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.NET})),
    Action.REGISTRY_SET: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.REGISTRY})),
    Action.REGISTRY_DELETE: (frozenset({NodeClass.PROCESS}), frozenset({NodeClass.REGISTRY})),
}


def action_fits(action: Action, src: NodeClass, dst: NodeClass) -> bool:
    srcs, dsts = ACTION_SIGNATURES[action]
    return src in srcs and dst in dsts


# --- temporal unrolling ----------------------------------------------------


def unrolled_graph(events: Iterable[ProvenanceEvent]) -> dict[tuple, set[tuple]]:
    """Adjacency of the temporally unrolled graph.

    Vertices are ``(node key, t)``. Each event adds ``(src, t) -> (dst, t)``;
    successive observations of one node are chained forward in time.
    """
    adj: dict[tuple, set[tuple]] = {}
    times: dict[tuple, set[int]] = {}
    for ev in events:
        s, d = (ev.src.key, ev.t), (ev.dst.key, ev.t)
        adj.setdefault(s, set()).add(d)
        adj.setdefault(d, set())
        times.setdefault(ev.src.key, set()).add(ev.t)
        times.setdefault(ev.dst.key, set()).add(ev.t)
    for key, ts in times.items():
        ordered = sorted(ts)
        for a, b in zip(ordered, ordered[1:]):
            adj[(key, a)].add((key, b))
    return adj


def is_dag(events: Iterable[ProvenanceEvent]) -> bool:
    adj = unrolled_graph(events)
    # TopologicalSorter wants predecessors; direction does not affect acyclicity.
    try:
        tuple(TopologicalSorter(adj).static_order())
    except _GraphlibCycleError:
        return False
    return True

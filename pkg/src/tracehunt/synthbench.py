"""Seeded synthetic workloads with planted attack chains and ground truth.

A scenario is a benign background (short process episodes on several
hosts) plus one linear attack chain from an anchor process to a C2
connection. Each chain event is written to every channel its step lists;
the first channel holds the labelled record and the rest are orthogonal
copies a few hundred microseconds later. A matching knowledge base is
co-generated from the chain and from the benign vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .evadekit import SECURITY_CHANNEL, PerturbConfig, Profile, make_rng, perturb
from .knowledge import Graphlet, KnowledgeBase, NodeTemplate
from .ontology import (
    Action,
    FileId,
    NetId,
    NodeClass,
    ProcessId,
    ProvenanceEvent,
    ProvenanceNode,
    RegistryId,
    action_fits,
    parse_action,
    parse_class,
)
from .trace_store import LabelSet, Trace

NS_PER_S = 1_000_000_000
LN_MU = -2.61
LN_SIGMA = 1.43
MIN_CHAIN_LATENCY_NS = 2_000_000
COPY_JITTER_NS = 1_000_000
ANCHOR_LEAD_NS = 10_000_000
BENIGN_FAMILY = "benign"
SUITE_VERSION = 1

TTP_BY_ACTION = {
    Action.PROCESS_CREATE: "T1059",
    Action.FILE_WRITE: "T1105",
    Action.INJECT: "T1055",
    Action.NET_CONNECT: "T1071",
    Action.REGISTRY_SET: "T1547",
    Action.FILE_READ: "T1005",
    Action.FILE_MAP: "T1129",
    Action.NET_ACCEPT: "T1190",
    Action.REGISTRY_DELETE: "T1112",
}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    node_class: NodeClass
    attr: Mapping[str, str]

    def to_dict(self) -> dict[str, Any]:
        return {"class": self.node_class.value, "attr": dict(self.attr)}

    @classmethod
    def from_dict(cls, raw) -> "NodeSpec":
        return cls(parse_class(raw["class"]), dict(raw.get("attr", {})))


@dataclass(frozen=True)
class ChainStep:
    action: Action
    dst: NodeSpec
    channels: tuple

    def to_dict(self) -> dict[str, Any]:
        return {"action": self.action.value, "dst": self.dst.to_dict(), "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, raw) -> "ChainStep":
        return cls(parse_action(raw["action"]), NodeSpec.from_dict(raw["dst"]), tuple(raw["channels"]))


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    family: str
    anchor: NodeSpec
    chain: tuple
    seed: int = 0
    hosts: int = 2
    benign_events: int = 2000
    mu: float = LN_MU
    sigma: float = LN_SIGMA
    benign_copy_rate: float = 0.5
    # (profile, rate) pairs applied in order when the scenario is realized
    perturbation: tuple = ()
    user_sid: str = "S-1-5-21-3623811015-3361044348-30300820-1013"

    def __post_init__(self):
        object.__setattr__(self, "chain", tuple(self.chain))
        object.__setattr__(self, "perturbation", tuple((str(p), float(r)) for p, r in self.perturbation))
        self.validate()

    def validate(self) -> None:
        if not self.chain:
            raise SpecError("chain length must be at least 1")
        if self.hosts < 1:
            raise SpecError("need at least one host")
        if self.benign_events < 0:
            raise SpecError("benign_events must be non-negative")
        if not self.sigma > 0:
            raise SpecError("sigma must be positive")
        if self.anchor.node_class is not NodeClass.PROCESS:
            raise SpecError("anchor must be a process")
        cur = self.anchor.node_class
        for i, step in enumerate(self.chain):
            if not step.channels:
                raise SpecError(f"chain step {i} has no channel")
            if not action_fits(step.action, cur, step.dst.node_class):
                raise SpecError(f"chain step {i}: {step.action.value} cannot leave a {cur.value} node")
            cur = step.dst.node_class
        for p, r in self.perturbation:
            Profile.parse(p)
            if not 0.0 <= r <= 1.0:
                raise SpecError(f"perturbation rate {r} outside [0, 1]")

    @property
    def length(self) -> int:
        return len(self.chain)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SUITE_VERSION,
            "scenario_id": self.scenario_id,
            "family": self.family,
            "seed": self.seed,
            "hosts": self.hosts,
            "benign_events": self.benign_events,
            "mu": self.mu,
            "sigma": self.sigma,
            "benign_copy_rate": self.benign_copy_rate,
            "perturbation": [list(p) for p in self.perturbation],
            "user_sid": self.user_sid,
            "anchor": self.anchor.to_dict(),
            "chain": [s.to_dict() for s in self.chain],
        }

    @classmethod
    def from_dict(cls, raw) -> "ScenarioSpec":
        try:
            return cls(
                scenario_id=raw["scenario_id"],
                family=raw["family"],
                anchor=NodeSpec.from_dict(raw["anchor"]),
                chain=tuple(ChainStep.from_dict(s) for s in raw["chain"]),
                seed=int(raw.get("seed", 0)),
                hosts=int(raw.get("hosts", 2)),
                benign_events=int(raw.get("benign_events", 2000)),
                mu=float(raw.get("mu", LN_MU)),
                sigma=float(raw.get("sigma", LN_SIGMA)),
                benign_copy_rate=float(raw.get("benign_copy_rate", 0.5)),
                perturbation=tuple(tuple(p) for p in raw.get("perturbation", ())),
                user_sid=raw.get("user_sid", cls.user_sid),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"bad scenario spec: {exc}") from exc


# --- vocabularies -----------------------------------------------------------

WIN_BENIGN_ROOTS = (
    "C:\\Windows\\explorer.exe",
    "C:\\Windows\\System32\\taskhostw.exe",
    "C:\\Program Files\\Microsoft Office\\root\\Office16\\OUTLOOK.EXE",
    "C:\\Program Files (x86)\\Microsoft\\Edge\\Application\\msedge.exe",
)
WIN_BENIGN_CHILDREN = (
    "C:\\Windows\\System32\\notepad.exe",
    "C:\\Windows\\System32\\calc.exe",
    "C:\\Program Files\\7-Zip\\7z.exe",
    "C:\\Windows\\System32\\SearchProtocolHost.exe",
    "C:\\Windows\\System32\\dllhost.exe",
    "C:\\Program Files\\Microsoft OneDrive\\OneDrive.exe",
)
POSIX_BENIGN_ROOTS = ("/usr/sbin/cron", "/usr/lib/systemd/systemd", "/usr/sbin/sshd")
POSIX_BENIGN_CHILDREN = ("/usr/bin/logrotate", "/usr/bin/python3", "/usr/bin/rsync", "/usr/bin/curl", "/usr/bin/tar")
WIN_BENIGN_USERS = ("S-1-5-21-1004336348-1177238915-682003330-1001", "S-1-5-21-1004336348-1177238915-682003330-1002", "S-1-5-18")
POSIX_BENIGN_USERS = ("0", "1000", "33")
BENIGN_NETS = (("13.107.42.14", "443"), ("52.96.165.18", "443"), ("10.0.0.53", "53"), ("140.82.112.3", "443"))
BENIGN_REG = (
    "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Explorer\\RecentDocs",
    "HKCU\\Software\\Microsoft\\Office\\16.0\\Common\\General",
    "HKLM\\SOFTWARE\\Microsoft\\Windows\\CurrentVersion\\Reliability",
)
FILES_PER_IMAGE = 3

ATTACK_ANCHORS = (
    "C:\\Program Files\\Microsoft Office\\root\\Office16\\WINWORD.EXE",
    "C:\\Program Files\\Microsoft Office\\root\\Office16\\EXCEL.EXE",
    "C:\\Windows\\System32\\inetsrv\\w3wp.exe",
    "C:\\nginx\\nginx.exe",
    "C:\\Program Files\\Java\\jre\\bin\\java.exe",
)
ATTACK_LOLBINS = (
    "C:\\Windows\\System32\\cmd.exe",
    "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe",
    "C:\\Windows\\System32\\rundll32.exe",
    "C:\\Windows\\System32\\mshta.exe",
    "C:\\Windows\\System32\\regsvr32.exe",
    "C:\\Windows\\System32\\wscript.exe",
    "C:\\Windows\\System32\\certutil.exe",
    "C:\\Windows\\System32\\bitsadmin.exe",
    "C:\\Windows\\System32\\schtasks.exe",
    "C:\\Windows\\System32\\wbem\\WMIC.exe",
    "C:\\Windows\\System32\\msiexec.exe",
    "C:\\Windows\\System32\\forfiles.exe",
)
ATTACK_INJECT_TARGETS = (
    "C:\\Windows\\System32\\spoolsv.exe",
    "C:\\Windows\\System32\\RuntimeBroker.exe",
    "C:\\Windows\\System32\\WerFault.exe",
    "C:\\Windows\\System32\\sihost.exe",
)
PAYLOAD_NAMES = ("update", "svcmgr", "helper", "loader", "agent", "sync", "runner", "stub")


def _host_name(i: int) -> str:
    return f"host-{i:02d}"


def _host_os(i: int) -> str:
    # host-00 carries the chain and is always Windows; odd hosts run POSIX
    return "posix" if i % 2 == 1 else "windows"


def _host_ip(i: int) -> str:
    return f"10.1.0.{10 + i}"


def _benign_files(image: str, os_family: str) -> list[str]:
    stem = image.replace("\\", "/").rsplit("/", 1)[-1].split(".")[0].lower()
    if os_family == "posix":
        return [f"/var/lib/{stem}/state{j}.dat" for j in range(FILES_PER_IMAGE)]
    return [f"C:\\Users\\Public\\AppData\\{stem}\\cache{j}.dat" for j in range(FILES_PER_IMAGE)]


# --- chain construction ----------------------------------------------------


def _pc_channels(security: bool) -> tuple:
    return (SECURITY_CHANNEL if security else "sysmon", "etw")


def random_chain(rng: np.random.Generator, length: int, family: str, user_sid: str) -> tuple[NodeSpec, tuple]:
    """A linear chain of ``length`` hops from an anchor process to a C2 socket."""
    if length < 1:
        raise SpecError("chain length must be at least 1")
    anchor = NodeSpec(NodeClass.PROCESS, {"image_path": ATTACK_ANCHORS[int(rng.integers(len(ATTACK_ANCHORS)))], "user_sid": user_sid})
    used = {anchor.attr["image_path"]}
    lolbins = [b for b in ATTACK_LOLBINS]
    injects = [b for b in ATTACK_INJECT_TARGETS]
    rng.shuffle(lolbins)
    rng.shuffle(injects)
    steps: list[ChainStep] = []
    cur = NodeClass.PROCESS
    payload_n = 0
    while len(steps) < length:
        left = length - len(steps)
        if cur is NodeClass.FILE:
            image = last_file
            steps.append(ChainStep(Action.PROCESS_CREATE, NodeSpec(NodeClass.PROCESS, {"image_path": image, "user_sid": user_sid}), _pc_channels(False)))
            used.add(image)
            cur = NodeClass.PROCESS
            continue
        if left == 1:
            c2 = f"203.0.113.{int(rng.integers(2, 250))}"
            port = ("443", "8443", "8080")[int(rng.integers(3))]
            steps.append(ChainStep(Action.NET_CONNECT, NodeSpec(NodeClass.NET, {"dst_ip": c2, "dst_port": port, "proto": "TCP"}), ("sysmon", "netflow")))
            cur = NodeClass.NET
            continue
        u = rng.random()
        if left >= 3 and u < 0.3:
            name = PAYLOAD_NAMES[int(rng.integers(len(PAYLOAD_NAMES)))]
            last_file = f"C:\\Users\\Public\\{family}\\{name}{payload_n}.exe"
            payload_n += 1
            steps.append(ChainStep(Action.FILE_WRITE, NodeSpec(NodeClass.FILE, {"path": last_file}), ("sysmon", "etw")))
            cur = NodeClass.FILE
        elif u < 0.45 and injects:
            image = injects.pop()
            steps.append(ChainStep(Action.INJECT, NodeSpec(NodeClass.PROCESS, {"image_path": image, "user_sid": user_sid}), ("sysmon", "etw")))
            used.add(image)
        else:
            image = lolbins.pop() if lolbins else f"C:\\Users\\Public\\{family}\\tool{len(steps)}.exe"
            steps.append(ChainStep(Action.PROCESS_CREATE, NodeSpec(NodeClass.PROCESS, {"image_path": image, "user_sid": user_sid}), _pc_channels(rng.random() < 0.3)))
            used.add(image)
    return anchor, tuple(steps)


# --- trace generation -------------------------------------------------------


class _Ids:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.pids: set[int] = set()
        self.overflow = 65000 * 4
        self.inode = 1000
        self.files: dict[tuple, FileId] = {}
        self.ports = 49152

    def pid(self) -> int:
        for _ in range(64):
            p = int(self.rng.integers(1000, 65000)) * 4
            if p not in self.pids:
                self.pids.add(p)
                return p
        # random space nearly exhausted on very large traces
        self.overflow += 4
        return self.overflow

    def file(self, host: str, path: str) -> FileId:
        key = (host, path)
        if key not in self.files:
            self.inode += 1
            self.files[key] = FileId(self.inode, f"{host}:vol0")
        return self.files[key]

    def port(self) -> int:
        self.ports = 49152 + (self.ports - 49152 + 1) % 16000
        return self.ports


def _make_node(spec: NodeSpec, ids: _Ids, host_idx: int, t: int) -> ProvenanceNode:
    host = _host_name(host_idx)
    c = spec.node_class
    a = dict(spec.attr)
    if c is NodeClass.PROCESS:
        pid = ids.pid()
        return ProvenanceNode(c, ProcessId(pid, pid + 4, t, host), a)
    if c is NodeClass.FILE:
        return ProvenanceNode(c, ids.file(host, a["path"]), a)
    if c is NodeClass.NET:
        nid = NetId(_host_ip(host_idx), ids.port(), a["dst_ip"], int(a["dst_port"]), a.get("proto", "TCP"))
        return ProvenanceNode(c, nid, a)
    return ProvenanceNode(c, RegistryId(a["key_path"]), a)


def _latency_ns(rng: np.random.Generator, mu: float, sigma: float) -> int:
    return max(1, int(round(math.exp(rng.normal(mu, sigma)) * NS_PER_S)))


def _timeline_ns(n_benign: int) -> int:
    return int(max(120.0, n_benign * 0.5) * NS_PER_S)


@dataclass
class _BenignHost:
    idx: int
    os_family: str
    roots: list
    children: tuple
    users: tuple


def _benign_hosts(n_hosts: int, ids: _Ids) -> list[_BenignHost]:
    out = []
    for i in range(n_hosts):
        os_family = _host_os(i)
        roots_v = WIN_BENIGN_ROOTS if os_family == "windows" else POSIX_BENIGN_ROOTS
        users = WIN_BENIGN_USERS if os_family == "windows" else POSIX_BENIGN_USERS
        roots = [
            _make_node(NodeSpec(NodeClass.PROCESS, {"image_path": img, "user_sid": users[k % len(users)]}), ids, i, 0)
            for k, img in enumerate(roots_v)
        ]
        children = WIN_BENIGN_CHILDREN if os_family == "windows" else POSIX_BENIGN_CHILDREN
        out.append(_BenignHost(i, os_family, roots, children, users))
    return out


def _benign_events(spec: ScenarioSpec, rng: np.random.Generator, ids: _Ids, prefix: str = "b") -> list[ProvenanceEvent]:
    """Short process episodes; every non-root event sits one log-normal draw after its actor appeared."""
    n_target = spec.benign_events
    if n_target == 0:
        return []
    horizon = _timeline_ns(n_target)
    hosts = _benign_hosts(spec.hosts, ids)
    events: list[ProvenanceEvent] = []
    counter = 0

    def emit(src, dst, action, t, host: _BenignHost, primary: str, orth: str):
        nonlocal counter
        events.append(ProvenanceEvent(f"{prefix}{counter:07d}", src, dst, action, t, primary, _host_name(host.idx)))
        counter += 1
        if len(events) < n_target and rng.random() < spec.benign_copy_rate:
            jitter = int(rng.integers(0, COPY_JITTER_NS // 4))
            events.append(ProvenanceEvent(f"{prefix}{counter:07d}", src, dst, action, t + jitter, orth, _host_name(host.idx)))
            counter += 1

    while len(events) < n_target:
        host = hosts[int(rng.integers(len(hosts)))]
        root = host.roots[int(rng.integers(len(host.roots)))]
        t = int(rng.integers(0, horizon))
        image = host.children[int(rng.integers(len(host.children)))]
        user = root.attr["user_sid"]
        child_spec = NodeSpec(NodeClass.PROCESS, {"image_path": image, "user_sid": user})
        child = _make_node(child_spec, ids, host.idx, t)
        pc_primary = SECURITY_CHANNEL if (host.os_family == "windows" and rng.random() < 0.3) else ("sysmon" if host.os_family == "windows" else "auditd")
        emit(root, child, Action.PROCESS_CREATE, t, host, pc_primary, "etw" if host.os_family == "windows" else "ebpf")
        cur = child
        for _depth in range(3):
            if len(events) >= n_target:
                break
            t = t + _latency_ns(rng, spec.mu, spec.sigma)
            u = rng.random()
            primary = "sysmon" if host.os_family == "windows" else "auditd"
            if u < 0.25 and _depth < 2:
                img = host.children[int(rng.integers(len(host.children)))]
                if img == cur.attr["image_path"]:
                    img = host.children[(host.children.index(img) + 1) % len(host.children)]
                nxt = _make_node(NodeSpec(NodeClass.PROCESS, {"image_path": img, "user_sid": user}), ids, host.idx, t)
                emit(cur, nxt, Action.PROCESS_CREATE, t, host, primary, "etw" if host.os_family == "windows" else "ebpf")
                cur = nxt
                continue
            if u < 0.55:
                paths = _benign_files(cur.attr["image_path"], host.os_family)
                path = paths[int(rng.integers(len(paths)))]
                f = _make_node(NodeSpec(NodeClass.FILE, {"path": path}), ids, host.idx, t)
                action = Action.FILE_WRITE if rng.random() < 0.6 else Action.FILE_READ
                emit(cur, f, action, t, host, primary, "etw" if host.os_family == "windows" else "ebpf")
            elif u < 0.85 or host.os_family == "posix":
                ip, port = BENIGN_NETS[int(rng.integers(len(BENIGN_NETS)))]
                n = _make_node(NodeSpec(NodeClass.NET, {"dst_ip": ip, "dst_port": port, "proto": "UDP" if port == "53" else "TCP"}), ids, host.idx, t)
                emit(cur, n, Action.NET_CONNECT, t, host, primary, "netflow")
            else:
                key = BENIGN_REG[int(rng.integers(len(BENIGN_REG)))]
                r = _make_node(NodeSpec(NodeClass.REGISTRY, {"key_path": key}), ids, host.idx, t)
                emit(cur, r, Action.REGISTRY_SET, t, host, primary, "etw")
            break
    return events[:n_target]


@dataclass(frozen=True)
class PlantedChain:
    anchor: ProvenanceNode
    target: ProvenanceNode
    nodes: tuple
    events: tuple  # every emitted record, labelled primaries and copies
    labelled: frozenset
    start_t: int


def _plant_chain(spec: ScenarioSpec, rng: np.random.Generator, ids: _Ids, t0: int) -> PlantedChain:
    anchor = _make_node(spec.anchor, ids, 0, t0 - ANCHOR_LEAD_NS)
    nodes = [anchor]
    events: list[ProvenanceEvent] = []
    labelled = set()
    cur = anchor
    t = t0
    for i, step in enumerate(spec.chain):
        if i > 0:
            t = t + max(MIN_CHAIN_LATENCY_NS, _latency_ns(rng, spec.mu, spec.sigma))
        dst = _make_node(step.dst, ids, 0, t)
        for j, channel in enumerate(step.channels):
            jitter = 0 if j == 0 else int(rng.integers(0, COPY_JITTER_NS))
            uid = f"{spec.scenario_id}-a{i:03d}-{j}"
            events.append(ProvenanceEvent(uid, cur, dst, step.action, t + jitter, channel, _host_name(0)))
            if j == 0:
                labelled.add(uid)
        nodes.append(dst)
        cur = dst
    return PlantedChain(anchor, cur, tuple(nodes), tuple(events), frozenset(labelled), anchor.id.start_time)


def _generate(spec: ScenarioSpec) -> tuple[Trace, PlantedChain]:
    spec.validate()
    rng = make_rng(spec.seed)
    ids = _Ids(rng)
    benign = _benign_events(spec, rng, ids)
    horizon = _timeline_ns(spec.benign_events)
    t0 = int(rng.integers(horizon // 4, horizon // 2)) if spec.benign_events else 10 * NS_PER_S
    chain = _plant_chain(spec, rng, ids, t0)
    labels = LabelSet(chain.labelled, spec.family, spec.scenario_id)
    hosts = {_host_name(i): _host_os(i) for i in range(spec.hosts)}
    return Trace(tuple(benign) + chain.events, labels, {}, hosts), chain


def generate(spec: ScenarioSpec) -> tuple[Trace, LabelSet]:
    """Unperturbed trace and its labels; deterministic per ``spec.seed``."""
    trace, _ = _generate(spec)
    return trace, trace.labels


def benign_trace(seed: int = 0, n_events: int = 5000, hosts: int = 2, mu: float = LN_MU, sigma: float = LN_SIGMA, copy_rate: float = 0.5) -> Trace:
    """Background-only trace for Stage 1 calibration."""
    dummy = ScenarioSpec(
        "benign", BENIGN_FAMILY, NodeSpec(NodeClass.PROCESS, {"image_path": ATTACK_ANCHORS[0]}),
        (ChainStep(Action.NET_CONNECT, NodeSpec(NodeClass.NET, {"dst_ip": "203.0.113.1", "dst_port": "443", "proto": "TCP"}), ("sysmon",)),),
        seed=seed, hosts=hosts, benign_events=n_events, mu=mu, sigma=sigma, benign_copy_rate=copy_rate,
    )
    rng = make_rng(seed)
    events = _benign_events(dummy, rng, _Ids(rng))
    return Trace(tuple(events), LabelSet.empty(), {}, {_host_name(i): _host_os(i) for i in range(hosts)})


# --- knowledge base ---------------------------------------------------------


def _template(node_spec: NodeSpec) -> NodeTemplate:
    return NodeTemplate(node_spec.node_class, dict(node_spec.attr))


def _hints(rng: np.random.Generator, n: int, mu: float, sigma: float) -> list[float]:
    return [float(math.exp(rng.normal(mu, sigma))) for _ in range(n)]


def chain_graphlets(spec: ScenarioSpec, window: int = 2) -> list[Graphlet]:
    """Overlapping fragments of the chain, ``window`` hops each."""
    rng = make_rng(spec.seed + 7919)
    nodes = [spec.anchor] + [s.dst for s in spec.chain]
    out = []
    n = len(spec.chain)
    starts = range(max(1, n - window + 1))
    for k in starts:
        hops = list(range(k, min(n, k + window)))
        tmpl = [_template(nodes[i]) for i in range(hops[0], hops[-1] + 2)]
        edges = [[j, spec.chain[i].action.value, j + 1] for j, i in enumerate(hops)]
        ttp = TTP_BY_ACTION[spec.chain[hops[-1]].action]
        out.append(Graphlet.build(f"{spec.family}-g{k:02d}", ttp, spec.family, tmpl, edges, _hints(rng, len(edges), spec.mu, spec.sigma)))
    return out


def benign_graphlets(seed: int = 0, mu: float = LN_MU, sigma: float = LN_SIGMA) -> list[Graphlet]:
    """Graphlets describing the background vocabulary, tagged family "benign"."""
    rng = make_rng(seed + 104729)
    out = []
    for os_family, roots, children, users in (
        ("windows", WIN_BENIGN_ROOTS, WIN_BENIGN_CHILDREN, WIN_BENIGN_USERS),
        ("posix", POSIX_BENIGN_ROOTS, POSIX_BENIGN_CHILDREN, POSIX_BENIGN_USERS),
    ):
        for k, root in enumerate(roots):
            user = users[k % len(users)]
            # numeric POSIX uids only validate against a known host OS
            attr = {"image_path": root, "user_sid": user} if os_family == "windows" else {"image_path": root}
            tmpl = [NodeTemplate(NodeClass.PROCESS, attr)]
            edges = []
            for c in children:
                tmpl.append(NodeTemplate(NodeClass.PROCESS, {"image_path": c}))
                edges.append([0, Action.PROCESS_CREATE.value, len(tmpl) - 1])
            out.append(Graphlet.build(f"benign-{os_family}-root{k}", "benign", BENIGN_FAMILY, tmpl, edges, _hints(rng, len(edges), mu, sigma)))
        for k, child in enumerate(children):
            tmpl = [NodeTemplate(NodeClass.PROCESS, {"image_path": child})]
            edges = []
            for path in _benign_files(child, os_family):
                tmpl.append(NodeTemplate(NodeClass.FILE, {"path": path}))
                edges.append([0, Action.FILE_WRITE.value, len(tmpl) - 1])
                edges.append([0, Action.FILE_READ.value, len(tmpl) - 1])
            for ip, port in BENIGN_NETS[:2]:
                tmpl.append(NodeTemplate(NodeClass.NET, {"dst_ip": ip, "dst_port": port, "proto": "TCP"}))
                edges.append([0, Action.NET_CONNECT.value, len(tmpl) - 1])
            for other in children:
                if other != child:
                    tmpl.append(NodeTemplate(NodeClass.PROCESS, {"image_path": other}))
                    edges.append([0, Action.PROCESS_CREATE.value, len(tmpl) - 1])
            out.append(Graphlet.build(f"benign-{os_family}-child{k}", "benign", BENIGN_FAMILY, tmpl, edges, _hints(rng, len(edges), mu, sigma)))
    return out


def kb_for(specs: Iterable[ScenarioSpec], seed: int = 0, include_benign: bool = True) -> KnowledgeBase:
    graphlets: dict[str, Graphlet] = {}
    for spec in specs:
        for g in chain_graphlets(spec):
            graphlets.setdefault(g.id, g)
    if include_benign:
        for g in benign_graphlets(seed):
            graphlets.setdefault(g.id, g)
    return KnowledgeBase(list(graphlets.values()))


# --- realized scenarios -----------------------------------------------------


@dataclass
class Scenario:
    spec: ScenarioSpec
    truth: Trace
    trace: Trace  # after perturbation, as seen by the hunter
    anchor: ProvenanceNode
    target: ProvenanceNode
    start_t: int
    chain_nodes: tuple = field(default=(), repr=False)

    @property
    def family(self) -> str:
        return self.spec.family


def apply_perturbation(trace: Trace, perturbation: Sequence, seed: int) -> Trace:
    out = trace
    for k, (profile, rate) in enumerate(perturbation):
        out = perturb(out, Profile.parse(profile), PerturbConfig(rate=rate, seed=seed + k))
    return out


def realize(spec: ScenarioSpec) -> Scenario:
    truth, chain = _generate(spec)
    observed = apply_perturbation(truth, spec.perturbation, spec.seed)
    return Scenario(spec, truth, observed, chain.anchor, chain.target, chain.start_t, chain.nodes)


# --- presets ----------------------------------------------------------------

PRESETS = ("robustness", "pathlength", "caseK", "small")
ROBUSTNESS_RATES = (0.10, 0.30, 0.50, 0.70)
PATHLENGTHS = (2, 4, 8, 12)


def _family(i: int) -> str:
    return f"fam{i:02d}"


def case_k_spec(seed: int = 0, benign_events: int = 2000) -> ScenarioSpec:
    """Web-server compromise: nginx -> bash -> powershell -> injected svchost -> C2.

    Only the bash -> powershell hop has an ETW copy; the first hop exists
    solely in the Security channel, which the Wiz profile wipes.
    """
    sid = "S-1-5-21-3623811015-3361044348-30300820-1013"
    proc = lambda p: NodeSpec(NodeClass.PROCESS, {"image_path": p, "user_sid": sid})  # noqa: E731
    chain = (
        ChainStep(Action.PROCESS_CREATE, proc("C:\\Windows\\System32\\bash.exe"), (SECURITY_CHANNEL,)),
        ChainStep(Action.PROCESS_CREATE, proc("C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe"), (SECURITY_CHANNEL, "etw")),
        ChainStep(Action.INJECT, proc("C:\\Windows\\System32\\svchost.exe"), ("sysmon",)),
        ChainStep(Action.NET_CONNECT, NodeSpec(NodeClass.NET, {"dst_ip": "198.51.100.23", "dst_port": "443", "proto": "TCP"}), ("sysmon", "netflow")),
    )
    return ScenarioSpec("caseK", "webshell", proc("C:\\nginx\\nginx.exe"), chain, seed=seed, hosts=2,
                        benign_events=benign_events, perturbation=(("wiz", 1.0),), user_sid=sid)


def scenario_suite(preset: str, seed: int = 0, benign_events: Optional[int] = None) -> list[ScenarioSpec]:
    """Fixed, versioned scenario presets."""
    if preset == "caseK":
        return [case_k_spec(seed, 2000 if benign_events is None else benign_events)]
    specs: list[ScenarioSpec] = []
    if preset == "robustness":
        n_benign = 1500 if benign_events is None else benign_events
        for j in range(20):
            rng = make_rng(seed * 1000 + j)
            length = int(rng.integers(6, 11))
            user = f"S-1-5-21-3623811015-3361044348-30300820-{1100 + j}"
            anchor, chain = random_chain(rng, length, _family(j), user)
            for rate in ROBUSTNESS_RATES:
                specs.append(ScenarioSpec(
                    f"rob-s{seed}-{j:02d}-r{int(rate * 100):02d}", _family(j), anchor, chain,
                    seed=seed * 1000 + j, benign_events=n_benign,
                    perturbation=(("apt29", rate), ("fin7", rate)), user_sid=user,
                ))
        return specs
    if preset == "pathlength":
        n_benign = 1500 if benign_events is None else benign_events
        for length in PATHLENGTHS:
            for j in range(5):
                rng = make_rng(seed * 1000 + 100 * length + j)
                fam = f"len{length:02d}x{j}"
                user = f"S-1-5-21-3623811015-3361044348-30300820-{2000 + 10 * length + j}"
                anchor, chain = random_chain(rng, length, fam, user)
                specs.append(ScenarioSpec(
                    f"len-s{seed}-{length:02d}-{j}", fam, anchor, chain, seed=seed * 1000 + 100 * length + j,
                    benign_events=n_benign, perturbation=(("apt29", 0.3), ("fin7", 0.3)), user_sid=user,
                ))
        return specs
    if preset == "small":
        # tiny graphs for exhaustive cross-checks
        for j in range(50):
            rng = make_rng(seed * 1000 + 500 + j)
            length = int(rng.integers(2, 6))
            fam = f"small{j:02d}"
            user = f"S-1-5-21-3623811015-3361044348-30300820-{3000 + j}"
            anchor, chain = random_chain(rng, length, fam, user)
            specs.append(ScenarioSpec(
                f"small-s{seed}-{j:02d}", fam, anchor, chain, seed=seed * 1000 + 500 + j, hosts=1,
                benign_events=int(rng.integers(0, 5)), perturbation=(("apt29", 0.5), ("fin7", 0.5)), user_sid=user,
            ))
        return specs
    raise SpecError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")

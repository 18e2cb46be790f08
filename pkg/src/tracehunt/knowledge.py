"""Graphlet knowledge base: canonical BFS text, hashed embeddings, retrieval.

The embedder is a signed feature-hashing bag of tokens (blake2b-64), so it
is seed-free and identical across processes. Tokens are ``field:value``
unigrams for every attribute pair, character 3-grams of attribute values,
and the bare structural words (classes, actions, node slots).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .ontology import Action, NodeClass, ProvenanceNode, canonical_attr_text, parse_action, parse_class, schema_valid

DIM = 256


class DisconnectedError(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class NodeTemplate:
    node_class: NodeClass
    attr: Mapping[str, Any] = field(default_factory=dict)

    def text(self) -> str:
        return f"{self.node_class.value}{canonical_attr_text(self.attr)}"


def node_text(node_class: NodeClass, attr: Mapping[str, Any]) -> str:
    return f"{node_class.value}{canonical_attr_text(attr)}"


# --- canonical serialisation ---------------------------------------------

_MAX_TIE_EXPANSIONS = 5040


def canonical_serialize(nodes: Sequence[NodeTemplate], edges: Sequence[tuple]) -> str:
    """Deterministic BFS text of a connected typed subgraph.

    Starts from the lexicographically least node text and walks incident
    edges (outgoing and incoming, so weakly connected graphs serialise) in
    ``(direction, action, neighbour class, neighbour text)`` order. Where
    that order ties, all tie orders are tried and the least text wins, so
    the output is invariant under input permutation.
    """
    if not nodes:
        raise EmptyInput("empty subgraph")
    texts = [n.text() if isinstance(n, NodeTemplate) else node_text(n.node_class, n.attr) for n in nodes]
    classes = [n.node_class.value for n in nodes]
    norm_edges = [(int(s), Action(a).value if not isinstance(a, Action) else a.value, int(d)) for s, a, d in edges]
    incident: dict[int, list] = {i: [] for i in range(len(nodes))}
    for ei, (s, a, d) in enumerate(norm_edges):
        incident[s].append((ei, "out", a, d))
        if d != s:
            incident[d].append((ei, "in", a, s))

    # connectivity (weak)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for _, _, _, v in incident[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != len(nodes):
        raise DisconnectedError("subgraph is not connected")

    least = min(texts)
    roots = [i for i, t in enumerate(texts) if t == least]
    budget = [_MAX_TIE_EXPANSIONS]
    best: Optional[str] = None
    for r in roots:
        for out in _bfs_renderings(r, texts, classes, norm_edges, incident, budget):
            if best is None or out < best:
                best = out
    assert best is not None
    return best


def _bfs_renderings(root, texts, classes, edges, incident, budget):
    def sort_key(item):
        _, direction, action, other = item
        return (direction, action, classes[other], texts[other])

    def run(order, number, queue, emitted, lines):
        # order: nodes in BFS-number order
        while queue:
            u = queue[0]
            pending = [it for it in incident[u] if it[0] not in emitted]
            if not pending:
                queue = queue[1:]
                continue
            pending.sort(key=sort_key)
            head = sort_key(pending[0])
            group = [it for it in pending if sort_key(it) == head]
            if len(group) > 1 and budget[0] > 0:
                choices = []
                for it in group:
                    # only distinct neighbours matter
                    if it[3] not in [c[3] for c in choices]:
                        choices.append(it)
            else:
                choices = [group[0]]
            if len(choices) > 1:
                budget[0] -= len(choices)
                for it in choices:
                    yield from run(*_emit(it, u, order, number, queue, emitted, lines))
                return
            order, number, queue, emitted, lines = _emit(choices[0], u, order, number, queue, emitted, lines)
        node_lines = [f"n{i}={texts[v]}" for i, v in enumerate(order)]
        yield "\n".join(node_lines + lines)

    def _emit(it, u, order, number, queue, emitted, lines):
        ei, direction, action, other = it
        number = dict(number)
        order = list(order)
        queue = list(queue)
        if other not in number:
            number[other] = len(order)
            order.append(other)
            queue.append(other)
        s, d = (u, other) if direction == "out" else (other, u)
        lines = lines + [f"n{number[s]} {action} n{number[d]}"]
        return order, number, queue, emitted | {ei}, lines

    yield from run([root], {root: 0}, [root], frozenset(), [])


def hop_text(src_class: NodeClass, action: Union[Action, str], dst_class: NodeClass, dst_attr: Mapping[str, Any]) -> str:
    """Single-hop scope shared by graphlet hop vectors and hypothesis payloads.

    The source side is reduced to its type; the destination keeps its
    payload, so a hypothesis that reproduces the template payload embeds
    to the same vector.
    """
    nodes = [NodeTemplate(src_class, {}), NodeTemplate(dst_class, dst_attr)]
    return canonical_serialize(nodes, [(0, action, 1)])


# --- embedding -------------------------------------------------------------

_KV_RE = re.compile(r'"([^"\\]+)":("(?:[^"\\]|\\.)*"|\[(?:[^\]"\\]|"(?:[^"\\]|\\.)*")*\])')
_WORD_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")


def tokenize(text: str) -> list[str]:
    tokens: list[str] = []

    def add_value(key: str, value: str):
        tokens.append(f"{key}:{value}")
        low = value.lower()
        for i in range(len(low) - 2):
            tokens.append("3g:" + low[i : i + 3])

    def replace(m: re.Match) -> str:
        key, raw = m.group(1), m.group(2)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(value, list):
            for v in value:
                add_value(key, str(v))
        else:
            add_value(key, str(value))
        return " "

    rest = _KV_RE.sub(replace, text)
    tokens.extend(_WORD_RE.findall(rest))
    return tokens


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=65536)
def _embed_cached(text: str, dim: int) -> bytes:
    tokens = tokenize(text)
    if not tokens:
        raise EmptyInput("no tokens in text")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        h = _hash64(tok)
        sign = -1.0 if (h >> 63) & 1 else 1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every token cancelled out; fall back to unsigned counts
        for tok in tokens:
            vec[_hash64(tok) % dim] += 1.0
        norm = np.linalg.norm(vec)
    return (vec / norm).tobytes()


def embed(text: str, dim: int = DIM) -> np.ndarray:
    if not text or not text.strip():
        raise EmptyInput("empty text")
    return np.frombuffer(_embed_cached(text, dim), dtype=np.float64).copy()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return max(-1.0, min(1.0, c))


# --- graphlets -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Graphlet:
    id: str
    ttp_id: str
    family: str
    nodes: tuple
    edges: tuple  # (src_idx, Action, dst_idx)
    dt_hints_s: tuple = ()  # per edge, None when absent
    whole_vec: np.ndarray = field(default=None, repr=False)
    hop_vecs: Mapping[int, np.ndarray] = field(default=None, repr=False)
    text: str = field(default="", repr=False)
    edge_order: tuple = field(default=(), repr=False)

    @classmethod
    def build(cls, id: str, ttp_id: str, family: str, nodes: Iterable[NodeTemplate], edges: Iterable[Sequence], dt_hints_s: Optional[Sequence] = None) -> "Graphlet":
        nodes = tuple(nodes)
        edge_list = []
        hints = []
        for e in edges:
            s, a, d = int(e[0]), e[1] if isinstance(e[1], Action) else parse_action(e[1]), int(e[2])
            if not (0 <= s < len(nodes) and 0 <= d < len(nodes)):
                raise ValueError(f"graphlet {id}: edge {e} out of range")
            edge_list.append((s, a, d))
            hints.append(float(e[3]) if len(e) > 3 and e[3] is not None else None)
        if dt_hints_s is not None:
            hints = [None if h is None else float(h) for h in dt_hints_s]
        for n in nodes:
            if not schema_valid(ProvenanceNode(n.node_class, None, _concrete_attr(n.attr))):
                raise ValueError(f"graphlet {id}: node {n.text()} fails schema validation")
        text = canonical_serialize(nodes, edge_list)
        hop_vecs = {
            i: embed(hop_text(nodes[s].node_class, a, nodes[d].node_class, nodes[d].attr))
            for i, (s, a, d) in enumerate(edge_list)
        }
        order = _canonical_edge_order(nodes, edge_list)
        return cls(id, ttp_id, family, nodes, tuple(edge_list), tuple(hints), embed(text), hop_vecs, text, order)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "ttp": self.ttp_id,
            "family": self.family,
            "nodes": [{"class": n.node_class.value, "attr": dict(n.attr)} for n in self.nodes],
            "edges": [
                [s, a.value, d] + ([h] if h is not None else [])
                for (s, a, d), h in zip(self.edges, self.dt_hints_s)
            ],
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Graphlet":
        nodes = [NodeTemplate(parse_class(n["class"]), dict(n.get("attr") or {})) for n in raw["nodes"]]
        return cls.build(raw["id"], raw.get("ttp", ""), raw.get("family", ""), nodes, raw["edges"])


_PLACEHOLDER_RE = re.compile(r"\$\{[a-z_]+\}")


def _concrete_attr(attr: Mapping[str, Any]) -> dict:
    # placeholders are substituted at instantiation; validate the template
    # with them stripped out
    return {k: v for k, v in attr.items() if not (isinstance(v, str) and _PLACEHOLDER_RE.search(v))}


def _canonical_edge_order(nodes, edges) -> tuple:
    """Edge indices sorted by (source text, action, destination text, index)."""
    return tuple(
        sorted(range(len(edges)), key=lambda i: (nodes[edges[i][0]].text(), edges[i][1].value, nodes[edges[i][2]].text(), i))
    )


def single_hop_projection(graphlet: Graphlet, edge_idx: int) -> np.ndarray:
    if edge_idx not in graphlet.hop_vecs:
        raise IndexError(f"graphlet {graphlet.id} has no edge {edge_idx}")
    return graphlet.hop_vecs[edge_idx]


@dataclass(frozen=True)
class Retrieval:
    graphlets: tuple
    scores: tuple
    underfull: bool


class KnowledgeBase:
    def __init__(self, graphlets: Iterable[Graphlet]):
        gs = sorted(graphlets, key=lambda g: g.id)
        ids = [g.id for g in gs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate graphlet id")
        self.graphlets: tuple = tuple(gs)
        self._matrix = np.stack([g.whole_vec for g in gs]) if gs else np.zeros((0, DIM))
        self._by_id = {g.id: g for g in gs}

    def __len__(self):
        return len(self.graphlets)

    def __iter__(self):
        return iter(self.graphlets)

    def get(self, gid: str) -> Graphlet:
        return self._by_id[gid]

    @property
    def families(self) -> frozenset:
        return frozenset(g.family for g in self.graphlets)

    def retrieve(self, query_vec: np.ndarray, k: int = 8, exclude_family: Optional[Union[str, Iterable[str]]] = None) -> Retrieval:
        if isinstance(exclude_family, str):
            excluded = {exclude_family}
        else:
            excluded = set(exclude_family or ())
        if not self.graphlets:
            return Retrieval((), (), True)
        sims = self._matrix @ np.asarray(query_vec, dtype=np.float64)
        sims = np.clip(sims, -1.0, 1.0)
        ranked = sorted(
            (i for i, g in enumerate(self.graphlets) if g.family not in excluded),
            key=lambda i: (-round(float(sims[i]), 12), self.graphlets[i].id),
        )
        top = ranked[:k]
        return Retrieval(
            tuple(self.graphlets[i] for i in top),
            tuple(float(sims[i]) for i in top),
            len(top) < k,
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "KnowledgeBase":
        """Load every ``*.json`` graphlet file in a directory (or one list file)."""
        p = Path(path)
        raws: list = []
        if p.is_dir():
            for f in sorted(p.glob("*.json")):
                data = json.loads(f.read_text(encoding="utf-8"))
                raws.extend(data if isinstance(data, list) else [data])
        else:
            data = json.loads(p.read_text(encoding="utf-8"))
            raws.extend(data if isinstance(data, list) else data.get("graphlets", [data]))
        return cls(Graphlet.from_dict(r) for r in raws)

    def save(self, directory: Union[str, Path]) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for g in self.graphlets:
            safe = re.sub(r"[^A-Za-z0-9_.-]", "_", g.id)
            (d / f"{safe}.json").write_text(
                json.dumps(g.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
            )


def retrieve(kb: KnowledgeBase, query_vec: np.ndarray, k: int = 8, exclude_family=None) -> Retrieval:
    return kb.retrieve(query_vec, k, exclude_family)


def subgraph_from_events(events: Sequence, center: Optional[ProvenanceNode] = None) -> str:
    """Canonical text of the subgraph spanned by ``events`` (or ``center`` alone)."""
    index: dict[tuple, int] = {}
    nodes: list[NodeTemplate] = []

    def slot(n: ProvenanceNode) -> int:
        if n.key not in index:
            index[n.key] = len(nodes)
            nodes.append(NodeTemplate(n.node_class, dict(n.attr)))
        return index[n.key]

    if center is not None:
        slot(center)
    edges = []
    for ev in events:
        edges.append((slot(ev.src), ev.action, slot(ev.dst)))
    return canonical_serialize(nodes, edges)


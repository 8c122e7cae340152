"""Student-conditioned subgraph retrieval.

Both retrievers run a multi-source breadth-first search from the seed nodes,
which yields the union of every seed's hop-limited neighborhood, and keep the
induced edges. A node budget caps the result: seeds always stay, then nodes
are admitted by hop, then by their strongest link into the already admitted
set, then by id.
"""

from __future__ import annotations

import bisect
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Callable, Hashable, Iterable, Mapping, Sequence

from .core import KcEdge, KcGraph, SqGraph
from .graphs import similarity_weight
from .irt import IrtConfig, fit_ability

Node = Hashable
SqNode = tuple[str, str]


class RetrievalError(KeyError):
    """No seed of the request exists in the graph."""


@dataclass(frozen=True)
class PredictionInstance:
    """Predict ``target_question`` for ``student_id`` given the responses in ``history``."""

    student_id: str
    history: tuple[tuple[str, int], ...]
    target_question: str
    target_kcs: tuple[str, ...]

    def __post_init__(self):
        if not self.history:
            raise ValueError("prediction instance needs a non-empty history")


@dataclass(frozen=True)
class Subgraph:
    nodes: tuple[Node, ...]
    hops: tuple[int, ...]
    edges: tuple
    seeds: tuple[Node, ...]
    attributes: Mapping[Node, object] = field(default_factory=dict)
    skipped: tuple = ()
    truncated: bool = False

    def __post_init__(self):
        kept = set(self.nodes)
        if not set(self.seeds) <= kept:
            raise ValueError("seeds must be retained")

    @property
    def node_set(self) -> frozenset:
        return frozenset(self.nodes)


def bfs_order(neighbors: Callable[[Node], Mapping[Node, float]], seeds: Sequence[Node], hops: int,
              budget: int | None = None) -> tuple[list[Node], list[int], bool]:
    """Nodes within ``hops`` of any seed, nearest first, capped at ``budget``."""
    order = list(dict.fromkeys(seeds))
    depth = [0] * len(order)
    seen = set(order)
    frontier = order
    truncated = False
    for h in range(1, hops + 1):
        if budget is not None and len(order) >= budget:
            truncated = truncated or any(v not in seen for u in frontier for v in neighbors(u))
            break
        best: dict[Node, float] = {}
        for u in frontier:
            for v, w in neighbors(u).items():
                if v not in seen and w > best.get(v, float("-inf")):
                    best[v] = w
        if not best:
            break
        layer = sorted(best, key=lambda v: (-best[v], v))
        if budget is not None and len(order) + len(layer) > budget:
            layer = layer[:budget - len(order)]
            truncated = True
        order += layer
        depth += [h] * len(layer)
        seen.update(layer)
        frontier = layer
    return order, depth, truncated


@dataclass(frozen=True)
class StudentOverlay:
    """Replacement view of one student node: history-only ability and links."""

    student_id: str
    theta: float
    links: Mapping[SqNode, float]


def condition_student(g: SqGraph, inst: PredictionInstance, topk_s: int = 20,
                      irt_cfg: IrtConfig = IrtConfig(), _sorted_theta=None) -> StudentOverlay:
    """Rebuild the target student's node from its history alone.

    Ability is re-estimated with difficulties frozen, question links come from
    the history, and student links go to the ``topk_s`` graph students with the
    closest ability.
    """
    theta = fit_ability(inst.history, g.b, irt_cfg)
    links: dict[SqNode, float] = {}
    for q, n in Counter(q for q, _ in inst.history if q in g.b).items():
        links[("q", q)] = float(n)
    ranked = _sorted_theta if _sorted_theta is not None else sorted((v, s) for s, v in g.theta.items())
    for s in _closest(ranked, theta, topk_s, exclude=inst.student_id):
        links[("s", s)] = similarity_weight(theta, g.theta[s], g.sigma_s)
    return StudentOverlay(inst.student_id, theta, links)


def _closest(ranked: Sequence[tuple[float, str]], x: float, k: int, exclude: str) -> list[str]:
    pos = bisect.bisect_left(ranked, (x, ""))
    lo, hi = pos - 1, pos
    out: list[tuple[float, str]] = []
    while len(out) < k and (lo >= 0 or hi < len(ranked)):
        left = (x - ranked[lo][0], ranked[lo][1]) if lo >= 0 else None
        right = (ranked[hi][0] - x, ranked[hi][1]) if hi < len(ranked) else None
        if right is None or (left is not None and left <= right):
            cand, lo = left, lo - 1
        else:
            cand, hi = right, hi + 1
        if cand[1] != exclude:
            out.append(cand)
    return [s for _, s in out]


def _overlay_neighbors(g: SqGraph, overlay: StudentOverlay | None) -> Callable[[SqNode], Mapping[SqNode, float]]:
    adj = g.adjacency
    if overlay is None:
        return lambda u: adj.get(u, {})
    target = ("s", overlay.student_id)

    def neighbors(u: SqNode) -> Mapping[SqNode, float]:
        if u == target:
            return overlay.links
        base = adj.get(u, {})
        if target in base or u in overlay.links:
            out = {v: w for v, w in base.items() if v != target}
            if u in overlay.links:
                out[target] = overlay.links[u]
            return out
        return base

    return neighbors


def _induced_sq_edges(nodes: Sequence[SqNode], neighbors) -> tuple[tuple[SqNode, SqNode, float], ...]:
    kept = set(nodes)
    out = []
    for u in nodes:
        for v, w in neighbors(u).items():
            if v in kept and u < v:
                out.append((u, v, w))
    return tuple(sorted(out))


def retrieve_sq_subgraph(g: SqGraph, inst: PredictionInstance, k: int = 2, budget: int | None = 512,
                         overlay: StudentOverlay | None = None) -> Subgraph:
    """Union of the k-hop neighborhoods of the student and its history questions.

    Unknown seeds are skipped and listed in ``skipped``. With an ``overlay`` the
    student node is replaced by its history-only view (and added if absent).
    """
    if k < 0:
        raise ValueError("hop count must be non-negative")
    neighbors = _overlay_neighbors(g, overlay)
    wanted: list[SqNode] = [("s", inst.student_id)] + [("q", q) for q, _ in inst.history]
    known = lambda n: n in g.adjacency or (overlay is not None and n == ("s", overlay.student_id))
    seeds = [n for n in dict.fromkeys(wanted) if known(n)]
    skipped = tuple(n for n in dict.fromkeys(wanted) if not known(n))
    if not seeds:
        raise RetrievalError(f"no seed of student {inst.student_id!r} is in the S-Q graph")
    nodes, depth, truncated = bfs_order(neighbors, seeds, k, budget)
    attrs = {}
    for n in nodes:
        if overlay is not None and n == ("s", overlay.student_id):
            attrs[n] = overlay.theta
        else:
            attrs[n] = g.attribute(n)
    return Subgraph(tuple(nodes), tuple(depth), _induced_sq_edges(nodes, neighbors), tuple(seeds),
                    attrs, skipped, truncated)


def retrieve_kc_subgraph(g: KcGraph, target_kcs: Iterable[str], n: int = 2, budget: int | None = 512) -> Subgraph:
    """Every KC within ``n`` undirected hops of a target KC, with induced typed edges."""
    if n < 0:
        raise ValueError("hop count must be non-negative")
    wanted = list(dict.fromkeys(target_kcs))
    seeds = [c for c in wanted if c in g.nodes]
    if not seeds:
        raise RetrievalError(f"none of the target KCs {wanted} is in the KC graph")
    adj = {c: dict(nb) for c, nb in g.adjacency.items()}
    nodes, depth, truncated = bfs_order(lambda u: adj.get(u, {}), seeds, n, budget)
    kept = set(nodes)
    edges = tuple(e for e in g.edges if e.src in kept and e.dst in kept)
    return Subgraph(tuple(nodes), tuple(depth), edges, tuple(seeds), {c: g.nodes[c] for c in nodes},
                    tuple(c for c in wanted if c not in g.nodes), truncated)


def full_graph_view(seeds: Sequence[Node], all_nodes: Iterable[Node], budget: int) -> list[Node]:
    """Seeds, then the rest of the graph in id order, capped at ``budget``. No locality."""
    order = list(dict.fromkeys(seeds))
    seen = set(order)
    for v in sorted(all_nodes):
        if len(order) >= budget:
            break
        if v not in seen:
            order.append(v)
            seen.add(v)
    return order


class Retriever:
    """Cached, leak-free retrieval over fixed graphs.

    The target student's node is always rebuilt from the instance history, so
    responses after the prediction point never reach the subgraph. Results are
    keyed by the instance content and the graph ``version``.
    """

    def __init__(self, sq: SqGraph | None, kc: KcGraph | None, k: int = 2, n: int = 2, budget: int = 512,
                 topk_s: int = 20, irt_cfg: IrtConfig = IrtConfig(), version: str = ""):
        self.sq_graph, self.kc_graph = sq, kc
        self.k, self.n, self.budget, self.topk_s = k, n, budget, topk_s
        self.irt_cfg = irt_cfg
        self.version = version
        self._sorted_theta = sorted((v, s) for s, v in sq.theta.items()) if sq is not None else []
        self._sq_cache: dict[str, Subgraph] = {}
        self._kc_cache: dict[tuple, Subgraph] = {}

    def key(self, inst: PredictionInstance) -> str:
        blob = json.dumps([inst.student_id, inst.history, inst.target_question, self.k, self.n,
                           self.budget, self.version], separators=(",", ":"))
        return hashlib.blake2b(blob.encode(), digest_size=16).hexdigest()

    def overlay(self, inst: PredictionInstance) -> StudentOverlay:
        return condition_student(self.sq_graph, inst, self.topk_s, self.irt_cfg, self._sorted_theta)

    def sq(self, inst: PredictionInstance) -> Subgraph:
        key = self.key(inst)
        hit = self._sq_cache.get(key)
        if hit is None:
            hit = retrieve_sq_subgraph(self.sq_graph, inst, self.k, self.budget, self.overlay(inst))
            self._sq_cache[key] = hit
        return hit

    def kc(self, target_kcs: Iterable[str]) -> Subgraph:
        key = tuple(sorted(set(target_kcs)))
        hit = self._kc_cache.get(key)
        if hit is None:
            hit = retrieve_kc_subgraph(self.kc_graph, key, self.n, self.budget)
            self._kc_cache[key] = hit
        return hit

    def full_sq(self, inst: PredictionInstance) -> Subgraph:
        return full_sq_view(self.sq_graph, inst, self.budget, self.overlay(inst))

    def full_kc(self, target_kcs: Iterable[str]) -> Subgraph:
        return full_kc_view(self.kc_graph, target_kcs, self.budget)

    def dump_cache(self, fp: IO[str]) -> None:
        """Line-delimited records: instance key, retained node ids and edge endpoint ids."""
        for key, sub in sorted(self._sq_cache.items()):
            rec = {"key": key, "graph": "sq", "nodes": [list(n) for n in sub.nodes],
                   "edges": [[list(u), list(v)] for u, v, _ in sub.edges]}
            fp.write(json.dumps(rec, sort_keys=True) + "\n")
        for key, sub in sorted(self._kc_cache.items()):
            rec = {"key": list(key), "graph": "kc", "nodes": list(sub.nodes),
                   "edges": [[e.src, e.dst] for e in sub.edges]}
            fp.write(json.dumps(rec, sort_keys=True) + "\n")


def kc_edge_weights(edges: Iterable[KcEdge]) -> list[tuple[str, str, float]]:
    """Undirected (a, b, confidence) links, strongest confidence per pair."""
    best: dict[tuple[str, str], float] = {}
    for e in edges:
        a, b = sorted((e.src, e.dst))
        best[(a, b)] = max(best.get((a, b), 0.0), e.confidence)
    return [(a, b, w) for (a, b), w in sorted(best.items())]


def full_sq_view(g: SqGraph, inst: PredictionInstance, budget: int,
                 overlay: StudentOverlay | None = None) -> Subgraph:
    """The whole S-Q graph in id order behind the seeds, capped at ``budget``."""
    neighbors = _overlay_neighbors(g, overlay)
    wanted: list[SqNode] = [("s", inst.student_id)] + [("q", q) for q, _ in inst.history]
    extra = [("s", overlay.student_id)] if overlay is not None else []
    universe = set(g.adjacency) | set(extra)
    seeds = [n for n in dict.fromkeys(wanted) if n in universe]
    if not seeds:
        raise RetrievalError(f"no seed of student {inst.student_id!r} is in the S-Q graph")
    nodes = full_graph_view(seeds, universe, budget)
    attrs = {n: (overlay.theta if overlay is not None and n == ("s", overlay.student_id) else g.attribute(n))
             for n in nodes}
    return Subgraph(tuple(nodes), tuple(0 if n in seeds else -1 for n in nodes),
                    _induced_sq_edges(nodes, neighbors), tuple(seeds), attrs,
                    tuple(n for n in wanted if n not in universe), len(universe) > len(nodes))


def full_kc_view(g: KcGraph, target_kcs: Iterable[str], budget: int) -> Subgraph:
    wanted = list(dict.fromkeys(target_kcs))
    seeds = [c for c in wanted if c in g.nodes]
    if not seeds:
        raise RetrievalError(f"none of the target KCs {wanted} is in the KC graph")
    nodes = full_graph_view(seeds, g.nodes, budget)
    kept = set(nodes)
    return Subgraph(tuple(nodes), tuple(0 if n in seeds else -1 for n in nodes),
                    tuple(e for e in g.edges if e.src in kept and e.dst in kept), tuple(seeds),
                    {c: g.nodes[c] for c in nodes}, tuple(c for c in wanted if c not in g.nodes),
                    len(g.nodes) > len(nodes))

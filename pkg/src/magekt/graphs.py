"""Construction, validation and serialization of the S-Q and KC graphs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .core import ConceptProfile, InteractionLog, KcEdge, KcGraph, RelationType, SqGraph
from .irt import IrtParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphBuildConfig:
    sigma_q: float | None = None  # None -> std(b)
    sigma_s: float | None = None  # None -> std(theta)
    topk_q: int = 20
    topk_s: int = 20

    def __post_init__(self):
        for name in ("sigma_q", "sigma_s"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.topk_q < 1 or self.topk_s < 1:
            raise ValueError("topk must be >= 1")


def similarity_weight(x: float, y: float, sigma: float) -> float:
    """exp(-|x - y| / sigma)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    return math.exp(-abs(x - y) / sigma)


def _default_sigma(values: Sequence[float]) -> float:
    sd = float(np.std(np.asarray(values, dtype=np.float64))) if len(values) > 1 else 0.0
    return sd if sd > 0 else 1.0


def nearest_neighbors(values: Sequence[float], k: int) -> list[list[int]]:
    """Indices of the ``k`` closest values for each entry, excluding itself.

    Ties are broken by the smaller index. Candidates come from a window of
    ``k`` sorted positions on either side, widened to every entry within the
    k-th distance so that ties outside the window are not missed.
    """
    n = len(values)
    vals = np.asarray(values, dtype=np.float64)
    order = sorted(range(n), key=lambda i: (vals[i], i))
    rank = {idx: pos for pos, idx in enumerate(order)}
    out = []
    for i in range(n):
        pos = rank[i]
        lo, hi = max(0, pos - k), min(n, pos + k + 1)
        cands = sorted((abs(vals[order[p]] - vals[i]), order[p]) for p in range(lo, hi) if order[p] != i)
        if not cands:
            out.append([])
            continue
        radius = cands[min(k, len(cands)) - 1][0]
        while lo > 0 and abs(vals[order[lo - 1]] - vals[i]) <= radius:
            lo -= 1
        while hi < n and abs(vals[order[hi]] - vals[i]) <= radius:
            hi += 1
        cands = sorted((abs(vals[order[p]] - vals[i]), order[p]) for p in range(lo, hi) if order[p] != i)
        out.append([j for _, j in cands[:k]])
    return out


def _similarity_edges(ids: Sequence[str], values: Sequence[float], k: int, sigma: float) -> tuple[tuple[str, str, float], ...]:
    pairs: set[tuple[int, int]] = set()
    for i, nbrs in enumerate(nearest_neighbors(values, k)):
        for j in nbrs:
            pairs.add((i, j))
            pairs.add((j, i))
    return tuple((ids[i], ids[j], similarity_weight(values[i], values[j], sigma)) for i, j in sorted(pairs))


def build_sq_graph(log_: InteractionLog, params: IrtParams, cfg: GraphBuildConfig = GraphBuildConfig()) -> SqGraph:
    students = log_.students
    questions = log_.questions
    missing = [s for s in students if s not in params.theta] + [q for q in questions if q not in params.b]
    if missing:
        raise KeyError(f"missing IRT parameters for {missing[:5]}")
    theta = {s: params.theta[s] for s in students}
    b = {q: params.b[q] for q in questions}
    sigma_q = cfg.sigma_q or _default_sigma(list(b.values()))
    sigma_s = cfg.sigma_s or _default_sigma(list(theta.values()))
    qs = tuple((r.question_id, r.student_id, r.correct) for r in log_.records)
    qq = _similarity_edges(questions, [b[q] for q in questions], cfg.topk_q, sigma_q) if len(questions) > 1 else ()
    ss = _similarity_edges(students, [theta[s] for s in students], cfg.topk_s, sigma_s) if len(students) > 1 else ()
    return SqGraph(theta, b, qs, qq, ss, sigma_q, sigma_s, dict(log_.question_kcs))


# -- KC graph ------------------------------------------------------------

def _find_cycle(edges: Iterable[tuple[str, str]]) -> list[tuple[str, str]] | None:
    """Return the edges of one directed cycle, or None. Deterministic order."""
    adj: dict[str, list[str]] = defaultdict(list)
    for a, c in sorted(set(edges)):
        adj[a].append(c)
    color: dict[str, int] = {}
    parent: dict[str, str] = {}
    for root in sorted(adj):
        if color.get(root):
            continue
        stack = [(root, iter(adj[root]))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                continue
            state = color.get(nxt, 0)
            if state == 0:
                color[nxt] = 1
                parent[nxt] = node
                stack.append((nxt, iter(adj.get(nxt, ()))))
            elif state == 1:
                cycle = [(node, nxt)]
                cur = node
                while cur != nxt:
                    cycle.append((parent[cur], cur))
                    cur = parent[cur]
                return cycle[::-1]
    return None


def creates_cycle(edges: Iterable[tuple[str, str]], new: tuple[str, str]) -> bool:
    """True if adding ``new`` to the acyclic edge set would close a cycle."""
    adj: dict[str, list[str]] = defaultdict(list)
    for a, c in edges:
        adj[a].append(c)
    src, dst = new
    if src == dst:
        return True
    seen, frontier = {dst}, [dst]
    while frontier:
        node = frontier.pop()
        for nxt in adj.get(node, ()):
            if nxt == src:
                return True
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return False


def build_kc_graph(decisions: Sequence, concepts: Mapping[str, ConceptProfile] | Iterable[str]) -> KcGraph:
    """Assemble a KcGraph from relation decisions.

    Each decision needs ``pair`` (src, dst), ``final_type`` and ``confidence``;
    ``evidence`` is optional. Conflicting decisions for one unordered pair keep
    the highest confidence; a tie between different types yields no edge.
    Cycles among PredecessorSuccessor or Containment edges are broken by
    dropping the lowest-confidence edge on the cycle, and each drop is noted.
    """
    if not isinstance(concepts, Mapping):
        concepts = {k: ConceptProfile(k, k) for k in concepts}
    nodes = dict(sorted(concepts.items()))
    notes: list[str] = []

    by_pair: dict[frozenset, list] = defaultdict(list)
    for d in decisions:
        a, c = d.pair
        for k in (a, c):
            if k not in nodes:
                raise KeyError(f"decision references unknown KC {k!r}")
        if a == c:
            notes.append(f"self-relation on {a!r} ignored")
            continue
        by_pair[frozenset((a, c))].append(d)

    chosen: list[tuple[str, str, RelationType, float, str]] = []
    for key in sorted(by_pair, key=lambda p: tuple(sorted(p))):
        cands = by_pair[key]
        top = max(d.confidence for d in cands)
        best = [d for d in cands if d.confidence == top]
        kinds = {(RelationType.parse(d.final_type), d.pair if RelationType.parse(d.final_type).directed
                  else tuple(sorted(d.pair))) for d in best}
        if len(kinds) > 1:
            notes.append(f"conflicting decisions for {tuple(sorted(key))} at confidence {top:.3f}; no edge")
            continue
        d = best[0]
        rtype = RelationType.parse(d.final_type)
        if rtype is RelationType.NONE:
            continue
        chosen.append((d.pair[0], d.pair[1], rtype, float(d.confidence), getattr(d, "evidence", "") or ""))

    for rtype in (RelationType.PREDECESSOR_SUCCESSOR, RelationType.CONTAINMENT):
        while True:
            typed = {(a, c): conf for a, c, t, conf, _ in chosen if t is rtype}
            cycle = _find_cycle(typed)
            if cycle is None:
                break
            weakest = min(cycle, key=lambda e: (typed[e], e))
            notes.append(f"{rtype.value} cycle {' -> '.join([e[0] for e in cycle] + [cycle[0][0]])}; "
                         f"dropped {weakest[0]}->{weakest[1]}")
            chosen = [e for e in chosen if not (e[2] is rtype and (e[0], e[1]) == weakest)]

    edges: list[KcEdge] = []
    for a, c, rtype, conf, ev in chosen:
        edges.append(KcEdge(a, c, rtype, conf, ev))
        if rtype.symmetric:
            edges.append(KcEdge(c, a, rtype, conf, ev))
    edges.sort(key=lambda e: (e.src, e.dst, e.type.value))
    for n in notes:
        log.info("kc graph: %s", n)
    return KcGraph(nodes, tuple(edges), tuple(notes))


def validate_kc_axioms(graph: KcGraph) -> list[str]:
    violations = []
    for rtype in (RelationType.PREDECESSOR_SUCCESSOR, RelationType.CONTAINMENT):
        remaining = {(e.src, e.dst) for e in graph.edges if e.type is rtype}
        # Report each cycle once by removing one of its edges and searching again.
        while (cycle := _find_cycle(remaining)) is not None:
            label = "prerequisite" if rtype is RelationType.PREDECESSOR_SUCCESSOR else "containment"
            violations.append(f"{label} cycle: {' -> '.join([e[0] for e in cycle] + [cycle[0][0]])}")
            remaining.discard(cycle[0])

    directed = {(e.src, e.dst, e.type) for e in graph.edges}
    for e in sorted(graph.edges, key=lambda e: (e.src, e.dst, e.type.value)):
        if e.type.symmetric and (e.dst, e.src, e.type) not in directed:
            violations.append(f"asymmetric {e.type.value} storage: {e.src}->{e.dst} without reverse")

    types_per_pair: dict[tuple[str, str], set[RelationType]] = defaultdict(set)
    for e in graph.edges:
        types_per_pair[tuple(sorted((e.src, e.dst)))].add(e.type)
    for pair in sorted(types_per_pair):
        kinds = types_per_pair[pair]
        if len(kinds) > 1:
            violations.append(f"pair {pair} carries {len(kinds)} relation types: "
                              f"{sorted(k.value for k in kinds)}")
    return violations


# -- serialization -------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def dump_sq_graph(g: SqGraph, fp: IO[str], meta: dict | None = None) -> None:
    if meta is not None:
        fp.write(_dumps({"_meta": meta}) + "\n")
    fp.write(_dumps({"record": "config", "sigma_q": g.sigma_q, "sigma_s": g.sigma_s}) + "\n")
    for s in sorted(g.theta):
        fp.write(_dumps({"record": "node", "kind": "student", "id": s, "theta": g.theta[s]}) + "\n")
    for q in sorted(g.b):
        fp.write(_dumps({"record": "node", "kind": "question", "id": q, "b": g.b[q],
                         "kcs": list(g.question_kcs.get(q, ()))}) + "\n")
    for q, s, r in g.qs_edges:
        fp.write(_dumps({"record": "edge", "kind": "qs", "src": q, "dst": s, "label": r}) + "\n")
    for kind, edges in (("qq", g.qq_edges), ("ss", g.ss_edges)):
        for a, c, w in edges:
            fp.write(_dumps({"record": "edge", "kind": kind, "src": a, "dst": c, "weight": w}) + "\n")


def load_sq_graph(lines: Iterable[str]) -> SqGraph:
    theta, b, qkcs = {}, {}, {}
    qs, qq, ss = [], [], []
    sigma_q = sigma_s = 1.0
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        rec = d.get("record")
        if rec == "config":
            sigma_q, sigma_s = d["sigma_q"], d["sigma_s"]
        elif rec == "node" and d["kind"] == "student":
            theta[d["id"]] = d["theta"]
        elif rec == "node":
            b[d["id"]] = d["b"]
            qkcs[d["id"]] = tuple(d.get("kcs", ()))
        elif rec == "edge" and d["kind"] == "qs":
            qs.append((d["src"], d["dst"], int(d["label"])))
        elif rec == "edge":
            (qq if d["kind"] == "qq" else ss).append((d["src"], d["dst"], d["weight"]))
    return SqGraph(theta, b, tuple(qs), tuple(qq), tuple(ss), sigma_q, sigma_s, qkcs)


def dump_kc_graph(g: KcGraph, fp: IO[str], meta: dict | None = None) -> None:
    if meta is not None:
        fp.write(_dumps({"_meta": meta}) + "\n")
    for k in sorted(g.nodes):
        p = g.nodes[k]
        fp.write(_dumps({"record": "node", "id": k, "name": p.name, "definition": p.definition,
                         "category": p.category, "degraded": p.degraded}) + "\n")
    for e in g.edges:
        fp.write(_dumps({"record": "edge", "src": e.src, "dst": e.dst, "type": e.type.value,
                         "confidence": e.confidence, "evidence": e.evidence}) + "\n")
    for n in g.notes:
        fp.write(_dumps({"record": "note", "text": n}) + "\n")


def load_kc_graph(lines: Iterable[str]) -> KcGraph:
    nodes, edges, notes = {}, [], []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        rec = d.get("record")
        if rec == "node":
            nodes[d["id"]] = ConceptProfile(d["id"], d["name"], d.get("definition", ""),
                                            d.get("category", ""), d.get("degraded", False))
        elif rec == "edge":
            edges.append(KcEdge(d["src"], d["dst"], RelationType.parse(d["type"]),
                                float(d["confidence"]), d.get("evidence", "")))
        elif rec == "note":
            notes.append(d["text"])
    return KcGraph(nodes, tuple(edges), tuple(notes))


def graph_fingerprint(*paths) -> str:
    """Content hash of serialized graph files; used to pair checkpoints with graphs."""
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fp:
            h.update(fp.read())
    return h.hexdigest()[:16]

"""Domain types shared across the pipeline.

Identifiers are opaque strings. Graph builders intern them to dense integer
indices (sorted order) when they need arrays.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping


class RelationType(str, enum.Enum):
    ASSOCIATION = "Association"
    CONTAINMENT = "Containment"
    EQUIVALENCE = "Equivalence"
    SIBLING = "Sibling"
    PREDECESSOR_SUCCESSOR = "PredecessorSuccessor"
    NONE = "None"

    @property
    def symmetric(self) -> bool:
        return self in SYMMETRIC_TYPES

    @property
    def directed(self) -> bool:
        return self in (RelationType.CONTAINMENT, RelationType.PREDECESSOR_SUCCESSOR)

    @classmethod
    def parse(cls, value: str | "RelationType") -> "RelationType":
        if isinstance(value, RelationType):
            return value
        key = str(value).strip().replace("-", "").replace("_", "").replace(" ", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        aliases = {"prerequisite": cls.PREDECESSOR_SUCCESSOR, "predecessor": cls.PREDECESSOR_SUCCESSOR,
                   "none": cls.NONE, "norelation": cls.NONE, "null": cls.NONE}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown relation type {value!r}")


SYMMETRIC_TYPES = frozenset({RelationType.ASSOCIATION, RelationType.EQUIVALENCE, RelationType.SIBLING})
RELATION_TYPES = tuple(t for t in RelationType if t is not RelationType.NONE)


@dataclass(frozen=True)
class Interaction:
    student_id: str
    question_id: str
    kc_ids: tuple[str, ...]
    correct: int
    timestamp: float

    def __post_init__(self):
        object.__setattr__(self, "kc_ids", tuple(sorted(set(self.kc_ids))))


@dataclass(frozen=True)
class InteractionLog:
    """Time-ordered interaction records.

    ``records`` keeps the order it was given; per-student views are stable
    sorted by timestamp, so ties keep file order.
    """

    records: tuple[Interaction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @cached_property
    def by_student(self) -> dict[str, tuple[Interaction, ...]]:
        groups: dict[str, list[Interaction]] = defaultdict(list)
        for rec in self.records:
            groups[rec.student_id].append(rec)
        return {s: tuple(sorted(recs, key=lambda r: r.timestamp)) for s, recs in groups.items()}

    @cached_property
    def students(self) -> tuple[str, ...]:
        return tuple(sorted({r.student_id for r in self.records}))

    @cached_property
    def questions(self) -> tuple[str, ...]:
        return tuple(sorted({r.question_id for r in self.records}))

    @cached_property
    def kcs(self) -> tuple[str, ...]:
        return tuple(sorted({k for r in self.records for k in r.kc_ids}))

    @cached_property
    def question_kcs(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, set[str]] = defaultdict(set)
        for r in self.records:
            out[r.question_id].update(r.kc_ids)
        return {q: tuple(sorted(k)) for q, k in out.items()}

    def subset(self, students: Iterable[str]) -> "InteractionLog":
        keep = set(students)
        return InteractionLog(tuple(r for r in self.records if r.student_id in keep))


def validate_log(log: InteractionLog) -> list[str]:
    """Return one message per invariant violation; empty when the log is clean."""
    violations = []
    last_seen: dict[str, tuple[int, float]] = {}
    for i, rec in enumerate(log.records):
        if not rec.kc_ids:
            violations.append(f"record {i}: empty kc_ids")
        if rec.correct not in (0, 1):
            violations.append(f"record {i}: correct={rec.correct!r} not in {{0,1}}")
        prev = last_seen.get(rec.student_id)
        if prev is not None and rec.timestamp < prev[1]:
            violations.append(
                f"record {i}: timestamp order violated for student {rec.student_id!r} "
                f"({rec.timestamp} after {prev[1]} at record {prev[0]})"
            )
        last_seen[rec.student_id] = (i, rec.timestamp)
    return violations


@dataclass(frozen=True)
class ConceptProfile:
    kc_id: str
    name: str
    definition: str = ""
    category: str = ""
    degraded: bool = False

    @property
    def complete(self) -> bool:
        return bool(self.definition) and bool(self.category)


@dataclass(frozen=True)
class KcEdge:
    src: str
    dst: str
    type: RelationType
    confidence: float
    evidence: str = ""


@dataclass(frozen=True)
class KcGraph:
    """Typed KC-KC graph. Symmetric relation types are stored in both directions."""

    nodes: Mapping[str, ConceptProfile]
    edges: tuple[KcEdge, ...] = ()
    notes: tuple[str, ...] = ()

    @cached_property
    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(sorted(self.nodes))}

    @cached_property
    def adjacency(self) -> dict[str, tuple[tuple[str, float], ...]]:
        """Direction-agnostic neighbor lists with edge confidence."""
        adj: dict[str, dict[str, float]] = {k: {} for k in self.nodes}
        for e in self.edges:
            adj[e.src][e.dst] = max(adj[e.src].get(e.dst, 0.0), e.confidence)
            adj[e.dst][e.src] = max(adj[e.dst].get(e.src, 0.0), e.confidence)
        return {k: tuple(sorted(v.items())) for k, v in adj.items()}

    def typed_edges(self) -> set[tuple[str, str, RelationType]]:
        return {(e.src, e.dst, e.type) for e in self.edges}


@dataclass(frozen=True)
class SqGraph:
    """Student-question graph carrying IRT attributes.

    ``qq_edges`` and ``ss_edges`` hold both directions of every similarity
    link; ``qs_edges`` holds one (question, student, correct) entry per
    interaction.
    """

    theta: Mapping[str, float]
    b: Mapping[str, float]
    qs_edges: tuple[tuple[str, str, int], ...]
    qq_edges: tuple[tuple[str, str, float], ...]
    ss_edges: tuple[tuple[str, str, float], ...]
    sigma_q: float = 1.0
    sigma_s: float = 1.0
    question_kcs: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @cached_property
    def adjacency(self) -> dict[tuple[str, str], dict[tuple[str, str], float]]:
        """Undirected adjacency over ("s", id) / ("q", id) node keys.

        Parallel qs edges (repeat attempts) accumulate weight 1.0 each.
        """
        adj: dict[tuple[str, str], dict[tuple[str, str], float]] = {}
        for s in self.theta:
            adj[("s", s)] = {}
        for q in self.b:
            adj[("q", q)] = {}
        for q, s, _ in self.qs_edges:
            qn, sn = ("q", q), ("s", s)
            adj[qn][sn] = adj[qn].get(sn, 0.0) + 1.0
            adj[sn][qn] = adj[sn].get(qn, 0.0) + 1.0
        for a, c, w in self.qq_edges:
            adj[("q", a)][("q", c)] = w
        for a, c, w in self.ss_edges:
            adj[("s", a)][("s", c)] = w
        return adj

    def attribute(self, node: tuple[str, str]) -> float:
        kind, ident = node
        return self.theta[ident] if kind == "s" else self.b[ident]

"""Interaction-history evidence for KC pairs."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Mapping

from ..core import ConceptProfile, InteractionLog

STOPWORDS = frozenset(
    "a an and are as at by concept concepts for in is of on or the to with".split()
)


def tokens(text: str) -> frozenset[str]:
    return frozenset(re.findall(r"[a-z0-9]+", text.lower())) - STOPWORDS


def profile_tokens(p: ConceptProfile) -> frozenset[str]:
    return tokens(f"{p.name} {p.definition}")


def jaccard(a: frozenset, b: frozenset) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


@dataclass(frozen=True)
class PairEvidence:
    """Behavioral and lexical evidence for an ordered KC pair (a, b).

    ``precedence_prob`` and ``dependence`` read in the a -> b direction; the
    ``reverse_*`` fields hold the b -> a values. ``support_a`` / ``support_b``
    count students who attempted each KC at all.
    """

    a: str
    b: str
    cooccurrence: int = 0
    precedence_prob: float = 0.0
    reverse_precedence_prob: float = 0.0
    dependence: float = 0.0
    reverse_dependence: float = 0.0
    name_overlap: float = 0.0
    support_a: int = 0
    support_b: int = 0

    @property
    def co_attempt_share(self) -> float:
        """Co-occurrence normalized by the rarer KC's student count."""
        lo = min(self.support_a, self.support_b)
        return self.cooccurrence / lo if lo else 0.0

    def swapped(self) -> "PairEvidence":
        return PairEvidence(self.b, self.a, self.cooccurrence, self.reverse_precedence_prob,
                            self.precedence_prob, self.reverse_dependence, self.dependence,
                            self.name_overlap, self.support_b, self.support_a)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["co_attempt_share"] = self.co_attempt_share
        return d


class EvidenceIndex:
    """Per-student KC positions, built once per log and queried per pair."""

    def __init__(self, log: InteractionLog):
        self.first: dict[str, dict[str, int]] = {}
        self.attempts: dict[str, dict[str, list[tuple[int, int]]]] = {}
        self.students_by_kc: dict[str, set[str]] = defaultdict(set)
        for student, seq in log.by_student.items():
            first: dict[str, int] = {}
            att: dict[str, list[tuple[int, int]]] = defaultdict(list)
            for pos, rec in enumerate(seq):
                for kc in rec.kc_ids:
                    first.setdefault(kc, pos)
                    att[kc].append((pos, rec.correct))
                    self.students_by_kc[kc].add(student)
            self.first[student] = first
            self.attempts[student] = dict(att)

    def support(self, kc: str) -> int:
        return len(self.students_by_kc.get(kc, ()))

    def cooccurrence(self, a: str, b: str) -> int:
        return len(self.students_by_kc.get(a, set()) & self.students_by_kc.get(b, set()))

    def _directional(self, a: str, b: str, students) -> tuple[float, float]:
        before = [s for s in students if self.first[s][a] < self.first[s][b]]
        prec = len(before) / len(students) if students else 0.0
        # Pool B accuracy separately for students whose earlier A work was
        # mostly correct versus mostly wrong.
        hits = [0, 0]
        tries = [0, 0]
        for s in before:
            fb = self.first[s][b]
            prior = [c for pos, c in self.attempts[s][a] if pos < fb]
            group = 1 if sum(prior) * 2 >= len(prior) else 0
            outcomes = [c for _, c in self.attempts[s][b]]
            hits[group] += sum(outcomes)
            tries[group] += len(outcomes)
        if tries[0] == 0 or tries[1] == 0:
            return prec, 0.0
        return prec, hits[1] / tries[1] - hits[0] / tries[0]

    def pair(self, a: str, b: str, profiles: Mapping[str, ConceptProfile] | None = None) -> PairEvidence:
        if a == b:
            raise ValueError("pair evidence needs two distinct KCs")
        for k in (a, b):
            if k not in self.students_by_kc and (profiles is None or k not in profiles):
                raise KeyError(f"unknown KC {k!r}")
        both = sorted(self.students_by_kc.get(a, set()) & self.students_by_kc.get(b, set()))
        prec_ab, dep_ab = self._directional(a, b, both)
        prec_ba, dep_ba = self._directional(b, a, both)
        overlap = 0.0
        if profiles is not None and a in profiles and b in profiles:
            overlap = jaccard(profile_tokens(profiles[a]), profile_tokens(profiles[b]))
        return PairEvidence(a, b, len(both), prec_ab, prec_ba, dep_ab, dep_ba, overlap,
                            self.support(a), self.support(b))


def compute_pair_evidence(log: InteractionLog, a: str, b: str,
                          profiles: Mapping[str, ConceptProfile] | None = None) -> PairEvidence:
    return EvidenceIndex(log).pair(a, b, profiles)

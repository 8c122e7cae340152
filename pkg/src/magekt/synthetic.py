"""Synthetic data with planted structure.

``planted_kc_world`` fixes a 30-concept graph covering all five relation
types; ``generate_relation_log`` simulates students whose behavior follows
that graph. ``generate_kt_log`` produces a small Rasch-style dataset with
per-student ability drift for overfit checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import Interaction, InteractionLog, RelationType

P = RelationType.PREDECESSOR_SUCCESSOR
C = RelationType.CONTAINMENT
E = RelationType.EQUIVALENCE
S = RelationType.SIBLING
A = RelationType.ASSOCIATION


@dataclass(frozen=True)
class PlantedEdge:
    src: str
    dst: str
    type: RelationType
    weak: bool = False


@dataclass(frozen=True)
class PlantedWorld:
    names: dict[str, str]
    edges: tuple[PlantedEdge, ...]

    @property
    def gold(self) -> set[tuple[str, str, RelationType]]:
        return {(e.src, e.dst, e.type) for e in self.edges}


def planted_kc_world() -> PlantedWorld:
    """Thirty KCs: 4 part-whole families, 3 renamed pairs, 2 prerequisite chains, 2 associations.

    Two chain links are "weak": many students take them out of order, so only
    the one-sided correctness dependence gives them away.
    """
    names: dict[str, str] = {}
    edges: list[PlantedEdge] = []
    families = [("fractions", "fraction addition", "fraction subtraction"),
                ("decimals", "decimal rounding", "decimal comparison"),
                ("angles", "angle measurement", "angle bisection"),
                ("polynomials", "polynomial factoring", "polynomial division")]
    for f, (parent, c1, c2) in enumerate(families):
        ids = [f"kc_f{f}_{j}" for j in range(3)]
        names.update(zip(ids, (parent, c1, c2)))
        edges += [PlantedEdge(ids[0], ids[1], C), PlantedEdge(ids[0], ids[2], C),
                  PlantedEdge(ids[1], ids[2], S)]
    renamed = [("LCM", "least common multiples"), ("GCD", "Greatest Common Divisor"),
               ("Pythagoras theorem", "pythagorean theorem")]
    for i, (n1, n2) in enumerate(renamed):
        a, b = f"kc_e{i}_0", f"kc_e{i}_1"
        names[a], names[b] = n1, n2
        edges.append(PlantedEdge(a, b, E))
    chains = [("counting", "place value", "number line", "estimation"),
              ("variables", "expressions", "solving systems", "graphing lines")]
    weak_links = {(0, 1), (1, 2)}
    for c, chain in enumerate(chains):
        ids = [f"kc_p{c}_{j}" for j in range(len(chain))]
        names.update(zip(ids, chain))
        for j in range(len(ids) - 1):
            edges.append(PlantedEdge(ids[j], ids[j + 1], P, weak=(c, j) in weak_links))
    assoc = [("area", "perimeter"), ("mean", "median")]
    for i, (n1, n2) in enumerate(assoc):
        a, b = f"kc_a{i}_0", f"kc_a{i}_1"
        names[a], names[b] = n1, n2
        edges.append(PlantedEdge(a, b, A))
    assert len(names) == 30
    return PlantedWorld(dict(sorted(names.items())), tuple(edges))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def generate_relation_log(world: PlantedWorld | None = None, n_students: int = 2000, episodes: int = 3,
                          attempts: int = 5, questions_per_kc: int = 3, seed: int = 0,
                          strong_reversal: float = 0.1, weak_reversal: float = 0.35,
                          ability_sd: float = 0.5, transfer: float = 2.5) -> InteractionLog:
    """Simulate practice sessions, one planted edge per session.

    Prerequisite sessions usually cover the source first, and mastering the
    source lifts accuracy on the target only when it was studied first. Other
    relation types interleave both concepts in random order.
    """
    world = world or planted_kc_world()
    rng = np.random.default_rng(seed)
    kcs = sorted(world.names)
    difficulty = {(k, j): float(rng.normal(0.0, 0.7)) for k in kcs for j in range(questions_per_kc)}
    records: list[Interaction] = []
    for s in range(n_students):
        sid = f"s{s:04d}"
        theta = float(rng.normal(0.0, ability_sd))
        t = 0
        mastered: dict[str, bool] = {}
        chosen = rng.choice(len(world.edges), size=min(episodes, len(world.edges)), replace=False)
        for e_idx in chosen:
            edge = world.edges[int(e_idx)]
            for k in (edge.src, edge.dst):
                if k not in mastered:
                    mastered[k] = rng.random() < _sigmoid(theta)

            def attempt(kc: str, boost: float) -> None:
                nonlocal t
                j = int(rng.integers(questions_per_kc))
                p = _sigmoid(theta - difficulty[(kc, j)] + boost)
                records.append(Interaction(sid, f"{kc}_q{j}", (kc,), int(rng.random() < p), float(t)))
                t += 1

            def own(kc: str, effect: float = 0.5) -> float:
                return effect if mastered[kc] else -effect

            if edge.type is P:
                reversal = weak_reversal if edge.weak else strong_reversal
                if rng.random() >= reversal:
                    for _ in range(attempts):
                        attempt(edge.src, own(edge.src, 1.5))
                    lift = transfer if mastered[edge.src] else -transfer
                    for _ in range(attempts):
                        attempt(edge.dst, lift)
                else:
                    for _ in range(attempts):
                        attempt(edge.dst, -0.3)
                    for _ in range(attempts):
                        attempt(edge.src, own(edge.src, 1.5))
            else:
                order = [edge.src] * attempts + [edge.dst] * attempts
                rng.shuffle(order)
                for kc in order:
                    attempt(kc, own(kc))
    return InteractionLog(tuple(records))


def generate_kt_log(n_students: int = 20, n_questions: int = 10, n_kcs: int = 5, length: int = 60,
                    seed: int = 0, ability_sd: float = 3.0, difficulty_span: float = 6.0,
                    max_drift: float = 0.04) -> tuple[InteractionLog, dict]:
    """Rasch responses with a per-student upward ability drift.

    Returns the log and the planted parameters (theta at t=0, drift, b).
    """
    rng = np.random.default_rng(seed)
    b = np.linspace(-difficulty_span, difficulty_span, n_questions)
    q_kc = {q: f"k{q % n_kcs}" for q in range(n_questions)}
    theta0 = rng.normal(0.0, ability_sd, n_students)
    drift = rng.uniform(0.0, max_drift, n_students)
    sw, qw = max(2, len(str(n_students - 1))), max(2, len(str(n_questions - 1)))
    sid = [f"s{s:0{sw}d}" for s in range(n_students)]
    qid = [f"q{q:0{qw}d}" for q in range(n_questions)]
    records = []
    for s in range(n_students):
        for t in range(length):
            q = int(rng.integers(n_questions))
            p = _sigmoid(theta0[s] + drift[s] * t - b[q])
            records.append(Interaction(sid[s], qid[q], (q_kc[q],), int(rng.random() < p), float(t)))
    planted = {"theta0": {sid[s]: float(theta0[s]) for s in range(n_students)},
               "drift": {sid[s]: float(drift[s]) for s in range(n_students)},
               "b": {qid[q]: float(b[q]) for q in range(n_questions)}}
    return InteractionLog(tuple(records)), planted


def write_interactions_csv(log: InteractionLog, path: Path | str, kc_delimiter: str = ";") -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["user_id", "problem_id", "skill_id", "correct", "timestamp"])
        for r in log.records:
            w.writerow([r.student_id, r.question_id, kc_delimiter.join(r.kc_ids), r.correct, r.timestamp])


def write_kc_names(names: dict[str, str], path: Path | str) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["kc_id", "name"])
        for k, n in sorted(names.items()):
            w.writerow([k, n])


def read_kc_names(path: Path | str) -> dict[str, str]:
    with open(path, newline="") as fp:
        return {row["kc_id"]: row["name"] for row in csv.DictReader(fp)}


def gold_rows(edges: Iterable[PlantedEdge]) -> list[tuple[str, str, RelationType]]:
    return [(e.src, e.dst, e.type) for e in edges]

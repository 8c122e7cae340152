"""Relation-extraction quality against a gold edge list.

Edges compare in canonical form: directed types keep (src, dst), symmetric
types use the sorted pair.

* Pred: share of gold pairs (unordered) for which any relation is predicted.
* Corr: share of gold edges predicted with the same type and direction.
* Jacc: |P & G| / |P | G| over canonical typed edges.

All three are percentages.
"""

from __future__ import annotations

import csv
from typing import IO, Iterable

from ..core import KcGraph, RelationType

METRIC_HEADER = ("Pred = % of gold pairs with any predicted relation; "
                 "Corr = % of gold edges predicted with matching type and direction; "
                 "Jacc = % |P&G|/|P|G| over canonical typed edges")


def canonical(src: str, dst: str, rtype: RelationType | str) -> tuple[str, str, RelationType]:
    rtype = RelationType.parse(rtype)
    if rtype.symmetric:
        src, dst = sorted((src, dst))
    return src, dst, rtype


def canonical_edges(edges: Iterable[tuple[str, str, RelationType | str]]) -> set[tuple[str, str, RelationType]]:
    return {canonical(a, b, t) for a, b, t in edges if RelationType.parse(t) is not RelationType.NONE}


def evaluate_relations(predicted: KcGraph | Iterable[tuple[str, str, RelationType | str]],
                       gold: Iterable[tuple[str, str, RelationType | str]]) -> tuple[float, float, float]:
    pred_edges = canonical_edges(predicted.typed_edges() if isinstance(predicted, KcGraph) else predicted)
    gold_edges = canonical_edges(gold)
    if not gold_edges:
        raise ValueError("gold relation set is empty")
    pred_pairs = {frozenset((a, b)) for a, b, _ in pred_edges}
    pred_pct = 100.0 * sum(frozenset((a, b)) in pred_pairs for a, b, _ in gold_edges) / len(gold_edges)
    corr_pct = 100.0 * len(gold_edges & pred_edges) / len(gold_edges)
    jacc_pct = 100.0 * len(gold_edges & pred_edges) / len(gold_edges | pred_edges)
    return pred_pct, corr_pct, jacc_pct


def load_gold(fp: IO[str]) -> set[tuple[str, str, RelationType]]:
    """Read ``src,dst,type`` lines; a header row and ``#`` comments are skipped."""
    out = set()
    for row in csv.reader(line for line in fp if line.strip() and not line.lstrip().startswith("#")):
        if len(row) < 3:
            raise ValueError(f"gold line needs src,dst,type: {row}")
        src, dst, rtype = (c.strip() for c in row[:3])
        if (src, dst, rtype.lower()) == ("src", "dst", "type"):
            continue
        out.add((src, dst, RelationType.parse(rtype)))
    return out


def dump_gold(edges: Iterable[tuple[str, str, RelationType | str]], fp: IO[str]) -> None:
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(["src", "dst", "type"])
    for a, b, t in sorted(canonical_edges(edges), key=lambda e: (e[0], e[1], e[2].value)):
        writer.writerow([a, b, t.value])

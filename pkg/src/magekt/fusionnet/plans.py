"""Turning retrieved subgraphs into token plans, and plans into padded batches.

A plan is the id-level description of one prediction step: which embedding
rows form the concept, question and student sequences, the scalar features,
the response flags and the weighted links used by the neighborhood mean.
Plans are computed once per (window, step) and reused across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from ..core import KcGraph, SqGraph
from ..ingest import Window
from ..retrieval import PredictionInstance, Retriever, RetrievalError, Subgraph, kc_edge_weights

VARIANTS = ("full", "no_asyatt", "no_kc_graph", "no_sq_graph", "no_subgraph")

# Response flags on question tokens.
NO_RESPONSE, INCORRECT, CORRECT = 0, 1, 2


@dataclass(frozen=True)
class Vocab:
    """Dense row indices for embedding tables. Unknown ids map to -1."""

    students: Mapping[str, int]
    questions: Mapping[str, int]
    kcs: Mapping[str, int]

    @classmethod
    def build(cls, students: Iterable[str], questions: Iterable[str], kcs: Iterable[str]) -> "Vocab":
        def intern(ids):
            return {k: i for i, k in enumerate(sorted(set(ids)))}
        return cls(intern(students), intern(questions), intern(kcs))

    @classmethod
    def from_graphs(cls, sq: SqGraph, kc: KcGraph | None, extra_kcs: Iterable[str] = ()) -> "Vocab":
        kc_ids = set(extra_kcs) | set(kc.nodes if kc is not None else ())
        for ks in sq.question_kcs.values():
            kc_ids.update(ks)
        return cls.build(sq.theta, sq.b, kc_ids)

    def to_dict(self) -> dict:
        return {"students": sorted(self.students), "questions": sorted(self.questions), "kcs": sorted(self.kcs)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls.build(d["students"], d["questions"], d["kcs"])


@dataclass(frozen=True)
class StepPlan:
    kc_idx: np.ndarray       # int64 [Lk]
    kc_targets: int          # first positions holding the target KCs
    kc_links: np.ndarray     # int64 [E, 2], both directions
    kc_w: np.ndarray         # float64 [E]
    q_idx: np.ndarray        # int64 [Lq], target question first
    q_feat: np.ndarray       # float64 [Lq] difficulty
    q_resp: np.ndarray       # int64 [Lq] response flag
    s_idx: np.ndarray        # int64 [Ls], target student first
    s_feat: np.ndarray       # float64 [Ls] ability
    sq_links: np.ndarray     # int64 [E, 2] over positions [questions..., students...]
    sq_w: np.ndarray
    label: int


def _links(pairs: Sequence[tuple[int, int, float]]) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    both = [(a, b, w) for a, b, w in pairs] + [(b, a, w) for a, b, w in pairs]
    return np.array([(a, b) for a, b, _ in both], dtype=np.int64), np.array([w for *_, w in both], dtype=np.float64)


def plan_kc(target_kcs: Sequence[str], sub: Subgraph | None, vocab: Vocab) -> tuple:
    targets = list(dict.fromkeys(target_kcs))
    order = targets + ([n for n in sub.nodes if n not in set(targets)] if sub is not None else [])
    pos = {k: i for i, k in enumerate(order)}
    idx = np.array([vocab.kcs.get(k, -1) for k in order], dtype=np.int64)
    pairs = []
    if sub is not None:
        pairs = [(pos[a], pos[b], w) for a, b, w in kc_edge_weights(sub.edges)]
    links, w = _links(pairs)
    return idx, len(targets), links, w


def plan_sq(inst: PredictionInstance, sub: Subgraph | None, vocab: Vocab, b: Mapping[str, float],
            theta_hint: float = 0.0, features: bool = True) -> tuple:
    """Token layout: questions (target first) then students (target first)."""
    last_resp = {q: r for q, r in inst.history}
    target_q, target_s = ("q", inst.target_question), ("s", inst.student_id)
    if sub is None:
        q_nodes, s_nodes, attrs, edges = [target_q], [target_s], {}, ()
    else:
        q_nodes = [target_q] + [n for n in sub.nodes if n[0] == "q" and n != target_q]
        s_nodes = [target_s] + [n for n in sub.nodes if n[0] == "s" and n != target_s]
        attrs, edges = sub.attributes, sub.edges
    order = q_nodes + s_nodes
    pos = {n: i for i, n in enumerate(order)}
    q_idx = np.array([vocab.questions.get(n[1], -1) for n in q_nodes], dtype=np.int64)
    s_idx = np.array([vocab.students.get(n[1], -1) for n in s_nodes], dtype=np.int64)
    if features:
        q_feat = np.array([float(attrs.get(n, b.get(n[1], 0.0))) for n in q_nodes])
        s_feat = np.array([float(attrs.get(n, theta_hint)) for n in s_nodes])
    else:
        q_feat, s_feat = np.zeros(len(q_nodes)), np.zeros(len(s_nodes))
    q_resp = np.array([INCORRECT + last_resp[n[1]] if n[1] in last_resp else NO_RESPONSE for n in q_nodes],
                      dtype=np.int64)
    links, w = _links([(pos[u], pos[v], wt) for u, v, wt in edges])
    return q_idx, q_feat, q_resp, s_idx, s_feat, links, w


def plan_step(inst: PredictionInstance, label: int, retriever: Retriever, vocab: Vocab,
              variant: str = "full") -> StepPlan:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    kc_sub = None
    if variant != "no_kc_graph" and retriever.kc_graph is not None:
        try:
            kc_sub = retriever.full_kc(inst.target_kcs) if variant == "no_subgraph" else retriever.kc(inst.target_kcs)
        except RetrievalError:
            kc_sub = None
    kc = plan_kc(inst.target_kcs, kc_sub, vocab)
    if variant == "no_sq_graph":
        sq = plan_sq(inst, None, vocab, {}, features=False)
    else:
        sub = retriever.full_sq(inst) if variant == "no_subgraph" else retriever.sq(inst)
        sq = plan_sq(inst, sub, vocab, retriever.sq_graph.b)
    return StepPlan(*kc, *sq, label=int(label))


def window_instances(window: Window) -> list[tuple[PredictionInstance, int]]:
    """Instances predicting items 1..T-1 of a window from the preceding items."""
    out = []
    items = window.items
    for t in range(1, len(items)):
        history = tuple((q, int(r)) for q, _, r in items[:t])
        q, kcs, r = items[t]
        out.append((PredictionInstance(window.student_id, history, q, tuple(kcs)), int(r)))
    return out


def plan_windows(windows: Sequence[Window], retriever: Retriever, vocab: Vocab,
                 variant: str = "full") -> list[list[StepPlan]]:
    return [[plan_step(inst, r, retriever, vocab, variant) for inst, r in window_instances(w)] for w in windows]


@dataclass
class Batch:
    """Padded tensors for one step over several instances."""

    kc_idx: torch.Tensor
    kc_mask: torch.Tensor
    kc_target_mask: torch.Tensor
    kc_links: torch.Tensor
    kc_w: torch.Tensor
    q_idx: torch.Tensor
    q_feat: torch.Tensor
    q_resp: torch.Tensor
    q_mask: torch.Tensor
    s_idx: torch.Tensor
    s_feat: torch.Tensor
    s_mask: torch.Tensor
    sq_links: torch.Tensor   # flat indices into cat(q.view(-1), s.view(-1))
    sq_w: torch.Tensor
    labels: torch.Tensor

    @property
    def size(self) -> int:
        return self.kc_idx.shape[0]


def _pad(rows: Sequence[np.ndarray], fill, dtype) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=dtype)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        mask[i, :len(r)] = True
    return out, mask


def collate(plans: Sequence[StepPlan]) -> Batch:
    if not plans:
        raise ValueError("cannot collate an empty step")
    kc_idx, kc_mask = _pad([p.kc_idx for p in plans], 0, np.int64)
    lk = kc_idx.shape[1]
    target_mask = np.zeros_like(kc_mask)
    for i, p in enumerate(plans):
        target_mask[i, :p.kc_targets] = True
    q_idx, q_mask = _pad([p.q_idx for p in plans], 0, np.int64)
    q_feat, _ = _pad([p.q_feat for p in plans], 0.0, np.float64)
    q_resp, _ = _pad([p.q_resp for p in plans], NO_RESPONSE, np.int64)
    s_idx, s_mask = _pad([p.s_idx for p in plans], 0, np.int64)
    s_feat, _ = _pad([p.s_feat for p in plans], 0.0, np.float64)
    B, lq, ls = len(plans), q_idx.shape[1], s_idx.shape[1]
    kc_links, kc_w, sq_links, sq_w = [], [], [], []
    for i, p in enumerate(plans):
        if len(p.kc_links):
            kc_links.append(p.kc_links + i * lk)
            kc_w.append(p.kc_w)
        if len(p.sq_links):
            nq = len(p.q_idx)
            flat = np.where(p.sq_links < nq, i * lq + p.sq_links, B * lq + i * ls + (p.sq_links - nq))
            sq_links.append(flat)
            sq_w.append(p.sq_w)

    def cat_links(parts, ws):
        if not parts:
            return torch.zeros((0, 2), dtype=torch.int64), torch.zeros(0, dtype=torch.float64)
        return torch.from_numpy(np.concatenate(parts)), torch.from_numpy(np.concatenate(ws))

    kl, kw = cat_links(kc_links, kc_w)
    sl, sw = cat_links(sq_links, sq_w)
    t = torch.from_numpy
    return Batch(t(kc_idx), t(kc_mask), t(target_mask), kl, kw, t(q_idx), t(q_feat), t(q_resp), t(q_mask),
                 t(s_idx), t(s_feat), t(s_mask), sl, sw,
                 torch.tensor([p.label for p in plans], dtype=torch.float64))

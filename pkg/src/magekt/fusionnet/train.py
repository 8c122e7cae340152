"""Training, evaluation and ablation runs."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .. import diffcore as dc
from ..ingest import Window
from ..metrics import EvalResult, evaluate
from ..retrieval import PredictionInstance, Retriever, Subgraph
from .model import FusionModel, ModelConfig, encode_batch, forward_step, sequence_loss
from .plans import VARIANTS, StepPlan, Vocab, collate, plan_kc, plan_sq, plan_windows


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    val_auc: float
    val_acc: float
    train_auc: float = float("nan")

    HEADER = ("epoch", "train_loss", "val_auc", "val_acc", "train_auc")

    def values(self) -> tuple:
        return (self.epoch, self.train_loss, self.val_auc, self.val_acc, self.train_auc)


@dataclass
class TrainedModel:
    model: FusionModel
    vocab: Vocab
    history: list[HistoryRow]
    best_epoch: int
    best_val_auc: float
    variant: str = "full"
    seed: int = 0


def encode_instance(inst: PredictionInstance, sq_sub: Subgraph, kc_sub: Subgraph, model: FusionModel,
                    vocab: Vocab) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(k_seq, q_seq, s_seq) as [L, d] tensors for one instance."""
    if not sq_sub.nodes or not kc_sub.nodes:
        raise ValueError("encoding needs non-empty subgraphs")
    kc = plan_kc(inst.target_kcs, kc_sub, vocab)
    sq = plan_sq(inst, sq_sub, vocab, {})
    plan = StepPlan(*kc, *sq, label=0)
    for name, idx, table in (("KC", plan.kc_idx, vocab.kcs), ("question", plan.q_idx, vocab.questions)):
        if (idx < 0).any():
            raise KeyError(f"{name} id missing from the embedding table")
    k, q, s = encode_batch(model, collate([plan]))
    return k[0], q[0], s[0]


def build_model(cfg: ModelConfig, vocab: Vocab, variant: str = "full", seed: int = 0) -> FusionModel:
    return FusionModel(cfg, len(vocab.students), len(vocab.questions), len(vocab.kcs), variant, seed)


def run_batch(model: FusionModel, windows: Sequence[Sequence[StepPlan]],
              context: tuple | None = None) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
    """Loss (mean over windows of summed step losses) plus per-step predictions and labels.

    Windows are processed longest first so the active set at step t is a prefix.
    """
    order = sorted(range(len(windows)), key=lambda i: -len(windows[i]))
    plans = [windows[i] for i in order]
    H = model.cfg.gru_hidden
    h = torch.zeros(len(plans), H, dtype=dc.DTYPE)
    total = torch.zeros((), dtype=dc.DTYPE)
    preds, labels = [], []
    steps = len(plans[0]) if plans else 0
    for t in range(steps):
        n = sum(1 for p in plans if len(p) > t)
        batch = collate([p[t] for p in plans[:n]])
        model.dropout_context = None if context is None else (*context, t)
        h_next, y, _ = forward_step(model, batch, h[:n])
        h = torch.cat([h_next, h[n:]]) if n < len(plans) else h_next
        total = total + sequence_loss(y, batch.labels)
        preds.append(y.detach())
        labels.append(batch.labels)
    model.dropout_context = None
    n_windows = max(1, sum(1 for p in plans if p))
    return total / n_windows, preds, labels


def predict(model: FusionModel, windows: Sequence[Sequence[StepPlan]], batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    ys, rs = [], []
    with torch.no_grad():
        for i in range(0, len(windows), batch):
            chunk = [w for w in windows[i:i + batch] if w]
            if not chunk:
                continue
            _, preds, labels = run_batch(model, chunk)
            ys += [p.numpy() for p in preds]
            rs += [r.numpy() for r in labels]
    if not ys:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(ys), np.concatenate(rs).astype(np.int64)


def score(model: FusionModel, windows: Sequence[Sequence[StepPlan]], batch: int = 64) -> EvalResult:
    y, r = predict(model, windows, batch)
    if len(set(r.tolist())) < 2:
        return EvalResult(float("nan"), float(((y >= 0.5) == r).mean()) if len(r) else float("nan"), max(len(r), 1))
    return evaluate(r, y)


def train(model: FusionModel, train_plans: Sequence[Sequence[StepPlan]], val_plans: Sequence[Sequence[StepPlan]],
          vocab: Vocab, eval_train: bool = False,
          on_epoch: Callable[[HistoryRow], None] | None = None) -> TrainedModel:
    """Adam on batches of windows with early stopping on validation AUC.

    Deterministic for a given model seed: batch order, dropout masks and
    initialization all derive from it. The returned model holds the
    parameters of the earliest epoch reaching the best validation AUC.
    """
    cfg = model.cfg
    train_plans = [w for w in train_plans if w]
    val_plans = [w for w in val_plans if w]
    if not train_plans or not val_plans:
        raise ValueError("training needs non-empty train and validation splits")
    state = dc.AdamState(dc.AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    history: list[HistoryRow] = []
    best_auc, best_epoch, best_params, stale = -math.inf, 0, model.snapshot(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = list(range(len(train_plans)))
        random.Random(f"{model.seed}:{epoch}").shuffle(order)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch)):
            chunk = [train_plans[i] for i in order[start:start + cfg.batch]]
            loss, _, _ = run_batch(model, chunk, context=(model.seed, epoch, b))
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            names = list(model.params)
            grads = torch.autograd.grad(loss, [model.params[k] for k in names], allow_unused=True)
            dc.adam_step(model.params, dict(zip(names, grads)), state)
            losses.append(float(loss.detach()))
        val = score(model, val_plans, cfg.batch)
        train_auc = score(model, train_plans, cfg.batch).auc if eval_train else float("nan")
        row = HistoryRow(epoch, float(np.mean(losses)), val.auc, val.acc, train_auc)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        current = -math.inf if math.isnan(val.auc) else val.auc
        if current > best_auc or epoch == 1:
            best_auc, best_epoch, best_params, stale = current, epoch, model.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load(best_params)
    return TrainedModel(model, vocab, history, best_epoch, best_auc, model.variant, model.seed)


def ablate(variant: str, cfg: ModelConfig, train_windows: Sequence[Window], val_windows: Sequence[Window],
           retriever: Retriever, vocab: Vocab, seed: int = 0, eval_train: bool = False,
           on_epoch: Callable[[HistoryRow], None] | None = None) -> TrainedModel:
    """Build plans for ``variant`` and train a fresh model; ``full`` is plain training."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    model = build_model(cfg, vocab, variant, seed)
    tp = plan_windows(train_windows, retriever, vocab, variant)
    vp = plan_windows(val_windows, retriever, vocab, variant)
    return train(model, tp, vp, vocab, eval_train, on_epoch)

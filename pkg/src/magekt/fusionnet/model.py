"""Asymmetric cross-attention fusion with a recurrent predictor.

Shapes: B instances per step, L tokens per sequence, d = embed_dim,
H = gru_hidden. Single-instance callers may pass [L, d] sequences; they are
lifted to a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .. import diffcore as dc
from .plans import CORRECT, VARIANTS, Batch

PATHWAYS = ("ks", "kq", "sk", "qk")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    attn_heads: int = 4
    attn_layers: int = 3
    gru_hidden: int = 512
    dropout: float = 0.3
    batch: int = 64
    max_epochs: int = 100
    patience: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    lr: float = 1e-3
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.embed_dim <= 0 or self.attn_heads <= 0 or self.embed_dim % self.attn_heads:
            raise ValueError("embed_dim must be a positive multiple of attn_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.attn_layers < 0 or self.gru_hidden <= 0 or self.batch <= 0:
            raise ValueError("attn_layers >= 0, gru_hidden > 0 and batch > 0 are required")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be at least 1")


class FusionModel:
    """Named float64 parameters plus the dropout context of the current step.

    ``dropout_context`` is None in evaluation mode; during training it holds a
    (seed, epoch, batch, step) tuple that keys every dropout mask.
    """

    def __init__(self, cfg: ModelConfig, n_students: int, n_questions: int, n_kcs: int,
                 variant: str = "full", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.cfg, self.variant, self.seed = cfg, variant, seed
        self.sizes = (n_students, n_questions, n_kcs)
        self.dropout_context: tuple | None = None
        self.params: dict[str, torch.Tensor] = {}
        gen = torch.Generator().manual_seed(seed)
        d, H = cfg.embed_dim, cfg.gru_hidden

        def add(name, shape, scale):
            t = torch.randn(shape, generator=gen, dtype=dc.DTYPE) * scale if scale else torch.zeros(shape, dtype=dc.DTYPE)
            self.params[name] = t.requires_grad_(True)

        def ones(name, shape):
            self.params[name] = torch.ones(shape, dtype=dc.DTYPE).requires_grad_(True)

        emb = 1.0 / math.sqrt(d)
        add("emb_s", (max(n_students, 1), d), emb)
        add("emb_q", (max(n_questions, 1), d), emb)
        add("emb_k", (max(n_kcs, 1), d), emb)
        add("emb_resp", (2, d), emb)
        if variant != "no_sq_graph":
            add("feat_theta_w", (d,), emb)
            add("feat_theta_b", (d,), 0)
            add("feat_b_w", (d,), emb)
            add("feat_b_b", (d,), 0)
        if variant != "no_asyatt":
            for layer in range(cfg.attn_layers):
                for p in PATHWAYS:
                    pre = f"att{layer}.{p}."
                    for side in ("ln_q", "ln_kv"):
                        ones(pre + side + ".g", (d,))
                        add(pre + side + ".b", (d,), 0)
                    for m in ("wq", "wk", "wv", "wo"):
                        add(pre + m, (d, d), emb)
                        add(pre + m + "_b", (d,), 0)
        add("gate_w", (2 * d,), emb)
        add("gate_b", (1,), 0)
        zin = 3 * d
        for g in ("u", "r", "c"):
            add(f"gru.w_{g}", (zin, H), 1.0 / math.sqrt(zin))
            add(f"gru.u_{g}", (H, H), 1.0 / math.sqrt(H))
            add(f"gru.b_{g}", (H,), 0)
        add("head_w", (H,), 0.1 / math.sqrt(H))
        add("head_b", (1,), 0)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def key(self, op: str) -> int | None:
        if self.dropout_context is None or self.cfg.dropout == 0.0:
            return None
        return dc.dropout_key(*self.dropout_context, op)

    def drop(self, x: torch.Tensor, op: str) -> torch.Tensor:
        return dc.dropout(x, self.cfg.dropout, self.key(op), training=self.dropout_context is not None)

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load(self, values: dict[str, torch.Tensor]) -> None:
        missing = set(self.params) ^ set(values)
        if missing:
            raise KeyError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
        with torch.no_grad():
            for k, v in values.items():
                if v.shape != self.params[k].shape:
                    raise dc.ShapeError(f"{k}: checkpoint shape {tuple(v.shape)} != {tuple(self.params[k].shape)}")
                self.params[k].copy_(v)


# -- encoding ------------------------------------------------------------

def lookup(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Embedding rows; index -1 (an id the tables never saw) gets the table mean."""
    rows = table[idx.clamp(min=0)]
    unknown = (idx < 0).unsqueeze(-1)
    if bool(unknown.any()):
        rows = torch.where(unknown, table.mean(0).expand_as(rows), rows)
    return rows


def neighborhood_mean(x: torch.Tensor, links: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """x_i <- (x_i + sum_j w_ij x_j / sum_j w_ij) / 2 over flat rows; rows without links are unchanged."""
    if links.numel() == 0:
        return x
    src, dst = links[:, 0], links[:, 1]
    acc = torch.zeros_like(x).index_add(0, dst, x[src] * w.unsqueeze(-1))
    wsum = torch.zeros(x.shape[0], dtype=x.dtype).index_add(0, dst, w)
    has = (wsum > 0).unsqueeze(-1)
    safe = torch.where(wsum > 0, wsum, torch.ones_like(wsum)).unsqueeze(-1)
    return torch.where(has, 0.5 * (x + acc / safe), x)


def encode_batch(model: FusionModel, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Token sequences (k, q, s), each [B, L, d], after one neighborhood-mean pass."""
    P = model.params
    k = lookup(P["emb_k"], batch.kc_idx)
    q = lookup(P["emb_q"], batch.q_idx)
    s = lookup(P["emb_s"], batch.s_idx)
    if "feat_b_w" in P:
        q = q + batch.q_feat.unsqueeze(-1) * P["feat_b_w"] + P["feat_b_b"]
        s = s + batch.s_feat.unsqueeze(-1) * P["feat_theta_w"] + P["feat_theta_b"]
    answered = (batch.q_resp > 0).unsqueeze(-1)
    resp = P["emb_resp"][(batch.q_resp == CORRECT).long()]
    q = q + torch.where(answered, resp, torch.zeros_like(resp))
    B, lk, d = k.shape
    k = neighborhood_mean(k.reshape(B * lk, d), batch.kc_links, batch.kc_w).reshape(B, lk, d)
    lq, ls = q.shape[1], s.shape[1]
    mixed = neighborhood_mean(torch.cat([q.reshape(B * lq, d), s.reshape(B * ls, d)]), batch.sq_links, batch.sq_w)
    q = mixed[:B * lq].reshape(B, lq, d)
    s = mixed[B * lq:].reshape(B, ls, d)
    return k, q, s


# -- attention -----------------------------------------------------------

def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                         kv_mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-head softmax(q k^T / sqrt(d_head)) v on projected inputs [B, L, d].

    Returns the merged output [B, Lq, d] and the weights [B, heads, Lq, Lk].
    """
    B, lq, d = q.shape
    lk = k.shape[1]
    if k.shape != v.shape or k.shape[0] != B or k.shape[2] != d:
        raise dc.ShapeError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    dh = d // heads
    split = lambda x, n: x.reshape(B, n, heads, dh).transpose(1, 2)
    scores = split(q, lq) @ split(k, lk).transpose(-1, -2) / math.sqrt(dh)
    mask = None if kv_mask is None else kv_mask[:, None, None, :].expand_as(scores)
    weights = dc.softmax(scores, mask)
    out = (weights @ split(v, lk)).transpose(1, 2).reshape(B, lq, d)
    return out, weights


def cross_attention(model: FusionModel, prefix: str, x: torch.Tensor, kv: torch.Tensor,
                    kv_mask: torch.Tensor | None, trace: list | None = None) -> torch.Tensor:
    """Pre-norm residual block: x + Wo·Att(LN(x)Wq, LN(kv)Wk, LN(kv)Wv)."""
    P = model.params
    xn = dc.layer_norm(x, P[prefix + "ln_q.g"], P[prefix + "ln_q.b"])
    kn = dc.layer_norm(kv, P[prefix + "ln_kv.g"], P[prefix + "ln_kv.b"])
    proj = lambda t, m: t @ P[prefix + m] + P[prefix + m + "_b"]
    out, weights = scaled_dot_attention(proj(xn, "wq"), proj(kn, "wk"), proj(kn, "wv"), model.cfg.attn_heads, kv_mask)
    if trace is not None:
        trace.append((prefix, weights.detach()))
    return x + model.drop(proj(out, "wo"), prefix)


def _lift(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 2 else x


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(1) / m.sum(1)


def gate_fusion(k_s: torch.Tensor, k_q: torch.Tensor, s_k: torch.Tensor, q_k: torch.Tensor,
                model: FusionModel) -> tuple[torch.Tensor, torch.Tensor]:
    """z = [s_k ; a*k_s + (1-a)*k_q ; q_k] with a = sigmoid(w_g . [k_s ; k_q] + b_g).

    Accepts [d] or [B, d] inputs; returns z and a (shape [] or [B]).
    """
    d = model.cfg.embed_dim
    for t in (k_s, k_q, s_k, q_k):
        if t.shape[-1] != d:
            raise dc.ShapeError(f"gate inputs must have last dim {d}, got {tuple(t.shape)}")
    P = model.params
    alpha = dc.sigmoid(torch.cat([k_s, k_q], -1) @ P["gate_w"] + P["gate_b"].squeeze(-1))
    a = alpha.unsqueeze(-1)
    return torch.cat([s_k, a * k_s + (1 - a) * k_q, q_k], -1), alpha


def asymmetric_fusion(k_seq: torch.Tensor, q_seq: torch.Tensor, s_seq: torch.Tensor, model: FusionModel,
                      k_mask: torch.Tensor | None = None, q_mask: torch.Tensor | None = None,
                      s_mask: torch.Tensor | None = None, k_targets: torch.Tensor | None = None,
                      trace: list | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Concepts read students and questions, then the two concept streams are read back.

    Returns z [B, 3d] and the gate value [B]. Masks mark real (unpadded)
    tokens; ``k_targets`` marks the target-KC positions pooled for the
    concept streams (default: position 0).
    """
    k, q, s = _lift(k_seq), _lift(q_seq), _lift(s_seq)
    if k.shape[-1] != q.shape[-1] or k.shape[-1] != s.shape[-1] or not (k.shape[0] == q.shape[0] == s.shape[0]):
        raise dc.ShapeError("fusion sequences must share batch size and embedding width")
    if min(k.shape[1], q.shape[1], s.shape[1]) == 0:
        raise dc.ShapeError("fusion needs non-empty sequences")
    full = lambda x: torch.ones(x.shape[:2], dtype=torch.bool)
    k_mask = full(k) if k_mask is None else k_mask
    q_mask = full(q) if q_mask is None else q_mask
    s_mask = full(s) if s_mask is None else s_mask
    if k_targets is None:
        k_targets = torch.zeros_like(k_mask)
        k_targets[:, 0] = True
    if model.variant == "no_asyatt":
        kbar, sbar, qbar = _masked_mean(k, k_mask), _masked_mean(s, s_mask), _masked_mean(q, q_mask)
        return gate_fusion(0.5 * (kbar + sbar), 0.5 * (kbar + qbar), sbar, qbar, model)
    k_s, k_q = k, k
    for layer in range(model.cfg.attn_layers):
        pre = f"att{layer}."
        k_s = cross_attention(model, pre + "ks.", k_s, s, s_mask, trace)
        k_q = cross_attention(model, pre + "kq.", k_q, q, q_mask, trace)
        s = cross_attention(model, pre + "sk.", s, k_s, k_mask, trace)
        q = cross_attention(model, pre + "qk.", q, k_q, k_mask, trace)
    return gate_fusion(_masked_mean(k_s, k_targets), _masked_mean(k_q, k_targets), s[:, 0], q[:, 0], model)


# -- recurrent head ------------------------------------------------------

def predict_step(h: torch.Tensor, z: torch.Tensor, model: FusionModel) -> tuple[torch.Tensor, torch.Tensor]:
    """GRU update h' = (1-u)*h + u*c, then y = sigmoid(w_o . h' + b_o)."""
    P = model.params
    H, zin = model.cfg.gru_hidden, 3 * model.cfg.embed_dim
    if h.shape[-1] != H or z.shape[-1] != zin or h.shape[:-1] != z.shape[:-1]:
        raise dc.ShapeError(f"predict_step: h{tuple(h.shape)} z{tuple(z.shape)}, expected (..., {H}) and (..., {zin})")
    u = dc.sigmoid(z @ P["gru.w_u"] + h @ P["gru.u_u"] + P["gru.b_u"])
    r = dc.sigmoid(z @ P["gru.w_r"] + h @ P["gru.u_r"] + P["gru.b_r"])
    c = dc.tanh(z @ P["gru.w_c"] + (r * h) @ P["gru.u_c"] + P["gru.b_c"])
    h_next = (1 - u) * h + u * c
    y = dc.sigmoid(h_next @ P["head_w"] + P["head_b"].squeeze(-1))
    return h_next, y


CLAMP = 1e-7


def sequence_loss(y_hats: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    y = torch.as_tensor(y_hats, dtype=dc.DTYPE)
    r = torch.as_tensor(targets, dtype=dc.DTYPE)
    if y.shape != r.shape:
        raise dc.ShapeError(f"sequence_loss: {tuple(y.shape)} predictions vs {tuple(r.shape)} targets")
    if y.numel() == 0:
        raise dc.ShapeError("sequence_loss needs at least one step")
    y = y.clamp(CLAMP, 1 - CLAMP)
    return -(r * torch.log(y) + (1 - r) * torch.log(1 - y)).sum()


def forward_step(model: FusionModel, batch: Batch, h: torch.Tensor,
                 trace: list | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Encode, fuse and advance the recurrent state for one step of a batch. Returns (h', y, alpha)."""
    k, q, s = encode_batch(model, batch)
    z, alpha = asymmetric_fusion(k, q, s, model, batch.kc_mask, batch.q_mask, batch.s_mask,
                                 batch.kc_target_mask, trace)
    z = model.drop(z, "z")
    h_next, y = predict_step(h, z, model)
    return h_next, y, alpha

"""Tensor substrate for the predictor.

Reverse-mode gradients come from torch autograd in float64. This module adds
the contract the model relies on: shape-checked primitives that reject
non-finite results, a central-difference gradient checker that is independent
of autograd, a decoupled-weight-decay Adam, dropout masks derived from a
counter key, and named-parameter checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class NonFiniteError(ArithmeticError):
    pass


class ShapeError(ValueError):
    pass


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values, dtype=np.float64)).clone()
    return t.requires_grad_(requires_grad)


def _finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return t


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to every row of ``a``."""
    if a.shape != b.shape and not (b.dim() == 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add: {tuple(a.shape)} + {tuple(b.shape)}")
    return _finite(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "mul")
    return _finite(a * b, "mul")


def concat(parts: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    if not parts:
        raise ShapeError("concat of nothing")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other))
                                          if i != (dim % len(ref))):
            raise ShapeError(f"concat: incompatible {ref} and {other}")
    return torch.cat(list(parts), dim=dim)


def slice_(x: torch.Tensor, start: int, stop: int, dim: int = -1) -> torch.Tensor:
    size = x.shape[dim]
    if not 0 <= start <= stop <= size:
        raise ShapeError(f"slice [{start}:{stop}] out of range for size {size}")
    return x.narrow(dim, start, stop - start)


def softmax(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row softmax over the last axis. ``mask`` (bool, True = keep) removes entries."""
    if mask is not None:
        if not bool(mask.any(-1).all()):
            raise ShapeError("softmax row with every entry masked")
        x = x.masked_fill(~mask, float("-inf"))
    return _finite(torch.softmax(x, dim=-1), "softmax")


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return _finite(torch.sigmoid(x), "sigmoid")


def tanh(x: torch.Tensor) -> torch.Tensor:
    return _finite(torch.tanh(x), "tanh")


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return _finite((x - mu) / torch.sqrt(var + eps) * gain + bias, "layer_norm")


def mean(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return _finite(x.mean() if dim is None else x.mean(dim), "mean")


def dropout_key(*parts) -> int:
    """63-bit generator seed derived from an arbitrary tuple such as (seed, epoch, batch, op)."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def dropout_mask(shape, rate: float, key: int) -> torch.Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    gen = torch.Generator().manual_seed(key)
    keep = torch.rand(tuple(shape), generator=gen, dtype=DTYPE) >= rate
    return keep.to(DTYPE) / (1.0 - rate)


def dropout(x: torch.Tensor, rate: float, key: int | None, training: bool = True) -> torch.Tensor:
    """Inverted dropout; identity when not training, when rate is 0 or when ``key`` is None."""
    if not training or rate == 0.0 or key is None:
        return x
    return x * dropout_mask(x.shape, rate, key)


# -- gradient checking ---------------------------------------------------

def _as_list(point) -> list[torch.Tensor]:
    if isinstance(point, torch.Tensor):
        return [point]
    return list(point)


def gradient_check(f: Callable[..., torch.Tensor], point, step: float = 1e-5) -> float:
    """Max component-wise relative error between autograd and central differences.

    ``f`` takes the tensors of ``point`` as positional arguments and returns a
    scalar. The relative error of a component is |a - n| / max(|a|, |n|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = [p.detach().clone().to(DTYPE).requires_grad_(True) for p in _as_list(point)]
    out = f(*xs)
    if out.numel() != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    if not bool(torch.isfinite(out)):
        raise NonFiniteError("function value is not finite at the check point")
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        probes = [x.detach().clone() for x in xs]
        for i, x in enumerate(probes):
            analytic = grads[i] if grads[i] is not None else torch.zeros_like(x)
            flat = x.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + step
                hi = float(f(*probes))
                flat[j] = orig - step
                lo = float(f(*probes))
                flat[j] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NonFiniteError("non-finite value during finite differencing")
                num = (hi - lo) / (2.0 * step)
                a = float(analytic.reshape(-1)[j])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# -- optimizer -----------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


@dataclass
class AdamState:
    config: AdamConfig = AdamConfig()
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
              state: AdamState) -> tuple[Mapping[str, torch.Tensor], AdamState]:
    """One decoupled-weight-decay Adam update, applied in place.

    Parameters whose gradient is None are treated as having a zero gradient.
    """
    cfg = state.config
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            g = torch.zeros_like(p) if g is None else g
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps)
            p.sub_(cfg.lr * (update + cfg.weight_decay * p))
            if not bool(torch.isfinite(p).all()):
                raise NonFiniteError(f"parameter {name} became non-finite")
    return params, state


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path: Path | str, params: Mapping[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write named float64 arrays (name, shape, values) plus a JSON metadata entry."""
    arrays = {f"p:{k}": v.detach().cpu().numpy().astype(np.float64) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fp:
        np.savez(fp, **arrays)


def load_checkpoint(path: Path | str) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode()) if "__meta__" in data else {}
        params = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("p:")}
    return params, meta

"""Rasch (1PL) IRT fitted by L2-regularized maximum likelihood.

The optimizer alternates exact-diagonal Newton steps over the ability block
and the difficulty block, then minimizes exactly along the common-shift
direction. Within a block the objective separates per entity, so each step is
a set of independent 1-D Newton updates, each guarded by backtracking. No
iteration increases the objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

import numpy as np
from scipy.special import expit, log_expit

from .core import InteractionLog


@dataclass(frozen=True)
class IrtConfig:
    l2_prior: float = 0.1
    max_iters: int = 200
    tol: float = 1e-6
    max_halvings: int = 30

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.l2_prior < 0:
            raise ValueError("l2_prior must be >= 0")


@dataclass(frozen=True)
class FitReport:
    iterations: int
    nll: float
    grad_norm: float
    converged: bool
    nll_trace: tuple[float, ...] = ()


@dataclass(frozen=True)
class IrtParams:
    theta: Mapping[str, float]
    b: Mapping[str, float]
    fit_report: FitReport | None = None

    def __post_init__(self):
        for name, values in (("theta", self.theta), ("b", self.b)):
            bad = [k for k, v in values.items() if not math.isfinite(v)]
            if bad:
                raise ValueError(f"non-finite {name} for {bad[:5]}")


def rasch_probability(theta: float, b: float) -> float:
    """P(correct) = sigmoid(theta - b), overflow-safe."""
    if not (math.isfinite(theta) and math.isfinite(b)):
        raise ValueError("rasch_probability needs finite inputs")
    x = theta - b
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class _Design:
    students: tuple[str, ...]
    questions: tuple[str, ...]
    s_idx: np.ndarray
    q_idx: np.ndarray
    r: np.ndarray
    s_pos: dict = field(default_factory=dict)
    q_pos: dict = field(default_factory=dict)


def _design(log: InteractionLog, students=None, questions=None) -> _Design:
    students = tuple(students if students is not None else log.students)
    questions = tuple(questions if questions is not None else log.questions)
    s_pos = {s: i for i, s in enumerate(students)}
    q_pos = {q: i for i, q in enumerate(questions)}
    try:
        s_idx = np.fromiter((s_pos[r.student_id] for r in log.records), dtype=np.int64, count=len(log))
        q_idx = np.fromiter((q_pos[r.question_id] for r in log.records), dtype=np.int64, count=len(log))
    except KeyError as exc:
        raise KeyError(f"no IRT parameter for {exc.args[0]!r}") from None
    r = np.fromiter((rec.correct for rec in log.records), dtype=np.float64, count=len(log))
    return _Design(students, questions, s_idx, q_idx, r, s_pos, q_pos)


def _nll(theta: np.ndarray, b: np.ndarray, d: _Design, l2: float) -> float:
    x = theta[d.s_idx] - b[d.q_idx]
    data = -(d.r * log_expit(x) + (1.0 - d.r) * log_expit(-x)).sum()
    return float(data + 0.5 * l2 * (theta @ theta + b @ b))


def _gradient(theta: np.ndarray, b: np.ndarray, d: _Design, l2: float) -> tuple[np.ndarray, np.ndarray]:
    resid = expit(theta[d.s_idx] - b[d.q_idx]) - d.r
    g_theta = np.bincount(d.s_idx, weights=resid, minlength=len(theta)) + l2 * theta
    g_b = -np.bincount(d.q_idx, weights=resid, minlength=len(b)) + l2 * b
    return g_theta, g_b


def negative_log_likelihood(params: IrtParams, log: InteractionLog, cfg: IrtConfig = IrtConfig()) -> float:
    """Regularized Rasch negative log-likelihood of ``log`` under ``params``."""
    students = tuple(sorted(params.theta))
    questions = tuple(sorted(params.b))
    d = _design(log, students, questions)
    theta = np.array([params.theta[s] for s in students], dtype=np.float64)
    b = np.array([params.b[q] for q in questions], dtype=np.float64)
    return _nll(theta, b, d, cfg.l2_prior)


def nll_gradient(params: IrtParams, log: InteractionLog, cfg: IrtConfig = IrtConfig()) -> IrtParams:
    """Analytic gradient of :func:`negative_log_likelihood`, keyed like ``params``."""
    students = tuple(sorted(params.theta))
    questions = tuple(sorted(params.b))
    d = _design(log, students, questions)
    theta = np.array([params.theta[s] for s in students], dtype=np.float64)
    b = np.array([params.b[q] for q in questions], dtype=np.float64)
    gt, gb = _gradient(theta, b, d, cfg.l2_prior)
    return IrtParams(dict(zip(students, gt.tolist())), dict(zip(questions, gb.tolist())))


def _block_newton(x: np.ndarray, other: np.ndarray, own_idx: np.ndarray, other_idx: np.ndarray,
                  r: np.ndarray, sign: float, l2: float, max_halvings: int) -> np.ndarray:
    """One guarded Newton step per entity of a separable block.

    ``sign`` is +1 for abilities (logit = x - other) and -1 for difficulties
    (logit = other - x).
    """
    n = len(x)

    def logits(vals: np.ndarray) -> np.ndarray:
        return vals[own_idx] - other[other_idx] if sign > 0 else other[other_idx] - vals[own_idx]

    def per_entity_obj(vals: np.ndarray) -> np.ndarray:
        logit = logits(vals)
        term = -(r * log_expit(logit) + (1.0 - r) * log_expit(-logit))
        return np.bincount(own_idx, weights=term, minlength=n) + 0.5 * l2 * vals * vals

    p = expit(logits(x))
    grad = sign * np.bincount(own_idx, weights=p - r, minlength=n) + l2 * x
    hess = np.bincount(own_idx, weights=p * (1.0 - p), minlength=n) + l2
    hess = np.maximum(hess, 1e-12)
    step = grad / hess

    base = per_entity_obj(x)
    scale = np.ones(n)
    accepted = np.zeros(n, dtype=bool)
    out = x.copy()
    for _ in range(max_halvings + 1):
        trial = np.where(accepted, out, x - scale * step)
        obj = per_entity_obj(trial)
        ok = (obj <= base) & ~accepted
        out = np.where(ok, trial, out)
        accepted |= ok
        if accepted.all():
            break
        scale = np.where(accepted, scale, scale * 0.5)
    return out


def fit_rasch(log: InteractionLog, cfg: IrtConfig = IrtConfig()) -> IrtParams:
    """Fit abilities and difficulties; report convergence, then fix the gauge.

    The reported gradient norm is measured at the optimum of the regularized
    objective. The gauge fix afterwards subtracts mean(b) from both b and
    theta, which leaves every predicted probability unchanged.
    """
    if len(log) == 0:
        raise ValueError("cannot fit IRT on an empty log")
    d = _design(log)
    theta = np.zeros(len(d.students))
    b = np.zeros(len(d.questions))
    l2 = cfg.l2_prior
    trace = [_nll(theta, b, d, l2)]
    grad_norm = math.inf
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        theta = _block_newton(theta, b, d.s_idx, d.q_idx, d.r, +1.0, l2, cfg.max_halvings)
        b = _block_newton(b, theta, d.q_idx, d.s_idx, d.r, -1.0, l2, cfg.max_halvings)
        # The likelihood is flat along a common shift of theta and b, so the
        # exact minimizer along that direction comes from the prior alone.
        if l2 > 0:
            c = -(theta.sum() + b.sum()) / (len(theta) + len(b))
            theta, b = theta + c, b + c
        trace.append(_nll(theta, b, d, l2))
        gt, gb = _gradient(theta, b, d, l2)
        grad_norm = float(max(np.abs(gt).max(initial=0.0), np.abs(gb).max(initial=0.0)))
        if grad_norm <= cfg.tol:
            break

    shift = b.mean()
    b = b - shift
    theta = theta - shift
    report = FitReport(iters, trace[-1], grad_norm, grad_norm <= cfg.tol, tuple(trace))
    return IrtParams(dict(zip(d.students, theta.tolist())), dict(zip(d.questions, b.tolist())), report)


def fit_ability(history: Iterable[tuple[str, int]], b: Mapping[str, float], cfg: IrtConfig = IrtConfig()) -> float:
    """Estimate one student's ability from (question, correct) pairs with difficulties frozen.

    Questions without a known difficulty are skipped; an empty history gives 0.
    """
    pairs = [(b[q], r) for q, r in history if q in b]
    if not pairs:
        return 0.0
    bq = np.array([p[0] for p in pairs])
    r = np.array([p[1] for p in pairs], dtype=np.float64)
    l2 = cfg.l2_prior if cfg.l2_prior > 0 else 1e-6
    theta = 0.0

    def obj(t: float) -> float:
        x = t - bq
        return float(-(r * log_expit(x) + (1 - r) * log_expit(-x)).sum() + 0.5 * l2 * t * t)

    for _ in range(cfg.max_iters):
        p = expit(theta - bq)
        g = float((p - r).sum() + l2 * theta)
        if abs(g) <= cfg.tol:
            break
        h = float((p * (1 - p)).sum() + l2)
        step, base = g / h, obj(theta)
        for _ in range(cfg.max_halvings):
            if obj(theta - step) <= base:
                break
            step *= 0.5
        theta -= step
    return theta


def dump_params(params: IrtParams, fp: IO[str], meta: dict | None = None) -> None:
    if meta is not None:
        fp.write(json.dumps({"_meta": meta}) + "\n")
    if params.fit_report is not None:
        rep = params.fit_report
        fp.write(json.dumps({"_fit": {"iterations": rep.iterations, "nll": rep.nll,
                                      "grad_norm": rep.grad_norm, "converged": rep.converged}}) + "\n")
    for s in sorted(params.theta):
        fp.write(json.dumps({"kind": "student", "id": s, "value": params.theta[s]}) + "\n")
    for q in sorted(params.b):
        fp.write(json.dumps({"kind": "question", "id": q, "value": params.b[q]}) + "\n")


def load_params(lines: Iterable[str]) -> IrtParams:
    theta, b, report = {}, {}, None
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        if "_meta" in d:
            continue
        if "_fit" in d:
            f = d["_fit"]
            report = FitReport(f["iterations"], f["nll"], f["grad_norm"], f["converged"])
            continue
        (theta if d["kind"] == "student" else b)[d["id"]] = float(d["value"])
    return IrtParams(theta, b, report)

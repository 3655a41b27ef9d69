"""Attention-guided distillation weights and losses.

Token weights come from the frozen reference ([CLS]-bearing) teacher's
final-block query/key projections; teacher weights from the mean
[CLS]-to-token dot product of each adapted teacher. Both are treated as
fixed supervision: they are computed on raw arrays and never enter the
autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import Tensor


class KDConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KDConfig:
    lambda_kd: float = 0.5
    clip_fixed_weight: float = 0.8
    clip_index: int | None = 0

    def __post_init__(self):
        if not 0.0 < self.clip_fixed_weight < 1.0:
            raise KDConfigError(f"clip_fixed_weight must lie in (0, 1), got {self.clip_fixed_weight}")
        if self.lambda_kd < 0:
            raise KDConfigError(f"lambda_kd must be >= 0, got {self.lambda_kd}")


@dataclass
class KDWeights:
    """Per-image weights. ``None`` means unweighted: 1/n per token, 1/m per teacher."""

    token_w: np.ndarray | None
    teacher_w: np.ndarray | None

    def effective_token_weights(self, n: int) -> np.ndarray:
        if self.token_w is None:
            return np.full(n, 1.0 / n)
        return np.asarray(self.token_w, dtype=np.float64) + 1.0 / n


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _softmax(v: np.ndarray) -> np.ndarray:
    return _kernels.softmax_rows(np.ascontiguousarray(v, dtype=np.float64).reshape(1, -1))[0]


def token_weights(cls, res, wq, wk) -> np.ndarray:
    """softmax over tokens of (cls Wq)(res Wk)^T / sqrt(d)."""
    cls, res, wq, wk = (_arr(a).astype(np.float64) for a in (cls, res, wq, wk))
    d = cls.shape[-1]
    if res.ndim != 2 or res.shape[1] != d or wq.shape != (d, d) or wk.shape != (d, d):
        raise nx.DimensionError(f"token_weights: cls {cls.shape}, res {res.shape}, Wq {wq.shape}, Wk {wk.shape}")
    scores = (cls @ wq) @ (res @ wk).T / math.sqrt(d)
    return _softmax(scores)


def teacher_scores(cls, teacher_tokens: Sequence) -> np.ndarray:
    cls = _arr(cls).astype(np.float64)
    d = cls.shape[-1]
    out = []
    for t in teacher_tokens:
        t = _arr(t).astype(np.float64)
        if t.ndim != 2 or t.shape[1] != d:
            raise nx.DimensionError(f"teacher tokens {t.shape} do not match [CLS] dim {d}")
        out.append(float(np.mean(t @ cls)) / math.sqrt(d))
    return np.array(out)


def teacher_weights(cls, teacher_tokens: Sequence, cfg: KDConfig) -> np.ndarray:
    """Reference teacher pinned at ``clip_fixed_weight``; the rest share the remainder by softmax."""
    m = len(teacher_tokens)
    if m == 0:
        raise KDConfigError("no teachers")
    if cfg.clip_index is None:
        if m == 1:
            return np.ones(1)
        return _softmax(teacher_scores(cls, teacher_tokens))
    if m < 2:
        raise KDConfigError("a fixed reference-teacher weight needs at least two teachers; set clip_index=None")
    if not 0 <= cfg.clip_index < m:
        raise KDConfigError(f"clip_index {cfg.clip_index} out of range for {m} teachers")
    scores = teacher_scores(cls, teacher_tokens)
    others = [i for i in range(m) if i != cfg.clip_index]
    w = np.empty(m)
    w[others] = (1.0 - cfg.clip_fixed_weight) * _softmax(scores[others])
    w[cfg.clip_index] = cfg.clip_fixed_weight
    return w


def kd_loss(student: Tensor, teachers: Sequence[Tensor], w: KDWeights | Sequence[KDWeights]) -> Tensor:
    """sum_i W_tea[i] * sum_j (W_tok[j] + 1/n) * MSE(teacher_i[j], student[j]).

    Accepts one image (n, c) with a single ``KDWeights``, or a batch
    (B, n, c) with one ``KDWeights`` per image; the batch loss is the mean.
    """
    single = student.ndim == 2
    ws = [w] if single else list(w)
    b = 1 if single else student.shape[0]
    if len(ws) != b:
        raise nx.ContractError(f"{len(ws)} weight sets for a batch of {b}")
    m = len(teachers)
    n = student.shape[-2]
    for wi in ws:
        if wi.teacher_w is not None and len(wi.teacher_w) != m:
            raise nx.ContractError(f"{len(wi.teacher_w)} teacher weights for {m} teachers")
    tok = np.stack([wi.effective_token_weights(n) for wi in ws])  # (B, n)
    tea = np.stack([np.full(m, 1.0 / m) if wi.teacher_w is None else np.asarray(wi.teacher_w, dtype=np.float64) for wi in ws])
    dt = student.dtype
    total = None
    for i, t in enumerate(teachers):
        if t.shape != student.shape:
            raise nx.DimensionError(f"teacher {i} tokens {t.shape} vs student {student.shape}")
        diff = nx.sub(t, student)
        per_token = nx.mean(nx.mul(diff, diff), axis=-1)
        coef = tok * tea[:, i : i + 1]
        if single:
            coef = coef[0]
        term = nx.sum(nx.mul(per_token, Tensor._wrap(coef.astype(dt))))
        total = term if total is None else nx.add(total, term)
    return total if single else nx.scale(total, 1.0 / b)


def total_loss(text_loss: Tensor, kd: Tensor, cfg: KDConfig) -> Tensor:
    return nx.add(text_loss, nx.scale(kd, cfg.lambda_kd))

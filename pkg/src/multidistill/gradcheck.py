"""Finite-difference gradient checking against the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .oracles import central_difference

# Entries with |grad| below this are compared on an absolute scale; a
# relative error is meaningless for gradients that are zero analytically.
REL_FLOOR = 1e-6


@dataclass
class GradSample:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_indices(params: dict[str, Tensor], count: int, rng: np.random.Generator) -> list[tuple[str, tuple[int, ...]]]:
    """``count`` (name, index) pairs, spread round-robin over the tensors."""
    names = list(params)
    out = []
    for k in range(count):
        name = names[k % len(names)]
        shape = params[name].shape
        out.append((name, tuple(int(rng.integers(0, s)) for s in shape)))
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    count: int = 50,
    seed: int = 0,
    step: float = 1e-3,
) -> list[GradSample]:
    """Compare backward() against central differences on ``count`` sampled entries.

    Run under ``numerics.precision(np.float64)``.
    """
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    nx.backward(loss_fn(), leaves=list(params.values()))
    analytic = {k: t.grad.copy() for k, t in params.items()}

    def value() -> float:
        with nx.no_grad():
            return float(loss_fn().data)

    out = []
    for name, idx in sample_indices(params, count, np.random.default_rng(seed)):
        num = central_difference(value, params[name].data, idx, step)
        out.append(GradSample(name, idx, float(analytic[name][idx]), num))
    return out


def max_rel_error(samples: list[GradSample]) -> float:
    return max(s.rel_error for s in samples) if samples else 0.0

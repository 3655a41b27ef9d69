"""Per-teacher projection of teacher tokens into the student token space."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import Tensor
from .vit import ConfigError


@lru_cache(maxsize=64)
def _resample_matrix(src: int, dst: int, backend: str, dtype: str) -> np.ndarray:
    m = _kernels.bilinear_matrix(src, dst).astype(dtype)
    m.setflags(write=False)
    return m


def resample_matrix(src: int, dst: int) -> np.ndarray:
    """(dst², src²) bilinear weights for row-major square grids."""
    return _resample_matrix(src, dst, _kernels.backend(), nx.default_dtype().str)


def align_grid(tokens: Tensor, g_t: int, g_s: int) -> Tensor:
    """Bilinearly resample a (…, g_t², d) token grid to (…, g_s², d).

    Half-pixel centres with clamped edges, so equal grids are returned as is.
    """
    n_t = tokens.shape[-2]
    if math.isqrt(n_t) ** 2 != n_t:
        raise nx.ContractError(f"{n_t} tokens do not form a square grid")
    if n_t != g_t * g_t:
        raise nx.ContractError(f"{n_t} tokens but source grid {g_t}x{g_t}")
    if g_t == g_s:
        return tokens
    m = Tensor._wrap(resample_matrix(g_t, g_s).astype(tokens.dtype))
    # (…, n_t, d) -> (…, d, n_t) @ (n_t, n_s) -> (…, n_s, d)
    return nx.transpose(nx.matmul(nx.transpose(tokens), nx.transpose(m)))


def interp_channels(tokens: Tensor, d_out: int) -> Tensor:
    """Fixed linear interpolation along the channel axis (the plain-MSE baseline)."""
    d_in = tokens.shape[-1]
    if d_in == d_out:
        return tokens
    w = _kernels.interp_weights_1d(d_in, d_out).T.astype(tokens.dtype)
    return nx.matmul(tokens, Tensor._wrap(w))


@dataclass
class AdapterParams:
    w1: Tensor  # (d_t, h)
    b1: Tensor
    w2: Tensor  # (h, d_s)
    b2: Tensor
    source_grid: int
    target_grid: int

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}w1", self.w1
        yield f"{prefix}b1", self.b1
        yield f"{prefix}w2", self.w2
        yield f"{prefix}b2", self.b2


def init_adapter(d_t: int, d_s: int, g_t: int, g_s: int, rng: np.random.Generator, hidden: int | None = None) -> AdapterParams:
    h = hidden if hidden is not None else max(d_t, d_s)
    if h < max(d_t, d_s) / 2:
        raise ConfigError(f"adapter hidden width {h} below max(d_t, d_s)/2")
    return AdapterParams(
        w1=Tensor(rng.standard_normal((d_t, h)) / math.sqrt(d_t)),
        b1=Tensor(np.zeros(h)),
        w2=Tensor(rng.standard_normal((h, d_s)) / math.sqrt(h)),
        b2=Tensor(np.zeros(d_s)),
        source_grid=g_t,
        target_grid=g_s,
    )


def identity_adapter(d: int, g: int) -> AdapterParams:
    """Weights for which the MLP is exactly x -> x, since gelu(x) - gelu(-x) = x."""
    eye = np.eye(d)
    return AdapterParams(
        w1=Tensor(np.concatenate([eye, -eye], axis=1)),
        b1=Tensor(np.zeros(2 * d)),
        w2=Tensor(np.concatenate([eye, -eye], axis=0)),
        b2=Tensor(np.zeros(d)),
        source_grid=g,
        target_grid=g,
    )


def adapt(params: AdapterParams, tokens: Tensor) -> Tensor:
    d_t = params.w1.shape[0]
    if tokens.shape[-1] != d_t:
        raise ConfigError(f"adapter expects {d_t}-dim teacher tokens, got {tokens.shape}")
    x = align_grid(tokens, params.source_grid, params.target_grid)
    hidden = nx.gelu(nx.add_bias(nx.matmul(x, params.w1), params.b1))
    return nx.add_bias(nx.matmul(hidden, params.w2), params.b2)

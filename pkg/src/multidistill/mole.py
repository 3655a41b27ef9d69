"""Mixture of LoRA experts attached to each student FFN block.

Each token is routed to exactly one low-rank expert by a linear router and
the expert's output is added to the frozen FFN output. Routing is a hard
argmax: the router receives no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .vit import ConfigError, EncoderConfig


@dataclass
class LoRAExpert:
    down: Tensor  # (d, r)
    up: Tensor  # (r, d)

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return nx.matmul(nx.matmul(x, self.down), self.up)


@dataclass
class RouterParams:
    weight: Tensor  # (d, E)
    bias: Tensor  # (E,)

    @property
    def num_experts(self) -> int:
        return self.weight.shape[1]


@dataclass
class MoLELayer:
    router: RouterParams
    experts: list[LoRAExpert]

    def __post_init__(self):
        d, e = self.router.weight.shape
        if e < 1 or len(self.experts) != e:
            raise ConfigError(f"router has {e} outputs for {len(self.experts)} experts")
        ranks = {x.rank for x in self.experts}
        if len(ranks) != 1:
            raise ConfigError(f"experts disagree on rank: {sorted(ranks)}")
        for x in self.experts:
            if x.down.shape[0] != d or x.up.shape != (x.rank, d):
                raise ConfigError(f"expert shapes {x.down.shape}/{x.up.shape} do not fit d={d}")

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}router.weight", self.router.weight
        yield f"{prefix}router.bias", self.router.bias
        for i, x in enumerate(self.experts):
            yield f"{prefix}experts.{i}.down", x.down
            yield f"{prefix}experts.{i}.up", x.up


def init_mole_layer(d: int, num_experts: int, rank: int, rng: np.random.Generator, down_std: float = 0.02) -> MoLELayer:
    """Up-projections start at zero so the layer is the identity on F(x)."""
    if num_experts < 1:
        raise ConfigError(f"num_experts must be >= 1, got {num_experts}")
    if not 1 <= rank < d:
        raise ConfigError(f"LoRA rank must satisfy 1 <= r < d={d}, got {rank}")
    router = RouterParams(
        weight=Tensor(rng.standard_normal((d, num_experts)) / np.sqrt(d)),
        bias=Tensor(np.zeros(num_experts)),
    )
    experts = [
        LoRAExpert(down=Tensor(rng.standard_normal((d, rank)) * down_std), up=Tensor(np.zeros((rank, d))))
        for _ in range(num_experts)
    ]
    return MoLELayer(router, experts)


def router_logits(router: RouterParams, x) -> np.ndarray:
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    return xd @ router.weight.data + router.bias.data


def route(router: RouterParams, x) -> np.ndarray:
    """Per-token expert id. argmax of the logits equals argmax of their softmax."""
    logits = router_logits(router, x)
    if not np.isfinite(logits).all():
        raise nx.NumericError("router logits are not finite")
    return nx.argmax(logits, axis=-1)


def mole_forward(layer: MoLELayer, ffn_out: Tensor, ffn_in: Tensor, tally: np.ndarray | None = None) -> Tensor:
    """F(x) + E_i(x) per token, with i chosen by the router on x."""
    if ffn_out.shape != ffn_in.shape or ffn_in.ndim != 2:
        raise ConfigError(f"mole_forward: ffn_out {ffn_out.shape} vs ffn_in {ffn_in.shape}")
    if ffn_in.shape[1] != layer.router.weight.shape[0]:
        raise ConfigError(f"token dim {ffn_in.shape[1]} vs router dim {layer.router.weight.shape[0]}")
    n = ffn_in.shape[0]
    idx = route(layer.router, ffn_in)
    if tally is not None:
        tally += np.bincount(idx, minlength=layer.router.num_experts)
    out = ffn_out
    for e, expert in enumerate(layer.experts):
        rows = np.flatnonzero(idx == e)
        if rows.size == 0:
            continue
        correction = nx.place_rows(expert(ffn_in[rows]), rows, n)
        out = nx.add(out, correction)
    return out


def mole_param_count(cfg: EncoderConfig, num_experts: int, rank: int) -> tuple[int, int, Fraction]:
    """(MoLE parameters, student parameters including MoLE, exact ratio)."""
    d, h = cfg.embed_dim, cfg.ffn_hidden_dim
    mole = cfg.depth * (num_experts * 2 * rank * d + d * num_experts + num_experts)
    per_block = 4 * d + 4 * d * d + d + d * h + h + h * d + d
    base = cfg.patch_dim * d + d + (cfg.num_tokens + int(cfg.has_cls_token)) * d + cfg.depth * per_block + 2 * d
    if cfg.has_cls_token:
        base += d
    total = base + mole
    return mole, total, Fraction(mole, total)

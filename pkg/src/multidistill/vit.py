"""Minimal pre-norm vision transformer used for the student and every teacher."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    ffn_hidden_dim: int = 128
    has_cls_token: bool = True
    channels: int = 3

    def __post_init__(self):
        for name in ("image_size", "patch_size", "depth", "embed_dim", "num_heads", "ffn_hidden_dim", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for k, v in vars(self).items():
            yield f"{prefix}{k}", v


@dataclass
class EncoderParams:
    config: EncoderConfig
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[BlockParams]
    norm_g: Tensor
    norm_b: Tensor
    cls: Tensor | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}patch_w", self.patch_w
        yield f"{prefix}patch_b", self.patch_b
        if self.cls is not None:
            yield f"{prefix}cls", self.cls
        yield f"{prefix}pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}blocks.{i}.")
        yield f"{prefix}norm_g", self.norm_g
        yield f"{prefix}norm_b", self.norm_b


@dataclass
class EncoderOutput:
    """Forward results; leading batch axis present when produced by ``encode_batch``.

    ``attn_cls_input`` / ``attn_token_input`` are the normalised inputs to the
    final block's attention, i.e. what its query/key projections see.
    """

    tokens: Tensor
    cls_token: Tensor | None = None
    cls_attention_scores: np.ndarray | None = None
    attn_cls_input: np.ndarray | None = None
    attn_token_input: np.ndarray | None = None
    final_wq: np.ndarray | None = None
    final_wk: np.ndarray | None = None
    attention: list[np.ndarray] = field(default_factory=list)


def _normal(rng, shape, std):
    return Tensor(rng.standard_normal(shape) * std)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    d, h = cfg.embed_dim, cfg.ffn_hidden_dim
    n_pos = cfg.num_tokens + (1 if cfg.has_cls_token else 0)
    blocks = []
    for _ in range(cfg.depth):
        blocks.append(
            BlockParams(
                ln1_g=Tensor(np.ones(d)),
                ln1_b=Tensor(np.zeros(d)),
                wq=_normal(rng, (d, d), 1 / math.sqrt(d)),
                wk=_normal(rng, (d, d), 1 / math.sqrt(d)),
                wv=_normal(rng, (d, d), 1 / math.sqrt(d)),
                wo=_normal(rng, (d, d), 1 / math.sqrt(d)),
                bo=Tensor(np.zeros(d)),
                ln2_g=Tensor(np.ones(d)),
                ln2_b=Tensor(np.zeros(d)),
                w1=_normal(rng, (d, h), 1 / math.sqrt(d)),
                b1=Tensor(np.zeros(h)),
                w2=_normal(rng, (h, d), 1 / math.sqrt(h)),
                b2=Tensor(np.zeros(d)),
            )
        )
    return EncoderParams(
        config=cfg,
        patch_w=_normal(rng, (cfg.patch_dim, d), 1 / math.sqrt(cfg.patch_dim)),
        patch_b=Tensor(np.zeros(d)),
        pos=_normal(rng, (n_pos, d), 0.02),
        blocks=blocks,
        norm_g=Tensor(np.ones(d)),
        norm_b=Tensor(np.zeros(d)),
        cls=_normal(rng, (d,), 0.02) if cfg.has_cls_token else None,
    )


def copy_encoder(src: EncoderParams) -> EncoderParams:
    """Deep copy with fresh, untracked leaves."""
    names = dict(src.named_parameters())
    out = init_encoder(src.config, np.random.default_rng(0))
    for name, t in out.named_parameters():
        t.data = names[name].data.copy()
    return out


def _attention(x: Tensor, blk: BlockParams, heads: int):
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        t = nx.reshape(t, (b, n, heads, dh))
        t = nx.transpose(t, (0, 2, 1, 3))
        return nx.reshape(t, (b * heads, n, dh))

    q = split(nx.matmul(x, blk.wq))
    k = split(nx.matmul(x, blk.wk))
    v = split(nx.matmul(x, blk.wv))
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dh))
    att = nx.softmax(scores, axis=-1)
    o = nx.matmul(att, v)
    o = nx.reshape(nx.transpose(nx.reshape(o, (b, heads, n, dh)), (0, 2, 1, 3)), (b, n, d))
    o = nx.add_bias(nx.matmul(o, blk.wo), blk.bo)
    return o, scores.data.reshape(b, heads, n, n), att.data.reshape(b, heads, n, n)


def _check_images(cfg: EncoderConfig, images: Tensor) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ConfigError(f"encoder expects images of shape (B, {want}), got {images.shape}")


def encode_batch(params: EncoderParams, images, mole=None, tally: np.ndarray | None = None) -> EncoderOutput:
    """Forward a (B, H, W, C) batch; ``mole`` is an optional per-block list of MoLE layers."""
    from .mole import mole_forward

    cfg = params.config
    images = nx.as_tensor(images)
    _check_images(cfg, images)
    if mole is not None and len(mole) != cfg.depth:
        raise ConfigError(f"{len(mole)} MoLE layers for an encoder of depth {cfg.depth}")
    b = images.shape[0]
    d = cfg.embed_dim

    x = nx.add_bias(nx.matmul(nx.patchify(images, cfg.patch_size), params.patch_w), params.patch_b)
    if cfg.has_cls_token:
        cls = nx.reshape(nx.expand(params.cls, b), (b, 1, d))
        x = nx.concat([cls, x], axis=1)
    x = nx.add_bias(x, params.pos)
    n_all = x.shape[1]

    out = EncoderOutput(tokens=x)
    for i, blk in enumerate(params.blocks):
        h = nx.layer_norm(x, blk.ln1_g, blk.ln1_b)
        a, scores, att = _attention(h, blk, cfg.num_heads)
        out.attention.append(att)
        if i == cfg.depth - 1:
            out.final_wq, out.final_wk = blk.wq.data, blk.wk.data
            if cfg.has_cls_token:
                out.cls_attention_scores = scores[:, :, 0, 1:].mean(axis=1)
                out.attn_cls_input = h.data[:, 0].copy()
                out.attn_token_input = h.data[:, 1:].copy()
        x = nx.add(x, a)
        h2 = nx.layer_norm(x, blk.ln2_g, blk.ln2_b)
        f = nx.add_bias(nx.matmul(nx.gelu(nx.add_bias(nx.matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2)
        if mole is not None:
            flat = mole_forward(mole[i], nx.reshape(f, (b * n_all, d)), nx.reshape(h2, (b * n_all, d)), tally)
            f = nx.reshape(flat, (b, n_all, d))
        x = nx.add(x, f)
    x = nx.layer_norm(x, params.norm_g, params.norm_b)

    if cfg.has_cls_token:
        out.cls_token = nx.reshape(x[:, 0:1], (b, d))
        out.tokens = x[:, 1:]
    else:
        out.tokens = x
    return out


def encode(params: EncoderParams, image, mole=None, tally=None) -> EncoderOutput:
    """Single (H, W, C) image; returns tokens of shape (n, d)."""
    image = nx.as_tensor(image)
    if image.ndim != 3:
        raise ConfigError(f"encode expects an (H, W, C) image, got {image.shape}")
    cfg = params.config
    batched = encode_batch(params, nx.reshape(image, (1,) + image.shape), mole, tally)
    n, d = cfg.num_tokens, cfg.embed_dim
    out = EncoderOutput(
        tokens=nx.reshape(batched.tokens, (n, d)),
        attention=[a[0] for a in batched.attention],
        final_wq=batched.final_wq,
        final_wk=batched.final_wk,
    )
    if cfg.has_cls_token:
        out.cls_token = nx.reshape(batched.cls_token, (d,))
        out.cls_attention_scores = batched.cls_attention_scores[0]
        out.attn_cls_input = batched.attn_cls_input[0]
        out.attn_token_input = batched.attn_token_input[0]
    return out


def cls_attention_map(out: EncoderOutput) -> np.ndarray:
    """Softmax of the [CLS] scores laid out on the (g, g) patch grid."""
    if out.cls_attention_scores is None:
        raise nx.ContractError("encoder output has no [CLS] token")
    scores = np.asarray(out.cls_attention_scores)
    if scores.ndim != 1:
        raise nx.ContractError(f"expected per-image scores of shape (n,), got {scores.shape}")
    g = math.isqrt(scores.size)
    if g * g != scores.size:
        raise nx.ContractError(f"{scores.size} tokens do not form a square grid")
    probs = _kernels.softmax_rows(scores.reshape(1, -1))
    return probs.reshape(g, g)


def param_count(params: EncoderParams) -> int:
    return int(sum(t.size for _, t in params.named_parameters()))

"""Two-stage distillation training: model assembly, optimizers, steps, runs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .adapters import AdapterParams, adapt, init_adapter, interp_channels, align_grid
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import SyntheticDataset
from .kd import KDWeights, kd_loss, teacher_weights, token_weights, total_loss
from .mole import MoLELayer, init_mole_layer
from .numerics import Tensor
from .vit import EncoderParams, copy_encoder, encode_batch, init_encoder

log = logging.getLogger(__name__)

GROUPS = ("student", "mole", "adapter", "head", "teacher")


@dataclass
class Model:
    config: TrainConfig
    student: EncoderParams
    teachers: list[EncoderParams]
    adapters: list[AdapterParams | None]
    head_w: Tensor
    head_b: Tensor
    mole: list[MoLELayer] | None = None

    def named_parameters(self, include_teachers: bool = True) -> Iterator[tuple[str, Tensor]]:
        yield from self.student.named_parameters("student.")
        if self.mole is not None:
            for i, layer in enumerate(self.mole):
                yield from layer.named_parameters(f"mole.{i}.")
        for spec, ad in zip(self.config.teachers, self.adapters):
            if ad is not None:
                yield from ad.named_parameters(f"adapter.{spec.name}.")
        yield "head.w", self.head_w
        yield "head.b", self.head_b
        if include_teachers:
            for spec, t in zip(self.config.teachers, self.teachers):
                yield from t.named_parameters(f"teacher.{spec.name}.")

    def parameters_dict(self, include_teachers: bool = True) -> dict[str, Tensor]:
        return dict(self.named_parameters(include_teachers))


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def init_model(cfg: TrainConfig) -> Model:
    """Every tensor is drawn from a stream derived from ``cfg.seed``."""
    root = np.random.SeedSequence(cfg.seed)
    s_teach, s_student, s_mole, s_adapt, s_head = root.spawn(5)
    teacher_seeds = s_teach.spawn(len(cfg.teachers))
    teachers = [init_encoder(spec.encoder, np.random.default_rng(ss)) for spec, ss in zip(cfg.teachers, teacher_seeds)]
    clip = teachers[cfg.clip_index]
    if cfg.student_init == "clip" and clip.config == cfg.student:
        student = copy_encoder(clip)
    else:
        student = init_encoder(cfg.student, np.random.default_rng(s_student))

    mole = None
    if cfg.mole_enabled:
        rng = np.random.default_rng(s_mole)
        mole = [init_mole_layer(cfg.student.embed_dim, cfg.mole_num_experts, cfg.mole_rank, rng) for _ in range(cfg.student.depth)]

    adapters: list[AdapterParams | None] = []
    rng = np.random.default_rng(s_adapt)
    for spec in cfg.teachers:
        if cfg.adapter_kind == "interp":
            adapters.append(None)
            continue
        enc = spec.encoder
        adapters.append(
            init_adapter(enc.embed_dim, cfg.student.embed_dim, enc.grid, cfg.student.grid, rng, cfg.adapter_hidden or None)
        )

    rng = np.random.default_rng(s_head)
    d = cfg.student.embed_dim
    head_w = Tensor(rng.standard_normal((d, cfg.num_classes)) / math.sqrt(d))
    head_b = Tensor(np.zeros(cfg.num_classes))
    return Model(cfg, student, teachers, adapters, head_w, head_b, mole)


def trainable_set(stage: str, model: Model) -> set[str]:
    names = [n for n, _ in model.named_parameters()]
    if stage == "pretrain":
        keep = {"mole", "adapter", "head"}
    elif stage == "finetune":
        keep = {"student", "mole", "adapter", "head"}
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return {n for n in names if group_of(n) in keep}


def apply_stage(model: Model, stage: str) -> list[tuple[str, Tensor]]:
    train = trainable_set(stage, model)
    out = []
    for name, t in model.named_parameters():
        t.requires_grad = name in train
        t.grad = None
        if t.requires_grad:
            out.append((name, t))
    return out


# ------------------------------------------------------------------ optimizers


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, Tensor]]) -> None:
        self.t += 1
        for _, p in params:
            if p.grad is not None:
                p.data = p.data - p.dtype.type(self.lr) * p.grad


class Adam:
    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, Tensor]]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params:
            if p.grad is None:
                continue
            dt = p.dtype.type
            m = self.state.get(f"m/{name}")
            v = self.state.get(f"v/{name}")
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            g = p.grad
            m = dt(b1) * m + dt(1 - b1) * g
            v = dt(b2) * v + dt(1 - b2) * g * g
            self.state[f"m/{name}"] = m
            self.state[f"v/{name}"] = v
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(self.lr) * update


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


# ------------------------------------------------------------------ forward / step


@dataclass
class StepReport:
    step: int
    l_text: float
    l_kd: float
    l_total: float
    expert_usage: np.ndarray
    grad_norms: dict[str, float]
    token_weight_sum: float
    teacher_w: np.ndarray
    accuracy: float = float("nan")


@dataclass
class ForwardResult:
    l_text: Tensor
    l_kd: Tensor
    l_total: Tensor
    logits: Tensor
    weights: list[KDWeights]
    usage: np.ndarray


def teacher_tokens(model: Model, images: np.ndarray):
    """Frozen teacher forward passes."""
    with nx.no_grad():
        outs = [encode_batch(t, images) for t in model.teachers]
    return outs


def project_teachers(model: Model, outs) -> list[Tensor]:
    cfg = model.config
    proj = []
    for spec, ad, out in zip(cfg.teachers, model.adapters, outs):
        toks = Tensor._wrap(out.tokens.data)
        if ad is None:
            x = align_grid(toks, spec.encoder.grid, cfg.student.grid)
            proj.append(interp_channels(x, cfg.student.embed_dim))
        else:
            proj.append(adapt(ad, toks))
    return proj


def kd_weights(model: Model, outs, projected: list[Tensor]) -> list[KDWeights]:
    """Per-image token and teacher weights from the frozen reference teacher."""
    cfg = model.config
    kdc = cfg.kd_config()
    ref = outs[cfg.clip_index]
    ws = []
    for b in range(ref.tokens.shape[0]):
        tok = None
        tea = None
        if cfg.token_weighting:
            tok = token_weights(ref.attn_cls_input[b], ref.attn_token_input[b], ref.final_wq, ref.final_wk)
        if cfg.teacher_weighting:
            tea = teacher_weights(ref.cls_token.data[b], [p.data[b] for p in projected], kdc)
        ws.append(KDWeights(tok, tea))
    return ws


def forward(model: Model, images: np.ndarray, labels: np.ndarray, weights: list[KDWeights] | None = None) -> ForwardResult:
    """Full forward pass. Pass ``weights`` to hold the KD weights fixed (gradient checks)."""
    cfg = model.config
    images = Tensor._wrap(images.astype(nx.default_dtype()))
    usage = np.zeros(cfg.mole_num_experts if model.mole else 0, dtype=np.int64)
    s_out = encode_batch(model.student, images, model.mole, usage if model.mole else None)
    pooled = nx.mean(s_out.tokens, axis=1)
    logits = nx.add_bias(nx.matmul(pooled, model.head_w), model.head_b)
    l_text = nx.cross_entropy(logits, labels)

    outs = teacher_tokens(model, images)
    projected = project_teachers(model, outs)
    if weights is None:
        weights = kd_weights(model, outs, projected)
    l_kd = kd_loss(s_out.tokens, projected, weights)
    l_total = total_loss(l_text, l_kd, cfg.kd_config())
    return ForwardResult(l_text, l_kd, l_total, logits, weights, usage)


def _check_finite(res: ForwardResult) -> None:
    for name in ("l_text", "l_kd", "l_total"):
        if not np.isfinite(getattr(res, name).data).all():
            raise nx.NumericError(f"{name} is not finite")


def train_step(model: Model, batch, optimizer, step: int = 0, params: list | None = None) -> StepReport:
    images, labels = batch
    if params is None:
        params = apply_stage(model, model.config.stage)
    for _, p in params:
        p.grad = None
    res = forward(model, images, labels)
    _check_finite(res)
    nx.backward(res.l_total, leaves=[p for _, p in params])
    norms: dict[str, float] = {}
    for name, p in params:
        g = group_of(name)
        norms[g] = norms.get(g, 0.0) + float(np.sum(p.grad.astype(np.float64) ** 2))
    for name, p in params:
        if not np.isfinite(p.grad).all():
            raise nx.NumericError(f"gradient of {name} is not finite")
    optimizer.step(params)
    n = model.config.student.num_tokens
    usage = res.usage / max(1, res.usage.sum())
    tea = np.mean([w.teacher_w if w.teacher_w is not None else np.full(len(model.teachers), 1 / len(model.teachers)) for w in res.weights], axis=0)
    return StepReport(
        step=step,
        l_text=float(res.l_text.data),
        l_kd=float(res.l_kd.data),
        l_total=float(res.l_total.data),
        expert_usage=usage,
        grad_norms={k: math.sqrt(v) for k, v in norms.items()},
        token_weight_sum=float(np.mean([w.effective_token_weights(n).sum() for w in res.weights])),
        teacher_w=tea,
    )


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    if len(labels) == 0:
        return float("nan")
    correct = 0
    with nx.no_grad():
        for i in range(0, len(labels), chunk):
            x = Tensor._wrap(images[i : i + chunk].astype(nx.default_dtype()))
            out = encode_batch(model.student, x, model.mole)
            logits = model.head_b.data + nx.mean(out.tokens, axis=1).data @ model.head_w.data
            correct += int(np.sum(nx.argmax(logits, axis=-1) == labels[i : i + chunk]))
    return correct / len(labels)


def probe(model: Model, batch) -> ForwardResult:
    """Forward on a batch without any update or graph."""
    with nx.no_grad():
        return forward(model, *batch)


def _losses(res: ForwardResult) -> tuple[float, float, float]:
    return float(res.l_text.data), float(res.l_kd.data), float(res.l_total.data)


# ------------------------------------------------------------------ checkpoints


def to_checkpoint(model: Model, optimizer, step: int) -> Checkpoint:
    params = {n: t.data.astype(np.float32) for n, t in model.named_parameters(include_teachers=False)}
    return Checkpoint(
        params=params,
        step=step,
        fingerprint=model.config.fingerprint(),
        optimizer=optimizer.kind if optimizer else "none",
        optimizer_step=optimizer.t if optimizer else 0,
        optimizer_state={k: v.astype(np.float32) for k, v in sorted(optimizer.state.items())} if optimizer else {},
    )


def restore(model: Model, ckpt: Checkpoint, optimizer=None) -> int:
    own = model.parameters_dict(include_teachers=False)
    missing = set(own) - set(ckpt.params)
    extra = set(ckpt.params) - set(own)
    if missing or extra:
        raise ValueError(f"checkpoint parameters do not match model: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
    for name, t in own.items():
        if ckpt.params[name].shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {ckpt.params[name].shape} vs model {t.shape}")
        t.data = ckpt.params[name].astype(t.dtype).copy()
    if optimizer is not None and ckpt.optimizer == optimizer.kind:
        optimizer.t = ckpt.optimizer_step
        optimizer.state = {k: v.copy() for k, v in ckpt.optimizer_state.items()}
    return ckpt.step


# ------------------------------------------------------------------ runs


@dataclass
class RunSummary:
    l_text: float
    l_kd: float
    l_total: float
    accuracy: float
    trace_path: Path
    checkpoint_path: Path
    start_step: int
    end_step: int
    reports: list[StepReport] = field(default_factory=list)
    initial: tuple[float, float, float] = (float("nan"),) * 3
    token_weight_sum: float = float("nan")


def trace_header(num_experts: int) -> list[str]:
    return ["step", "l_text", "l_kd", "l_total"] + [f"expert{i}_frac" for i in range(num_experts)]


def _fmt(x: float) -> str:
    return format(float(np.float32(x)), ".9g")


def run(cfg: TrainConfig, resume: str | Path | None = None, out_dir: str | Path | None = None, model: Model | None = None) -> RunSummary:
    """Train for ``cfg.steps`` steps; write ``trace.csv``, ``checkpoint.mvkd`` and ``config.txt``."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror or e}") from e
    trace_path = out / "trace.csv"
    ckpt_path = out / "checkpoint.mvkd"

    model = model or init_model(cfg)
    optimizer = make_optimizer(cfg)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_fingerprint=cfg.fingerprint())
        start = restore(model, ckpt, optimizer)
    params = apply_stage(model, cfg.stage)
    data = SyntheticDataset(cfg.seed, cfg.image_size, cfg.num_classes, cfg.channels, cfg.data_noise)

    first = probe(model, data.batch(start, cfg.batch_size))
    initial = _losses(first)
    n = cfg.student.num_tokens
    reports = []
    ne = cfg.mole_num_experts if cfg.mole_enabled else 0
    try:
        fh = trace_path.open("w", encoding="utf-8", newline="")
    except OSError as e:
        raise OSError(f"cannot write loss trace {trace_path}: {e.strerror or e}") from e
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(ne))
        for step in range(start, start + cfg.steps):
            rep = train_step(model, data.batch(step, cfg.batch_size), optimizer, step, params)
            reports.append(rep)
            w.writerow([step, _fmt(rep.l_text), _fmt(rep.l_kd), _fmt(rep.l_total)] + [_fmt(u) for u in rep.expert_usage])
            if step % 50 == 0:
                log.info("step %d L_text=%.4f L_kd=%.4f L_total=%.4f", step, rep.l_text, rep.l_kd, rep.l_total)
    end = start + cfg.steps

    try:
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {out / 'config.txt'}: {e.strerror or e}") from e
    save_checkpoint(ckpt_path, to_checkpoint(model, optimizer, end))

    final = _losses(probe(model, data.batch(end, cfg.batch_size)))
    acc = evaluate(model, *data.eval_set(cfg.eval_size))
    if reports:
        tws = float(np.mean([r.token_weight_sum for r in reports]))
    else:
        tws = float(np.mean([w.effective_token_weights(n).sum() for w in first.weights]))
    return RunSummary(*final, acc, trace_path, ckpt_path, start, end, reports, initial, tws)

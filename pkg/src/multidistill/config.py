"""Run configuration and its line-oriented ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .kd import KDConfig, KDConfigError
from .vit import ConfigError as _EncoderConfigError
from .vit import EncoderConfig

STAGES = ("pretrain", "finetune")
DEFAULT_LR = {"pretrain": 1e-3, "finetune": 1e-4}


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {msg}" if where else msg)
        self.line = line


@dataclass(frozen=True)
class TeacherSpec:
    name: str
    encoder: EncoderConfig
    is_clip: bool = False


def _default_teachers() -> tuple[TeacherSpec, ...]:
    return (
        TeacherSpec("clip", EncoderConfig(patch_size=8, depth=2, embed_dim=64, num_heads=4, ffn_hidden_dim=128, has_cls_token=True), True),
        TeacherSpec("eva", EncoderConfig(patch_size=16, depth=2, embed_dim=48, num_heads=4, ffn_hidden_dim=96, has_cls_token=False)),
        TeacherSpec("convnext", EncoderConfig(patch_size=4, depth=1, embed_dim=32, num_heads=2, ffn_hidden_dim=64, has_cls_token=False)),
    )


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    stage: str = "finetune"
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 0.0  # 0 selects the stage default
    optimizer: str = "adam"
    lambda_kd: float = 0.5
    clip_fixed_weight: float = 0.8
    image_size: int = 32
    channels: int = 3
    student: EncoderConfig = EncoderConfig()
    student_init: str = "clip"
    mole_enabled: bool = True
    mole_num_experts: int = 3
    mole_rank: int = 32
    adapter_kind: str = "mlp"
    adapter_hidden: int = 0  # 0 selects max(d_t, d_s)
    token_weighting: bool = True
    teacher_weighting: bool = True
    teachers: tuple[TeacherSpec, ...] = field(default_factory=_default_teachers)
    num_classes: int = 4
    data_noise: float = 0.1
    eval_size: int = 256
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_size < 0:
            raise ConfigError("steps/eval_size must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.adapter_kind not in ("mlp", "interp"):
            raise ConfigError(f"adapter.kind must be mlp or interp, got {self.adapter_kind!r}")
        if self.student_init not in ("clip", "random"):
            raise ConfigError(f"student.init must be clip or random, got {self.student_init!r}")
        if self.mole_num_experts < 1:
            raise ConfigError(f"mole.num_experts must be >= 1, got {self.mole_num_experts}")
        if not 1 <= self.mole_rank < self.student.embed_dim:
            raise ConfigError(f"mole.rank must satisfy 1 <= r < {self.student.embed_dim}, got {self.mole_rank}")
        if not self.student.has_cls_token:
            raise ConfigError("the student needs a [CLS] token")
        if not self.teachers:
            raise ConfigError("at least one teacher is required")
        names = [t.name for t in self.teachers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate teacher names: {names}")
        clips = [t for t in self.teachers if t.is_clip]
        if len(clips) != 1:
            raise ConfigError(f"exactly one teacher must be flagged clip, got {len(clips)}")
        ref = clips[0].encoder
        if not ref.has_cls_token:
            raise ConfigError("the clip teacher needs a [CLS] token")
        if ref.embed_dim != self.student.embed_dim or ref.grid != self.student.grid:
            raise ConfigError("the clip teacher must share the student's embed_dim and patch grid")
        for enc in [self.student] + [t.encoder for t in self.teachers]:
            if enc.image_size != self.image_size or enc.channels != self.channels:
                raise ConfigError("all encoders must share image_size and channels")
        try:
            self.kd_config()
        except KDConfigError as e:
            raise ConfigError(str(e)) from e

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate > 0 else DEFAULT_LR[self.stage]

    @property
    def clip_index(self) -> int:
        return next(i for i, t in enumerate(self.teachers) if t.is_clip)

    def kd_config(self) -> KDConfig:
        clip_index = self.clip_index if len(self.teachers) > 1 else None
        return KDConfig(self.lambda_kd, self.clip_fixed_weight, clip_index)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        """Hash of everything that shapes the parameter set and data stream."""
        keys = [k for k in to_mapping(self) if k.split(".")[0] in _ARCH_ROOTS or k in _ARCH_KEYS]
        m = to_mapping(self)
        blob = "\n".join(f"{k}={m[k]}" for k in sorted(keys))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in to_mapping(self).items())


_ARCH_ROOTS = {"student", "mole", "adapter", "teacher", "teachers"}
_ARCH_KEYS = {"seed", "image_size", "channels", "data.num_classes", "data.noise"}

_ENCODER_FIELDS = ("patch_size", "depth", "embed_dim", "num_heads", "ffn_hidden_dim", "has_cls_token")

# flat key -> TrainConfig attribute
_SCALARS = {
    "seed": "seed",
    "stage": "stage",
    "steps": "steps",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "optimizer": "optimizer",
    "lambda_kd": "lambda_kd",
    "clip_fixed_weight": "clip_fixed_weight",
    "image_size": "image_size",
    "channels": "channels",
    "student.init": "student_init",
    "mole.enabled": "mole_enabled",
    "mole.num_experts": "mole_num_experts",
    "mole.rank": "mole_rank",
    "adapter.kind": "adapter_kind",
    "adapter.hidden": "adapter_hidden",
    "kd.token_weighting": "token_weighting",
    "kd.teacher_weighting": "teacher_weighting",
    "data.num_classes": "num_classes",
    "data.noise": "data_noise",
    "data.eval_size": "eval_size",
    "out_dir": "out_dir",
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_mapping(cfg: TrainConfig) -> dict[str, str]:
    out = {k: _fmt(getattr(cfg, attr)) for k, attr in _SCALARS.items()}
    for f in _ENCODER_FIELDS:
        out[f"student.{f}"] = _fmt(getattr(cfg.student, f))
    out["teachers"] = ", ".join(t.name for t in cfg.teachers)
    for t in cfg.teachers:
        for f in _ENCODER_FIELDS:
            out[f"teacher.{t.name}.{f}"] = _fmt(getattr(t.encoder, f))
        out[f"teacher.{t.name}.clip"] = _fmt(t.is_clip)
    return out


def _coerce(raw: str, like, key: str):
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_text(text: str, path: str | None = None) -> TrainConfig:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno, path)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, path)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        entries[key] = (value, lineno)
    return from_entries(entries, path)


def from_entries(entries: dict[str, tuple[str, int]], path: str | None = None) -> TrainConfig:
    base = TrainConfig()
    kwargs = {}
    student = {f: getattr(base.student, f) for f in _ENCODER_FIELDS}
    if "teachers" in entries:
        names = [n.strip() for n in entries["teachers"][0].split(",") if n.strip()]
    else:
        names = [t.name for t in base.teachers]
    defaults = {t.name: t for t in base.teachers}
    teacher_vals = {}
    for n in names:
        spec = defaults.get(n)
        vals = {f: getattr(spec.encoder, f) for f in _ENCODER_FIELDS} if spec else {f: getattr(EncoderConfig(has_cls_token=False), f) for f in _ENCODER_FIELDS}
        vals["clip"] = spec.is_clip if spec else False
        teacher_vals[n] = vals

    for key, (raw, lineno) in entries.items():
        try:
            if key in _SCALARS:
                attr = _SCALARS[key]
                kwargs[attr] = _coerce(raw, getattr(base, attr), key)
            elif key.startswith("student.") and key[8:] in _ENCODER_FIELDS:
                f = key[8:]
                student[f] = _coerce(raw, student[f], key)
            elif key == "teachers":
                continue
            elif key.startswith("teacher."):
                parts = key.split(".")
                if len(parts) != 3 or parts[1] not in teacher_vals or parts[2] not in teacher_vals[parts[1]]:
                    raise ValueError(f"unknown teacher key {key!r} (teachers: {', '.join(names)})")
                vals = teacher_vals[parts[1]]
                vals[parts[2]] = _coerce(raw, vals[parts[2]], key)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise ConfigError(str(e), lineno, path) from e

    image_size = kwargs.get("image_size", base.image_size)
    channels = kwargs.get("channels", base.channels)
    try:
        kwargs["student"] = EncoderConfig(image_size=image_size, channels=channels, **student)
        teachers = []
        for n in names:
            vals = dict(teacher_vals[n])
            is_clip = vals.pop("clip")
            teachers.append(TeacherSpec(n, EncoderConfig(image_size=image_size, channels=channels, **vals), is_clip))
        kwargs["teachers"] = tuple(teachers)
        return TrainConfig(**kwargs)
    except (_EncoderConfigError, ConfigError) as e:
        raise ConfigError(str(e), None, path) from e


def load_config(path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read config {p}: {e.strerror or e}") from e
    return parse_text(text, str(p))

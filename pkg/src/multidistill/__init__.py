"""Distil several frozen vision encoders into one student ViT.

The student carries a mixture of LoRA experts on every FFN block; teacher
tokens are projected by per-teacher adapters; the distillation loss is
weighted per token and per teacher from a reference teacher's [CLS]
attention.
"""

from .config import TrainConfig, load_config, parse_text
from .kd import KDConfig, KDWeights, kd_loss, teacher_weights, token_weights, total_loss
from .mole import mole_forward, mole_param_count, route
from .numerics import Tensor, backward
from .train import init_model, run, train_step, trainable_set
from .vit import EncoderConfig, cls_attention_map, encode

__all__ = [
    "EncoderConfig",
    "KDConfig",
    "KDWeights",
    "Tensor",
    "TrainConfig",
    "backward",
    "cls_attention_map",
    "encode",
    "init_model",
    "kd_loss",
    "load_config",
    "mole_forward",
    "mole_param_count",
    "parse_text",
    "route",
    "run",
    "teacher_weights",
    "token_weights",
    "total_loss",
    "train_step",
    "trainable_set",
]
__version__ = "0.1.0"

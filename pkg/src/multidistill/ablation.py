"""Cumulative ablation ladder: each variant adds one component to the previous."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .config import TrainConfig
from .train import run

LADDER = ("mse-baseline", "+adapter", "+mole", "+token-w", "+teacher-w")

_SWITCHES = {
    "mse-baseline": {},
    "+adapter": {"adapter_kind": "mlp"},
    "+mole": {"mole_enabled": True},
    "+token-w": {"token_weighting": True},
    "+teacher-w": {"teacher_weighting": True},
}


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in LADDER:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(LADDER)}")
    changes = dict(adapter_kind="interp", mole_enabled=False, token_weighting=False, teacher_weighting=False)
    for v in LADDER[: LADDER.index(variant) + 1]:
        changes.update(_SWITCHES[v])
    return cfg.replace(**changes)


@dataclass
class AblationRow:
    variant: str
    seed: int
    initial_l_kd: float
    final_l_kd: float
    final_l_text: float
    final_accuracy: float
    token_weight_sum: float


FIELDS = ("variant", "seed", "initial_l_kd", "final_l_kd", "final_l_text", "final_accuracy", "token_weight_sum")


def _dirname(variant: str) -> str:
    return variant.replace("+", "plus-")


def run_ladder(cfg: TrainConfig, out_dir, variants=LADDER) -> list[AblationRow]:
    """Run each variant on the same seed and data; write ``ablation.csv``."""
    out = Path(out_dir)
    rows = []
    for v in variants:
        vcfg = variant_config(cfg, v)
        summary = run(vcfg, out_dir=out / _dirname(v))
        rows.append(
            AblationRow(v, cfg.seed, summary.initial[1], summary.l_kd, summary.l_text, summary.accuracy, summary.token_weight_sum)
        )
    path = out / "ablation.csv"
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            for r in rows:
                w.writerow([r.variant, r.seed] + [format(getattr(r, f), ".9g") for f in FIELDS[2:]])
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return rows

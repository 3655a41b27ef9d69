"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 config, 4 numeric failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .ablation import LADDER, run_ladder
from .checkpoint import CheckpointError, FingerprintMismatchError, load_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .data import SyntheticDataset
from .mole import mole_param_count
from .oracles import count_parameters
from .train import group_of, init_model, restore, run
from .vit import ConfigError as EncoderConfigError
from .vit import cls_attention_map, encode

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


def _load(path) -> TrainConfig:
    return load_config(path)


def cmd_distill(args) -> int:
    cfg = _load(args.config)
    changes = {}
    if args.stage:
        changes["stage"] = args.stage
    if args.steps is not None:
        changes["steps"] = args.steps
    if changes:
        cfg = cfg.replace(**changes)
    s = run(cfg, resume=args.resume, out_dir=args.out)
    print(f"trace: {s.trace_path}")
    print(f"checkpoint: {s.checkpoint_path}")
    print(f"accuracy={s.accuracy:.4f} steps={s.start_step}..{s.end_step}")
    print(f"L_text={s.l_text:.6f} L_kd={s.l_kd:.6f} L_total={s.l_total:.6f}")
    return EXIT_OK


def param_table(cfg: TrainConfig) -> dict[str, int]:
    model = init_model(cfg)
    counts = {"student": 0, "mole": 0, "adapter": 0, "head": 0, "teacher": 0}
    for name, t in model.named_parameters():
        counts[group_of(name)] += count_parameters([(name, t)])
    return counts


def cmd_inspect(args) -> int:
    cfg = _load(args.config)
    counts = param_table(cfg)
    mole, total, ratio = mole_param_count(cfg.student, cfg.mole_num_experts, cfg.mole_rank)
    if not cfg.mole_enabled:
        print("note: mole.enabled = false; counts below describe the MoLE that would be attached")
        counts["mole"] = mole
    enumerated_total = counts["student"] + counts["mole"]
    rows = [
        ("student base", counts["student"]),
        ("MoLE", counts["mole"]),
        ("adapters", counts["adapter"]),
        ("proxy head", counts["head"]),
        ("teachers (frozen)", counts["teacher"]),
        ("student total (base + MoLE)", enumerated_total),
    ]
    width = max(len(r[0]) for r in rows)
    for label, n in rows:
        print(f"{label:<{width}}  {n:>12,d}")
    print(f"MoLE ratio (MoLE / student total) = {float(ratio):.4f}  ({float(ratio) * 100:.2f}%)")
    match = (counts["mole"], enumerated_total) == (mole, total)
    print(f"closed form: {mole} / {total}; enumeration: {counts['mole']} / {enumerated_total}; {'match' if match else 'MISMATCH'}")
    return EXIT_OK if match else EXIT_NUMERIC


def write_pgm(path: Path, grid: np.ndarray) -> None:
    """Binary P5, min-max scaled to 0..255; a constant map becomes all 128."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi - lo <= 0:
        pix = np.full(g.shape, 128, dtype=np.uint8)
    else:
        pix = np.round((g - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = g.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def write_grid_csv(path: Path, grid: np.ndarray) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid, dtype=np.float64):
            w.writerow([format(v, ".9g") for v in row])


def cmd_export(args) -> int:
    ckpt_path = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt_path.parent / "config.txt"
    cfg = _load(cfg_path)
    ckpt = load_checkpoint(ckpt_path, expected_fingerprint=cfg.fingerprint())
    model = init_model(cfg)
    restore(model, ckpt)
    image, _ = SyntheticDataset(args.image_seed, cfg.image_size, cfg.num_classes, cfg.channels, cfg.data_noise).sample(0)
    with nx.no_grad():
        clip_out = encode(model.teachers[cfg.clip_index], image)
        student_out = encode(model.student, image, model.mole)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, o in (("clip_attn", clip_out), ("student_attn", student_out)):
            grid = cls_attention_map(o)
            write_pgm(out / f"{name}.pgm", grid)
            write_grid_csv(out / f"{name}.csv", grid)
    except OSError as e:
        raise OSError(f"cannot write attention maps under {out}: {e.strerror or e}") from e
    print(f"wrote clip_attn/student_attn .pgm and .csv to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["steps"] = args.steps
    if changes:
        cfg = cfg.replace(**changes)
    variants = LADDER if not args.matrix else tuple(args.matrix)
    out = Path(args.out or Path(cfg.out_dir) / "ablation")
    rows = run_ladder(cfg, out, variants)
    print(f"{'variant':<14} {'L_kd(0)':>10} {'L_kd':>10} {'accuracy':>9} {'sum tok w':>9}")
    for r in rows:
        print(f"{r.variant:<14} {r.initial_l_kd:>10.5f} {r.final_l_kd:>10.5f} {r.final_accuracy:>9.4f} {r.token_weight_sum:>9.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    return EXIT_OK if run_checks() else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multidistill", description="Multi-teacher attention-guided distillation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="run a training stage")
    d.add_argument("--config", required=True)
    d.add_argument("--stage", choices=("pretrain", "finetune"))
    d.add_argument("--resume")
    d.add_argument("--out", help="output directory (default: out_dir from the config)")
    d.add_argument("--steps", type=int)
    d.set_defaults(func=cmd_distill)

    i = sub.add_parser("inspect-params", help="parameter counts and MoLE overhead")
    i.add_argument("--config", required=True)
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("export-attention", help="write [CLS] attention maps as PGM and CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--image-seed", type=int, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="default: config.txt next to the checkpoint")
    e.set_defaults(func=cmd_export)

    a = sub.add_parser("ablate", help="run the cumulative ablation ladder")
    a.add_argument("--config", required=True)
    a.add_argument("--matrix", nargs="+", choices=LADDER, help="variants to run (default: all five)")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run the built-in oracle checks")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, EncoderConfigError, FingerprintMismatchError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (nx.NumericError, nx.ContractError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--steps N]

Prints per-kernel medians for both backends, then a reference-config train
step under each. Numba timings exclude the first (compiling) call.
"""

from __future__ import annotations

import argparse
import statistics
import time
from pathlib import Path

import numpy as np

from multidistill import _kernels as K
from multidistill.config import load_config
from multidistill.data import SyntheticDataset
from multidistill.train import apply_stage, init_model, make_optimizer, train_step

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.cfg"


def median_time(fn, repeat: int) -> float:
    fn()
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def kernel_cases(rng):
    scores = rng.standard_normal((16 * 4 * 17, 17)).astype(np.float32)
    probs = K.softmax_rows(scores)
    grad = rng.standard_normal(scores.shape).astype(np.float32)
    x = rng.standard_normal((16 * 17, 64)).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = K.layer_norm(x, gamma, beta, 1e-5)
    h = rng.standard_normal((16 * 17, 128)).astype(np.float32)
    return {
        "softmax_rows": lambda: K.softmax_rows(scores),
        "softmax_rows_grad": lambda: K.softmax_rows_grad(probs, grad),
        "layer_norm": lambda: K.layer_norm(x, gamma, beta, 1e-5),
        "layer_norm_grad": lambda: K.layer_norm_grad(x, xhat, rstd, gamma),
        "gelu": lambda: K.gelu(h),
        "gelu_grad": lambda: K.gelu_grad(h, h),
        "bilinear_matrix(8->4)": lambda: K.bilinear_matrix(8, 4),
    }


def train_step_time(steps: int) -> float:
    cfg = load_config(REFERENCE)
    model = init_model(cfg)
    opt = make_optimizer(cfg)
    params = apply_stage(model, cfg.stage)
    data = SyntheticDataset(cfg.seed, cfg.image_size)
    batches = [data.batch(i, cfg.batch_size) for i in range(steps + 1)]
    train_step(model, batches[0], opt, 0, params)
    t0 = time.perf_counter()
    for i in range(1, steps + 1):
        train_step(model, batches[i], opt, i, params)
    return (time.perf_counter() - t0) / steps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    results = {}
    for backend in ("numpy", "numba"):
        with K.use_backend(backend):
            cases = kernel_cases(rng)
            results[backend] = {name: median_time(fn, args.repeat) for name, fn in cases.items()}
            results[backend]["train_step (reference)"] = train_step_time(args.steps)

    print(f"{'kernel':<24} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>8}")
    for name in results["numpy"]:
        a, b = results["numpy"][name] * 1e6, results["numba"][name] * 1e6
        print(f"{name:<24} {a:>12.1f} {b:>12.1f} {a / b:>7.2f}x")


if __name__ == "__main__":
    main()

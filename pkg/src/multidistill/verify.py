"""Built-in oracle suite behind ``multidistill verify``."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from . import oracles
from .adapters import adapt, align_grid, init_adapter
from .checkpoint import Checkpoint, decode, encode
from .gradcheck import check_gradients, max_rel_error
from .kd import KDConfig, KDWeights, kd_loss, teacher_weights, token_weights
from .mole import init_mole_layer, mole_forward, mole_param_count, route
from .numerics import Tensor
from .vit import EncoderConfig, encode as encode_image, init_encoder

Check = Callable[[], tuple[bool, str]]


def _matmul() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    err = np.abs(nx.matmul(Tensor(a), Tensor(b)).data - oracles.matmul_loop(a.astype(np.float32), b.astype(np.float32))).max()
    return err <= 1e-6, f"max |diff| {err:.2e} (tol 1e-6)"


def _softmax() -> tuple[bool, str]:
    y = nx.softmax(Tensor([1.0, 2.0, 3.0])).data
    err = np.abs(y - oracles.softmax_direct([1.0, 2.0, 3.0])).max()
    return err <= 1e-6, f"max |diff| {err:.2e} (tol 1e-6)"


def _mse() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    v = float(nx.mse(Tensor(a), Tensor(b)).data)
    err = abs(v - oracles.mse_loop(a.astype(np.float32), b.astype(np.float32)))
    return err <= 1e-6, f"|diff| {err:.2e}"


def _backward_mse() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    with nx.precision(np.float64):
        w = Tensor(rng.standard_normal((3, 3)))
        x = Tensor(rng.standard_normal((3, 3)))
        y = Tensor(rng.standard_normal((3, 3)))
        s = check_gradients(lambda: nx.mse(nx.matmul(w, x), y), {"w": w, "x": x}, count=18)
    e = max_rel_error(s)
    return e <= 1e-4, f"max rel err {e:.2e} over {len(s)} entries"


def _kd_loop() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        m, n, c = (int(v) for v in rng.integers(1, 5, size=3))
        s = rng.standard_normal((n, c))
        ts = [rng.standard_normal((n, c)) for _ in range(m)]
        tok = rng.dirichlet(np.ones(n))
        tea = rng.dirichlet(np.ones(m))
        with nx.precision(np.float64):
            v = float(kd_loss(Tensor(s), [Tensor(t) for t in ts], KDWeights(tok, tea)).data)
        worst = max(worst, abs(v - oracles.kd_loss_loop(s, ts, tok, tea)))
    return worst <= 1e-6, f"max |diff| {worst:.2e} over 20 instances"


def _weights() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    d, n = 8, 9
    tw = token_weights(rng.standard_normal(d), rng.standard_normal((n, d)), rng.standard_normal((d, d)), rng.standard_normal((d, d)))
    te = teacher_weights(rng.standard_normal(d), [rng.standard_normal((n, d)) for _ in range(3)], KDConfig())
    ok = abs(tw.sum() - 1) <= 1e-6 and abs(te.sum() - 1) <= 1e-6 and te[0] == 0.8 and abs((tw + 1 / n).sum() - 2) <= 1e-6
    return ok, f"sum W_tok {tw.sum():.7f}, sum W_tea {te.sum():.7f}, W_tea[clip] {te[0]}"


def _bilinear() -> tuple[bool, str]:
    grid = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
    out = align_grid(Tensor(grid.reshape(4, 3)), 2, 4).data.reshape(4, 4, 3)
    err = np.abs(out - oracles.bilinear_scripted(grid, 4)).max()
    return err <= 1e-6, f"max |diff| {err:.2e}"


def _adapter() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    ad = init_adapter(6, 5, 2, 2, rng)
    x = rng.standard_normal((4, 6))
    got = adapt(ad, Tensor(x)).data
    want = oracles.adapter_loop(x.astype(np.float32), ad.w1.data, ad.b1.data, ad.w2.data, ad.b2.data)
    err = np.abs(got - want).max()
    return err <= 1e-5, f"max |diff| {err:.2e}"


def _mole_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    layer = init_mole_layer(16, 3, 4, rng)
    x = Tensor(rng.standard_normal((10, 16)))
    f = Tensor(rng.standard_normal((10, 16)))
    out = mole_forward(layer, f, x).data
    return bool(np.array_equal(out, f.data)), "zero up-projections leave F(x) unchanged"


def _routing() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    z = rng.standard_normal((1000, 5))
    a = nx.argmax(z)
    ok = np.array_equal(a, nx.argmax(nx.softmax(Tensor(z)).data)) and np.array_equal(a, nx.argmax(3.7 * z))
    layer = init_mole_layer(4, 3, 1, rng)
    layer.router.weight.data[:] = 0
    layer.router.bias.data[:] = 0
    ties = route(layer.router, rng.standard_normal((5, 4)))
    ok = ok and bool((ties == 0).all())
    return ok, "argmax/softmax agreement, scale invariance, lowest-index ties"


def _param_count() -> tuple[bool, str]:
    cfg = EncoderConfig(image_size=32, patch_size=8, depth=4, embed_dim=256, num_heads=4, ffn_hidden_dim=512)
    rng = np.random.default_rng(8)
    mole, total, _ = mole_param_count(cfg, 3, 32)
    enc = init_encoder(cfg, rng)
    layers = [init_mole_layer(256, 3, 32, rng) for _ in range(cfg.depth)]
    named = list(enc.named_parameters())
    for i, lyr in enumerate(layers):
        named += list(lyr.named_parameters(f"mole.{i}."))
    counted = oracles.count_parameters(named)
    counted_mole = oracles.count_parameters([kv for kv in named if kv[0].startswith("mole.")])
    return (counted, counted_mole) == (total, mole), f"formula {mole}/{total}, enumeration {counted_mole}/{counted}"


def _checkpoint() -> tuple[bool, str]:
    rng = np.random.default_rng(9)
    ck = Checkpoint(params={"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32(rng.standard_normal(5))}, step=7, fingerprint="abc")
    buf = encode(ck)
    ok = decode(buf) == ck and encode(decode(buf)) == buf
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.mvkd"
        p.write_bytes(buf[:-7])
        try:
            decode(p.read_bytes())
            ok = False
        except Exception as e:  # noqa: BLE001
            ok = ok and type(e).__name__ == "TruncatedError"
    return ok, f"{len(buf)} bytes, bit-exact round trip, truncation detected"


def _encoder() -> tuple[bool, str]:
    cfg = EncoderConfig(image_size=16, patch_size=8, depth=1, embed_dim=8, num_heads=1, ffn_hidden_dim=16)
    rng = np.random.default_rng(10)
    with nx.precision(np.float64):
        p = init_encoder(cfg, rng)
        img = rng.standard_normal((16, 16, 3))
        out = encode_image(p, img)
    toks, cls, scores = oracles.encoder_scripted({k: t.data for k, t in p.named_parameters()}, img)
    err = max(np.abs(out.tokens.data - toks).max(), np.abs(out.cls_token.data - cls).max(), np.abs(out.cls_attention_scores - scores).max())
    return err <= 1e-5, f"max |diff| {err:.2e}"


def _kd_grad() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    with nx.precision(np.float64):
        s = Tensor(rng.standard_normal((3, 4)))
        ts = [Tensor(rng.standard_normal((3, 4))) for _ in range(2)]
        w = KDWeights(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(2)))
        samples = check_gradients(lambda: kd_loss(s, ts, w), {"student": s}, count=12)
    e = max_rel_error(samples)
    return e <= 1e-4, f"max rel err {e:.2e}"


CHECKS: list[tuple[str, Check]] = [
    ("matmul vs triple loop", _matmul),
    ("softmax vs direct formula", _softmax),
    ("mse vs loop", _mse),
    ("backward: mse(Wx, y) finite differences", _backward_mse),
    ("kd_loss vs triple loop", _kd_loop),
    ("weight normalisation", _weights),
    ("align_grid vs scripted bilinear", _bilinear),
    ("adapter vs loop oracle", _adapter),
    ("MoLE identity at init", _mole_identity),
    ("routing invariants", _routing),
    ("MoLE parameter count vs enumeration", _param_count),
    ("checkpoint round trip", _checkpoint),
    ("encoder vs scripted forward", _encoder),
    ("kd_loss gradient finite differences", _kd_grad),
]


def run_checks(echo=print) -> bool:
    width = max(len(n) for n, _ in CHECKS)
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # noqa: BLE001 - report any failure as a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= bool(ok)
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    echo(f"{sum(1 for _ in CHECKS)} checks, {'all passed' if all_ok else 'FAILURES'}")
    return all_ok


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(0 if run_checks() else 4)


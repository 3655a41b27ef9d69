"""Slow reference implementations used to cross-check the vectorised code.

Everything here is written with explicit Python loops (or plain float64
numpy for the scripted encoder) and shares no code with the paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loop(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def mse_loop(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    s = 0.0
    for x, y in zip(a, b):
        s += (x - y) ** 2
    return s / len(a)


def softmax_direct(v):
    e = [math.exp(x) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def gelu_scalar(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def kd_loss_loop(student, teachers, token_w, teacher_w) -> float:
    """Eq.-2 style triple loop: teachers, tokens, channels."""
    student = np.asarray(student, dtype=np.float64)
    n, c = student.shape
    total = 0.0
    for i, t in enumerate(teachers):
        t = np.asarray(t, dtype=np.float64)
        acc = 0.0
        for j in range(n):
            sq = 0.0
            for k in range(c):
                sq += (t[j, k] - student[j, k]) ** 2
            acc += (token_w[j] + 1.0 / n) * (sq / c)
        total += teacher_w[i] * acc
    return total


def bilinear_scripted(grid, g_s: int):
    """Resample a (g_t, g_t, d) grid to (g_s, g_s, d) one output cell at a time.

    Sample positions use half-pixel centres and clamp at the border.
    """
    grid = np.asarray(grid, dtype=np.float64)
    g_t = grid.shape[0]
    out = np.zeros((g_s, g_s, grid.shape[2]))

    def coord(i):
        x = (i + 0.5) * g_t / g_s - 0.5
        x = min(max(x, 0.0), g_t - 1)
        x0 = int(math.floor(x))
        x1 = min(x0 + 1, g_t - 1)
        return x0, x1, x - x0

    for r in range(g_s):
        r0, r1, fr = coord(r)
        for c in range(g_s):
            c0, c1, fc = coord(c)
            out[r, c] = (
                (1 - fr) * (1 - fc) * grid[r0, c0]
                + (1 - fr) * fc * grid[r0, c1]
                + fr * (1 - fc) * grid[r1, c0]
                + fr * fc * grid[r1, c1]
            )
    return out


def adapter_loop(tokens, w1, b1, w2, b2):
    tokens, w1, b1, w2, b2 = (np.asarray(a, dtype=np.float64) for a in (tokens, w1, b1, w2, b2))
    n = tokens.shape[0]
    h = w1.shape[1]
    d_out = w2.shape[1]
    out = np.zeros((n, d_out))
    for j in range(n):
        hidden = [gelu_scalar(sum(tokens[j, k] * w1[k, u] for k in range(w1.shape[0])) + b1[u]) for u in range(h)]
        for o in range(d_out):
            out[j, o] = sum(hidden[u] * w2[u, o] for u in range(h)) + b2[o]
    return out


def layer_norm_ref(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def encoder_scripted(params, image):
    """Plain float64 forward of a single-head encoder, mirroring the documented pipeline.

    ``params`` is a name -> array mapping as produced by ``named_parameters``.
    Returns (tokens, cls_state, cls_scores).
    """
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[0]
    d = p["patch_b"].shape[0]
    patch = int(round(math.sqrt(p["patch_w"].shape[0] / image.shape[2])))
    g = size // patch
    rows = []
    for r in range(g):
        for c in range(g):
            rows.append(image[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch, :].reshape(-1))
    x = np.array(rows) @ p["patch_w"] + p["patch_b"]
    has_cls = "cls" in p
    if has_cls:
        x = np.vstack([p["cls"][None, :], x])
    x = x + p["pos"]
    depth = len({k.split(".")[1] for k in p if k.startswith("blocks.")})
    scores = None
    for i in range(depth):
        bp = {k.split(".", 2)[2]: v for k, v in p.items() if k.startswith(f"blocks.{i}.")}
        h = layer_norm_ref(x, bp["ln1_g"], bp["ln1_b"])
        q, k, v = h @ bp["wq"], h @ bp["wk"], h @ bp["wv"]
        s = q @ k.T / math.sqrt(d)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a = a / a.sum(axis=1, keepdims=True)
        scores = s
        x = x + (a @ v) @ bp["wo"] + bp["bo"]
        h2 = layer_norm_ref(x, bp["ln2_g"], bp["ln2_b"])
        pre = h2 @ bp["w1"] + bp["b1"]
        act = 0.5 * pre * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (pre + 0.044715 * pre**3)))
        x = x + act @ bp["w2"] + bp["b2"]
    x = layer_norm_ref(x, p["norm_g"], p["norm_b"])
    if has_cls:
        return x[1:], x[0], scores[0, 1:]
    return x, None, None


def count_parameters(named) -> int:
    """Brute-force element count over every (name, tensor) pair."""
    total = 0
    for _, t in named:
        n = 1
        for dim in t.shape:
            n *= int(dim)
        total += n
    return total


def central_difference(f, arr: np.ndarray, idx, step: float = 1e-3) -> float:
    """d f / d arr[idx] by central differences; restores arr in place."""
    orig = arr[idx]
    arr[idx] = orig + step
    fp = f()
    arr[idx] = orig - step
    fm = f()
    arr[idx] = orig
    return (fp - fm) / (2.0 * step)

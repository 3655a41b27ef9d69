"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``MULTIDISTILL_BACKEND``
(``numba`` or ``numpy``); ``numba`` is the default when it imports.
``use_backend`` switches it temporarily, which the tests and the
benchmark use to compare both paths on the same inputs.

Every kernel takes and returns C-contiguous float arrays and keeps the
input dtype. Both paths are deterministic; they agree to float rounding
but are not bit-identical to each other.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("MULTIDISTILL_BACKEND", "numba" if HAS_NUMBA else "numpy").strip().lower()
    if name not in _VALID:
        raise ValueError(f"MULTIDISTILL_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        name = "numpy"
    return name


_backend = _initial_backend()


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


# ---------------------------------------------------------------- numpy path


def _softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_grad_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _layer_norm_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layer_norm_grad_np(g, xhat, rstd, gamma):
    d = xhat.shape[1]
    dxhat = g * gamma
    a = dxhat.sum(axis=1, keepdims=True)
    b = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (rstd[:, None] / d) * (d * dxhat - a - xhat * b)
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx.astype(g.dtype), dgamma.astype(g.dtype), dbeta.astype(g.dtype)


# Both GELU paths evaluate in float64 so the backends agree in the tails.
def _gelu_np(x):
    v = x.astype(np.float64)
    t = np.tanh(GELU_K * (v + GELU_C * v * v * v))
    return (0.5 * v * (1.0 + t)).astype(x.dtype)


def _gelu_grad_np(x, g):
    dt = x.dtype
    x = x.astype(np.float64)
    inner = GELU_K * (x + GELU_C * x * x * x)
    t = np.tanh(inner)
    dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)).astype(dt)


def interp_weights_1d(src: int, dst: int) -> np.ndarray:
    """(dst, src) half-pixel-centred linear interpolation weights, edges clamped."""
    w = np.zeros((dst, src), dtype=np.float64)
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def _bilinear_matrix_np(src: int, dst: int) -> np.ndarray:
    w = interp_weights_1d(src, dst)
    # grid index is row-major (row * g + col); separable in rows and cols
    return np.kron(w, w)


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            m = x[i, 0]
            for j in range(1, x.shape[1]):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(x.shape[1]):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(x.shape[1]):
                out[i, j] = out[i, j] * inv
        return out

    @njit(cache=True)
    def _softmax_rows_grad_nb(y, g):
        out = np.empty_like(y)
        for i in range(y.shape[0]):
            dot = 0.0
            for j in range(y.shape[1]):
                dot += g[i, j] * y[i, j]
            for j in range(y.shape[1]):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _layer_norm_nb(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def _layer_norm_grad_nb(g, xhat, rstd, gamma):
        n, d = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(d, dtype=g.dtype)
        dbeta = np.zeros(d, dtype=g.dtype)
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(d):
                dh = g[i, j] * gamma[j]
                a += dh
                b += dh * xhat[i, j]
            for j in range(d):
                dh = g[i, j] * gamma[j]
                dx[i, j] = rstd[i] / d * (d * dh - a - xhat[i, j] * b)
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
        return dx, dgamma, dbeta

    @njit(cache=True, inline="always")
    def _tanh_nb(u):
        # one exp instead of libm tanh, which numba cannot vectorise
        e = math.exp(-2.0 * abs(u))
        t = (1.0 - e) / (1.0 + e)
        return -t if u < 0 else t

    @njit(cache=True)
    def _gelu_nb(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = np.float64(x[i])
            t = _tanh_nb(GELU_K * (v + GELU_C * v * v * v))
            out[i] = 0.5 * v * (1.0 + t)
        return out

    @njit(cache=True)
    def _gelu_grad_nb(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            v = np.float64(x[i])
            t = _tanh_nb(GELU_K * (v + GELU_C * v * v * v))
            dinner = GELU_K * (1.0 + 3.0 * GELU_C * v * v)
            out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out

    @njit(cache=True)
    def _bilinear_matrix_nb(src, dst):
        w = np.zeros((dst, src))
        scale = src / dst
        for i in range(dst):
            pos = (i + 0.5) * scale - 0.5
            if pos < 0.0:
                pos = 0.0
            if pos > src - 1:
                pos = src - 1.0
            lo = int(math.floor(pos))
            hi = min(lo + 1, src - 1)
            frac = pos - lo
            w[i, lo] += 1.0 - frac
            w[i, hi] += frac
        out = np.zeros((dst * dst, src * src))
        for r in range(dst):
            for c in range(dst):
                for sr in range(src):
                    wr = w[r, sr]
                    if wr == 0.0:
                        continue
                    for sc in range(src):
                        out[r * dst + c, sr * src + sc] = wr * w[c, sc]
        return out


# ---------------------------------------------------------------- dispatch


def _c(x):
    return np.ascontiguousarray(x)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    if _backend == "numba":
        return _softmax_rows_nb(_c(x))
    return _softmax_rows_np(x)


def softmax_rows_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if _backend == "numba":
        return _softmax_rows_grad_nb(_c(y), _c(g))
    return _softmax_rows_grad_np(y, g)


def layer_norm(x, gamma, beta, eps):
    """Returns (y, xhat, rstd) for row-wise normalisation of a 2-D array."""
    if _backend == "numba":
        return _layer_norm_nb(_c(x), _c(gamma), _c(beta), x.dtype.type(eps))
    return _layer_norm_np(x, gamma, beta, x.dtype.type(eps))


def layer_norm_grad(g, xhat, rstd, gamma):
    """Returns (dx, dgamma, dbeta)."""
    if _backend == "numba":
        return _layer_norm_grad_nb(_c(g), _c(xhat), _c(rstd), _c(gamma))
    return _layer_norm_grad_np(g, xhat, rstd, gamma)


def gelu(x: np.ndarray) -> np.ndarray:
    if _backend == "numba":
        return _gelu_nb(_c(x).ravel()).reshape(x.shape)
    return _gelu_np(x)


def gelu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if _backend == "numba":
        return _gelu_grad_nb(_c(x).ravel(), _c(g).ravel()).reshape(x.shape)
    return _gelu_grad_np(x, g)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Float64 (dst*dst, src*src) matrix resampling a row-major src grid to dst."""
    if _backend == "numba":
        return _bilinear_matrix_nb(src, dst)
    return _bilinear_matrix_np(src, dst)

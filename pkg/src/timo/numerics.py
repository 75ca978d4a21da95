"""Dense numpy kernels with hand-written adjoints.

Every primitive takes and returns plain ``np.ndarray`` values. Backward
functions are explicit: ``foo_backward(grad_out, ...)`` returns the adjoints
of the inputs of ``foo``. Reductions that matter for reproducibility
(``matmul``) accumulate in a fixed left-to-right order so results never
depend on the BLAS build or thread count.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterator

import numpy as np
from numba import njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# FLOP instrumentation
# --------------------------------------------------------------------------

class FlopCounter:
    """Accumulates FLOPs per tag while active (1 multiply-add = 2 FLOPs)."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, tag: str, flops: int) -> None:
        self.counts[tag] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, tag: str) -> int:
        return self.counts.get(tag, 0)


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def record_flops(tag: str | None, flops: int) -> None:
    if tag is None:
        return
    for c in _counters:
        c.add(tag, flops)


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite value in output")
    return x


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

@njit(cache=True)
def _matmul_kernel(a, b, out):  # pragma: no cover - compiled
    nb, m, k = a.shape
    n = b.shape[2]
    for p in range(nb):
        for i in range(m):
            for kk in range(k):
                aik = a[p, i, kk]
                for j in range(n):
                    out[p, i, j] += aik * b[p, kk, j]


def matmul(a: np.ndarray, b: np.ndarray, tag: str | None = None) -> np.ndarray:
    """Batched ``a @ b`` with deterministic accumulation over the inner axis.

    Leading dimensions broadcast like ``np.matmul``. Each output element is
    ``((a0*b0 + a1*b1) + a2*b2) + ...``, the same order as a naive triple
    loop, so the result is bitwise reproducible.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    n = b.shape[-1]
    dtype = np.result_type(a, b, np.float32)
    nb = math.prod(batch)
    a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (m, k)), dtype=dtype).reshape(nb, m, k)
    b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (k, n)), dtype=dtype).reshape(nb, k, n)
    out = np.zeros((nb, m, n), dtype=dtype)
    if out.size and k:
        _matmul_kernel(a3, b3, out)
    record_flops(tag, 2 * nb * m * k * n)
    return check_finite(out.reshape(batch + (m, n)), "matmul")


def swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, tag: str | None = None) -> np.ndarray:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear expects last dim {w.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, w.shape[0]), w, tag)
    if b is not None:
        y = y + b
    return y.reshape(lead + (w.shape[1],))


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db)."""
    x2 = x.reshape(-1, w.shape[0])
    dy2 = dy.reshape(-1, w.shape[1])
    dx = matmul(dy2, w.T).reshape(x.shape)
    dw = matmul(x2.T, dy2)
    db = dy2.sum(axis=0)
    return dx, dw, db


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------

def softmax_lastdim(x: np.ndarray, tag: str | None = None) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty last dimension")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    # exp, subtract, sum, divide, max: counted as 5 FLOPs per element
    record_flops(tag, 5 * x.size)
    return check_finite(y, "softmax_lastdim")


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# median over time
# --------------------------------------------------------------------------

def lower_median_index(x: np.ndarray) -> np.ndarray:
    """Index along axis 0 of the lower median element (stable for ties)."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[0] == 0:
        raise DimensionError("median over an empty temporal axis")
    order = np.argsort(x, axis=0, kind="stable")
    return order[(x.shape[0] - 1) // 2]


def lower_median_temporal(x: np.ndarray) -> np.ndarray:
    """Elementwise median along axis 0; even lengths take the lower middle value."""
    idx = lower_median_index(x)
    return np.take_along_axis(np.asarray(x), idx[None], axis=0)[0]


def lower_median_backward(dm: np.ndarray, idx: np.ndarray, T: int) -> np.ndarray:
    dx = np.zeros((T,) + dm.shape, dtype=dm.dtype)
    np.put_along_axis(dx, idx[None], dm[None], axis=0)
    return dx


# --------------------------------------------------------------------------
# conv2d (cross-correlation via im2col)
# --------------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    # x: (B, Cin, H, W) -> cols (B, Ho, Wo, Cin*k*k)
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * k * k)
    return cols, Ho, Wo


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    pad: int = 0,
    tag: str | None = None,
) -> np.ndarray:
    """Cross-correlation of ``x`` (..., Cin, H, W) with ``w`` (Cout, Cin, k, k).

    Leading dimensions (e.g. time) are treated as independent frames.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise DimensionError(f"conv2d input must be (..., Cin, H, W), got {x.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise DimensionError("conv2d supports square kernels only")
    if x.shape[-3] != cin:
        raise DimensionError(f"conv2d expects {cin} input channels, got {x.shape[-3]}")
    H, W = x.shape[-2:]
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {pad})")
    lead = x.shape[:-3]
    xb = x.reshape((-1, cin, H, W))
    cols, Ho, Wo = _im2col(xb, kh, stride, pad)
    y = matmul(cols.reshape(-1, cin * kh * kw), w.reshape(cout, -1).T, tag)
    if b is not None:
        y = y + b
    y = y.reshape(xb.shape[0], Ho, Wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y.reshape(lead + (cout, Ho, Wo)))


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0):
    """Returns (dx, dw, db) for :func:`conv2d`."""
    cout, cin, k, _ = w.shape
    H, W = x.shape[-2:]
    xb = x.reshape((-1, cin, H, W))
    B = xb.shape[0]
    cols, Ho, Wo = _im2col(xb, k, stride, pad)
    dy2 = dy.reshape(B, cout, Ho, Wo).transpose(0, 2, 3, 1).reshape(-1, cout)
    cols2 = cols.reshape(-1, cin * k * k)
    dw = matmul(cols2.T, dy2).T.reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = matmul(dy2, w.reshape(cout, -1)).reshape(B, Ho, Wo, cin, k, k)
    dxp = np.zeros((B, cin, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(dx).reshape(x.shape), dw, db


# --------------------------------------------------------------------------
# layer norm, GELU, ReLU
# --------------------------------------------------------------------------

def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5, tag: str | None = None
) -> np.ndarray:
    return layer_norm_forward(x, gamma, beta, eps, tag)[0]


def layer_norm_forward(x, gamma, beta, eps=1e-5, tag=None):
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] < 1:
        raise DimensionError(f"layer_norm over {x.shape[-1]} channels with gamma {gamma.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    record_flops(tag, 5 * x.size)
    y = check_finite(xhat * gamma + beta, "layer_norm")
    return y, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv, gamma = cache
    D = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    dx = inv / D * (D * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x**3)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_K * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# --------------------------------------------------------------------------
# finite-difference gradient check
# --------------------------------------------------------------------------

def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-6,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` must return ``(value, grad)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``coords`` set, only
    that many randomly chosen coordinates are probed.
    """
    x = np.array(x, dtype=np.float64)
    value, grad = f(x.copy())
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericError("grad_check: non-finite value or gradient at x")
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    if coords is None or coords >= flat.size:
        probe = np.arange(flat.size)
    else:
        probe = np.random.default_rng(seed).choice(flat.size, size=coords, replace=False)
    worst = 0.0
    for i in probe:
        xp = flat.copy()
        xp[i] += eps
        fp = f(xp.reshape(x.shape))[0]
        xm = flat.copy()
        xm[i] -= eps
        fm = f(xm.reshape(x.shape))[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite evaluation at coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return float(worst)

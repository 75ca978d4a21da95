"""MHSA, gyroscope attention (STGA) and its differential variant (D-STGA).

Token grids are arrays of shape ``(T, Np, Np, D)``. The flat token index of
position ``(t, x, y)`` is ``t * Np**2 + x * Np + y`` (time-major, then
row-major over the spatial grid).

Each mechanism has a ``*_forward`` returning ``(out, cache)`` and a
``*_backward`` taking ``(dout, cache)`` and returning ``(dx, grads)`` where
``grads`` maps parameter names (``wq``, ``bq``, ...) to adjoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import (
    DimensionError,
    check_finite,
    linear,
    linear_backward,
    lower_median_backward,
    lower_median_index,
    matmul,
    record_flops,
    relu,
    softmax_backward,
    softmax_lastdim,
    swap_last,
)

LINEAR_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
DIFF_NAMES = ("pi_w", "pi_b", "bn_gamma", "bn_beta")


@dataclass
class GyroscopeIndexSet:
    """Per-query key indices: the query's spatial plane, then its temporal line.

    ``index[p]`` lists the ``Np**2`` flat positions of plane ``t(p)`` in
    row-major order, followed by the ``T - 1`` other timestamps at the
    same spatial position in ascending ``t``.
    """

    T: int
    Np: int
    index: np.ndarray  # (T*Np*Np, T + Np*Np - 1)

    @property
    def size(self) -> int:
        return self.T + self.Np * self.Np - 1


@dataclass
class AttentionParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    heads: int
    # D-STGA discrepancy projection, one Linear(D'->1) + BatchNorm per head
    pi_w: np.ndarray | None = None  # (h, D')
    pi_b: np.ndarray | None = None  # (h,)
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None
    training: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        D = self.wq.shape[0]
        if D % self.heads:
            raise DimensionError(f"dim {D} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def has_projection(self) -> bool:
        return self.pi_w is not None


def init_attention_params(
    dim: int, heads: int, rng: np.random.Generator, differential: bool = False, std: float = 0.02
) -> AttentionParams:
    w = {n: rng.normal(0.0, std, (dim, dim)) for n in ("wq", "wk", "wv", "wo")}
    b = {n: np.zeros(dim) for n in ("bq", "bk", "bv", "bo")}
    p = AttentionParams(**w, **b, heads=heads)
    if differential:
        p = add_discrepancy_projection(p, rng)
    return p


def add_discrepancy_projection(p: AttentionParams, rng: np.random.Generator) -> AttentionParams:
    """Fresh per-head Linear(D'->1) + BatchNorm: uniform weights, zero bias, identity BN."""
    h, dh = p.heads, p.head_dim
    bound = 1.0 / math.sqrt(dh)
    return replace(
        p,
        pi_w=rng.uniform(-bound, bound, (h, dh)),
        pi_b=np.zeros(h),
        bn_gamma=np.ones(h),
        bn_beta=np.zeros(h),
        bn_running_mean=np.zeros(h),
        bn_running_var=np.ones(h),
    )


# --------------------------------------------------------------------------
# index sets
# --------------------------------------------------------------------------

def build_gyroscope_set(T: int, Np: int) -> GyroscopeIndexSet:
    if T < 1 or Np < 1:
        raise DimensionError(f"need T >= 1 and Np >= 1, got T={T}, Np={Np}")
    R = Np * Np
    t = np.repeat(np.arange(T), R)
    r = np.tile(np.arange(R), T)
    plane = t[:, None] * R + np.arange(R)[None, :]
    line = other_timestamps(T)[t] * R + r[:, None]
    return GyroscopeIndexSet(T, Np, np.concatenate([plane, line], axis=1))


def other_timestamps(T: int) -> np.ndarray:
    """(T, T-1) table: for each t, the other timestamps in ascending order."""
    return np.array([[s for s in range(T) if s != t] for t in range(T)], dtype=np.int64).reshape(T, T - 1)


def gyroscope_mask(T: int, Np: int) -> np.ndarray:
    """Dense (N, N) membership mask built straight from coordinates."""
    t, x, y = np.meshgrid(np.arange(T), np.arange(Np), np.arange(Np), indexing="ij")
    t, x, y = t.ravel(), x.ravel(), y.ravel()
    same_plane = t[:, None] == t[None, :]
    same_line = (x[:, None] == x[None, :]) & (y[:, None] == y[None, :])
    return same_plane | same_line


# --------------------------------------------------------------------------
# shared projections
# --------------------------------------------------------------------------

def _grid_dims(x: np.ndarray, p: AttentionParams) -> tuple[int, int, int]:
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise DimensionError(f"token grid must be (T, Np, Np, D), got {x.shape}")
    if x.shape[3] != p.dim:
        raise DimensionError(f"token dim {x.shape[3]} != attention dim {p.dim}")
    return x.shape[0], x.shape[1], x.shape[3]


def _split_heads(y: np.ndarray, h: int) -> np.ndarray:
    # (N, D) -> (h, N, D')
    N, D = y.shape
    return y.reshape(N, h, D // h).transpose(1, 0, 2)


def _merge_heads(o: np.ndarray) -> np.ndarray:
    h, N, dh = o.shape
    return o.transpose(1, 0, 2).reshape(N, h * dh)


def _qkv(x2: np.ndarray, p: AttentionParams):
    h = p.heads
    q = _split_heads(linear(x2, p.wq, p.bq, "projections"), h)
    k = _split_heads(linear(x2, p.wk, p.bk, "projections"), h)
    v = _split_heads(linear(x2, p.wv, p.bv, "projections"), h)
    return q, k, v


def _qkv_backward(dq, dk, dv, x2, p: AttentionParams, grads: dict) -> np.ndarray:
    dx = np.zeros_like(x2)
    for dh_, wn, bn in ((dq, "wq", "bq"), (dk, "wk", "bk"), (dv, "wv", "bv")):
        d, dw, db = linear_backward(_merge_heads(dh_), x2, getattr(p, wn))
        dx += d
        grads[wn] = dw
        grads[bn] = db
    return dx


def _output(o: np.ndarray, p: AttentionParams, shape) -> tuple[np.ndarray, np.ndarray]:
    merged = _merge_heads(o)
    return linear(merged, p.wo, p.bo, "projections").reshape(shape), merged


def _output_backward(dout: np.ndarray, merged: np.ndarray, p: AttentionParams, grads: dict) -> np.ndarray:
    dmerged, grads["wo"], grads["bo"] = linear_backward(dout.reshape(merged.shape[0], -1), merged, p.wo)
    return _split_heads(dmerged, p.heads)


# --------------------------------------------------------------------------
# MHSA
# --------------------------------------------------------------------------

def mhsa_forward(x: np.ndarray, p: AttentionParams, mask: np.ndarray | None = None):
    """Full self-attention over all ``T*Np*Np`` tokens.

    ``mask`` (N, N) boolean, if given, keeps only True scores.
    """
    _grid_dims(x, p)
    x2 = x.reshape(-1, p.dim)
    q, k, v = _qkv(x2, p)
    scale = 1.0 / math.sqrt(p.head_dim)
    scores = matmul(q, swap_last(k), "score_full") * scale
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    attn = softmax_lastdim(scores, "softmax")
    o = matmul(attn, v, "value_agg")
    out, merged = _output(o, p, x.shape)
    return out, dict(x2=x2, q=q, k=k, v=v, attn=attn, merged=merged, scale=scale, shape=x.shape)


def mhsa_backward(dout: np.ndarray, cache: dict, p: AttentionParams):
    grads: dict[str, np.ndarray] = {}
    do = _output_backward(dout, cache["merged"], p, grads)
    attn, q, k, v, scale = cache["attn"], cache["q"], cache["k"], cache["v"], cache["scale"]
    dattn = matmul(do, swap_last(v))
    dv = matmul(swap_last(attn), do)
    ds = softmax_backward(dattn, attn) * scale
    dq = matmul(ds, k)
    dk = matmul(swap_last(ds), q)
    dx = _qkv_backward(dq, dk, dv, cache["x2"], p, grads)
    return dx.reshape(cache["shape"]), grads


def mhsa(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    return mhsa_forward(x, p)[0]


def stga_oracle(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Brute-force STGA: full score matrix with non-gyroscope keys set to -inf."""
    T, Np, _ = _grid_dims(x, p)
    return mhsa_forward(x, p, mask=gyroscope_mask(T, Np))[0]


# --------------------------------------------------------------------------
# STGA
# --------------------------------------------------------------------------

def stga_forward(x: np.ndarray, p: AttentionParams, idx: GyroscopeIndexSet):
    T, Np, _ = _grid_dims(x, p)
    if (idx.T, idx.Np) != (T, Np):
        raise DimensionError(f"index set built for T={idx.T}, Np={idx.Np}; input has T={T}, Np={Np}")
    R = Np * Np
    x2 = x.reshape(-1, p.dim)
    q, k, v = _qkv(x2, p)
    scale = 1.0 / math.sqrt(p.head_dim)
    ku = k[:, idx.index]  # (h, N, L, D')
    vu = v[:, idx.index]
    qp = q[:, :, None, :]  # (h, N, 1, D')
    s_plane = matmul(qp, swap_last(ku[:, :, :R]), "score_spatial")
    s_line = matmul(qp, swap_last(ku[:, :, R:]), "score_temporal")
    scores = np.concatenate([s_plane, s_line], axis=-1) * scale
    attn = softmax_lastdim(scores, "softmax")  # (h, N, 1, L)
    o = matmul(attn, vu, "value_agg")[:, :, 0]
    out, merged = _output(o, p, x.shape)
    cache = dict(x2=x2, q=q, ku=ku, vu=vu, attn=attn, merged=merged, scale=scale, idx=idx, shape=x.shape)
    return out, cache


def stga_backward(dout: np.ndarray, cache: dict, p: AttentionParams):
    grads: dict[str, np.ndarray] = {}
    do = _output_backward(dout, cache["merged"], p, grads)[:, :, None, :]
    attn, q, ku, vu, scale = cache["attn"], cache["q"], cache["ku"], cache["vu"], cache["scale"]
    index = cache["idx"].index
    dattn = matmul(do, swap_last(vu))
    dvu = matmul(swap_last(attn), do)  # (h, N, L, D')
    ds = softmax_backward(dattn, attn) * scale
    dq = matmul(ds, ku)[:, :, 0]
    dku = matmul(swap_last(ds), q[:, :, None, :])
    dk = np.zeros_like(q)
    dv = np.zeros_like(q)
    np.add.at(dk, (slice(None), index), dku)
    np.add.at(dv, (slice(None), index), dvu)
    dx = _qkv_backward(dq, dk, dv, cache["x2"], p, grads)
    return dx.reshape(cache["shape"]), grads


def stga(x: np.ndarray, p: AttentionParams, idx: GyroscopeIndexSet | None = None) -> np.ndarray:
    if idx is None:
        idx = build_gyroscope_set(x.shape[0], x.shape[1])
    return stga_forward(x, p, idx)[0]


# --------------------------------------------------------------------------
# D-STGA
# --------------------------------------------------------------------------

def _batch_norm_forward(z: np.ndarray, p: AttentionParams):
    # z: (h, T, R, 1); one channel per head, statistics over (T, R)
    h = z.shape[0]
    bshape = (h, 1, 1, 1)
    if p.training:
        mu = z.mean(axis=(1, 2, 3))
        var = ((z - mu.reshape(bshape)) ** 2).mean(axis=(1, 2, 3))
        n = z[0].size
        unbiased = var * n / (n - 1) if n > 1 else var
        new_mean = (1 - p.bn_momentum) * p.bn_running_mean + p.bn_momentum * mu
        new_var = (1 - p.bn_momentum) * p.bn_running_var + p.bn_momentum * unbiased
    else:
        mu, var = p.bn_running_mean, p.bn_running_var
        new_mean, new_var = p.bn_running_mean, p.bn_running_var
    inv = 1.0 / np.sqrt(var + p.bn_eps)
    zhat = (z - mu.reshape(bshape)) * inv.reshape(bshape)
    y = zhat * p.bn_gamma.reshape(bshape) + p.bn_beta.reshape(bshape)
    return y, dict(zhat=zhat, inv=inv, running=(new_mean, new_var))


def _batch_norm_backward(dy: np.ndarray, bn: dict, p: AttentionParams, grads: dict) -> np.ndarray:
    h = dy.shape[0]
    bshape = (h, 1, 1, 1)
    zhat, inv = bn["zhat"], bn["inv"]
    grads["bn_gamma"] = (dy * zhat).sum(axis=(1, 2, 3))
    grads["bn_beta"] = dy.sum(axis=(1, 2, 3))
    dzhat = dy * p.bn_gamma.reshape(bshape)
    if not p.training:
        return dzhat * inv.reshape(bshape)
    n = dy[0].size
    s1 = dzhat.sum(axis=(1, 2, 3)).reshape(bshape)
    s2 = (dzhat * zhat).sum(axis=(1, 2, 3)).reshape(bshape)
    return inv.reshape(bshape) / n * (n * dzhat - s1 - zhat * s2)


def _heads_by_time(a: np.ndarray, T: int, R: int) -> np.ndarray:
    # (h, N, D') -> (h, T, R, D')
    return a.reshape(a.shape[0], T, R, a.shape[-1])


def _spatial_similarity(Q: np.ndarray, K: np.ndarray, p: AttentionParams):
    """Q, K: (h, T, R, D'). Returns S (h, T, R, R) and the backward cache."""
    h, T, R, dh = Q.shape
    scale = 1.0 / math.sqrt(dh)
    # median over the temporal axis -> (h, R, D')
    iq = lower_median_index(np.moveaxis(Q, 1, 0))
    ik = lower_median_index(np.moveaxis(K, 1, 0))
    mq = np.take_along_axis(Q, iq[:, None], axis=1)[:, 0]
    mk = np.take_along_axis(K, ik[:, None], axis=1)[:, 0]
    sim = matmul(mq, swap_last(mk), "score_spatial") * scale  # (h, R, R)
    diff = Q - mq[:, None]
    record_flops("score_discrepancy", diff.size)
    z = matmul(diff, p.pi_w[:, None, :, None], "score_discrepancy") + p.pi_b.reshape(h, 1, 1, 1)
    y, bn = _batch_norm_forward(z, p)
    d = relu(y)  # (h, T, R, 1)
    S = sim[:, None] + d  # shift every key of query row r by d_t[r]
    record_flops("score_discrepancy", S.size)
    cache = dict(iq=iq, ik=ik, mq=mq, mk=mk, diff=diff, y=y, bn=bn, scale=scale)
    return check_finite(S, "dstga_spatial_similarity"), cache


def dstga_spatial_similarity(Q: np.ndarray, K: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Per-timestamp spatial score maps for one set of heads.

    Q, K: (T, Np, Np, D') for a single head, or (h, T, Np, Np, D').
    Returns (T, Np*Np, Np*Np), with a leading head axis if given one.
    """
    single = Q.ndim == 4
    if single:
        Q, K = Q[None], K[None]
    if Q.shape != K.shape or Q.ndim != 5 or Q.shape[2] != Q.shape[3]:
        raise DimensionError(f"Q and K must be (h, T, Np, Np, D'), got {Q.shape} and {K.shape}")
    if p.pi_w is None or p.pi_w.shape != (Q.shape[0], Q.shape[-1]):
        raise DimensionError("discrepancy projection missing or mismatched with head layout")
    h, T, Np, _, dh = Q.shape
    S, _ = _spatial_similarity(Q.reshape(h, T, Np * Np, dh), K.reshape(h, T, Np * Np, dh), p)
    return S[0] if single else S


def dstga_forward(x: np.ndarray, p: AttentionParams):
    T, Np, _ = _grid_dims(x, p)
    if not p.has_projection:
        raise DimensionError("D-STGA needs the discrepancy projection parameters")
    R = Np * Np
    x2 = x.reshape(-1, p.dim)
    q, k, v = _qkv(x2, p)
    Q, K, V = (_heads_by_time(a, T, R) for a in (q, k, v))
    S, sc = _spatial_similarity(Q, K, p)
    others = other_timestamps(T)
    # (h, T, R, T-1, D'): keys/values of the same position at the other timestamps
    Ko = K[:, others].transpose(0, 1, 3, 2, 4)
    Vo = V[:, others].transpose(0, 1, 3, 2, 4)
    tm = matmul(Q[..., None, :], swap_last(Ko), "score_temporal")[..., 0, :] * sc["scale"]
    scores = np.concatenate([S, tm], axis=-1)  # (h, T, R, R + T - 1)
    attn = softmax_lastdim(scores, "softmax")
    a_plane, a_line = attn[..., :R], attn[..., R:]
    o = matmul(a_plane, V, "value_agg") + matmul(a_line[..., None, :], Vo, "value_agg")[..., 0, :]
    out, merged = _output(o.reshape(p.heads, T * R, -1), p, x.shape)
    cache = dict(x2=x2, Q=Q, K=K, V=V, Ko=Ko, Vo=Vo, others=others, attn=attn, sc=sc, merged=merged, shape=x.shape)
    return out, cache


def dstga_backward(dout: np.ndarray, cache: dict, p: AttentionParams):
    grads: dict[str, np.ndarray] = {}
    Q, K, V, Ko, Vo, others, attn, sc = (cache[n] for n in ("Q", "K", "V", "Ko", "Vo", "others", "attn", "sc"))
    h, T, R, dh = Q.shape
    scale = sc["scale"]
    do = _output_backward(dout, cache["merged"], p, grads).reshape(h, T, R, dh)
    a_plane, a_line = attn[..., :R], attn[..., R:]

    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = matmul(swap_last(a_plane), do)
    dVo = matmul(swap_last(a_line[..., None, :]), do[..., None, :])  # (h, T, R, T-1, D')
    dattn = np.concatenate(
        [matmul(do, swap_last(V)), matmul(do[..., None, :], swap_last(Vo))[..., 0, :]], axis=-1
    )
    dscores = softmax_backward(dattn, attn)
    dS, dtm = dscores[..., :R], dscores[..., R:] * scale

    # temporal scores
    dQ += matmul(dtm[..., None, :], Ko)[..., 0, :]
    dKo = matmul(dtm[..., :, None], Q[..., None, :])  # (h, T, R, T-1, D')
    for t in range(T):
        for j, s in enumerate(others[t]):
            dK[:, s] += dKo[:, t, :, j]
            dV[:, s] += dVo[:, t, :, j]

    # spatial map: S_t = scale * MQ MK^T + relu(bn(diff_t . w + b))
    dsim = dS.sum(axis=1) * scale  # (h, R, R)
    dd = dS.sum(axis=-1, keepdims=True)  # (h, T, R, 1)
    dmq = matmul(dsim, sc["mk"])
    dmk = matmul(swap_last(dsim), sc["mq"])
    dy = dd * (sc["y"] > 0)
    dz = _batch_norm_backward(dy, sc["bn"], p, grads)
    diff = sc["diff"]
    grads["pi_w"] = (dz * diff).sum(axis=(1, 2))
    grads["pi_b"] = dz.sum(axis=(1, 2, 3))
    ddiff = dz * p.pi_w[:, None, None, :]
    dQ += ddiff
    dmq -= ddiff.sum(axis=1)
    dQ += np.moveaxis(lower_median_backward(dmq, sc["iq"], T), 0, 1)
    dK += np.moveaxis(lower_median_backward(dmk, sc["ik"], T), 0, 1)

    flat = lambda a: a.reshape(h, T * R, dh)  # noqa: E731
    dx = _qkv_backward(flat(dQ), flat(dK), flat(dV), cache["x2"], p, grads)
    return dx.reshape(cache["shape"]), grads


def dstga(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    return dstga_forward(x, p)[0]


def updated_bn_stats(cache: dict) -> tuple[np.ndarray, np.ndarray]:
    """Running (mean, var) after a D-STGA forward pass."""
    return cache["sc"]["bn"]["running"]


# --------------------------------------------------------------------------
# dispatch by stage letter
# --------------------------------------------------------------------------

def attention_forward(kind: str, x: np.ndarray, p: AttentionParams, idx: GyroscopeIndexSet | None = None):
    if kind == "M":
        return mhsa_forward(x, p)
    if kind == "S":
        return stga_forward(x, p, idx if idx is not None else build_gyroscope_set(x.shape[0], x.shape[1]))
    if kind == "D":
        return dstga_forward(x, p)
    raise ValueError(f"unknown attention kind {kind!r}")


def attention_backward(kind: str, dout: np.ndarray, cache: dict, p: AttentionParams):
    return {"M": mhsa_backward, "S": stga_backward, "D": dstga_backward}[kind](dout, cache, p)


def attention_probabilities(kind: str, cache: dict) -> np.ndarray:
    """Post-softmax rows from a forward cache, flattened to (..., L)."""
    a = cache["attn"]
    return a.reshape(-1, a.shape[-1])


__all__ = [
    "AttentionParams",
    "GyroscopeIndexSet",
    "build_gyroscope_set",
    "gyroscope_mask",
    "mhsa",
    "stga",
    "stga_oracle",
    "dstga",
    "dstga_spatial_similarity",
]

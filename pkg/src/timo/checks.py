"""Seeded verification harnesses shared by the CLI and the test suite."""

from __future__ import annotations

import numpy as np

from .attention import (
    AttentionParams,
    attention_backward,
    attention_forward,
    build_gyroscope_set,
    init_attention_params,
    stga,
    stga_oracle,
)
from .encoder import (
    block_backward,
    block_forward_cached,
    encoder_backward,
    encoder_forward,
    init_params,
    is_buffer,
    make_config,
)
from .numerics import grad_check

GRAD_TOL = 1e-4
EQUIV_TOL = 1e-6


def random_attention_params(D: int, h: int, rng: np.random.Generator, differential: bool = False,
                            training: bool = False) -> AttentionParams:
    p = init_attention_params(D, h, rng, differential=differential, std=0.5)
    for n in ("bq", "bk", "bv", "bo"):
        setattr(p, n, rng.normal(0.0, 0.1, D))
    p.training = training
    return p


def stga_equivalence(T: int, Np: int, D: int, h: int, seed: int = 0, trials: int = 50) -> float:
    """Max |stga - stga_oracle| over ``trials`` seeded random instances."""
    idx = build_gyroscope_set(T, Np)
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, T, Np, h, trial])
        p = random_attention_params(D, h, rng)
        x = rng.normal(size=(T, Np, Np, D))
        worst = max(worst, float(np.abs(stga(x, p, idx) - stga_oracle(x, p)).max()))
    return worst


def _check_vector(fn, x0: np.ndarray, eps: float, coords: int | None, seed: int) -> float:
    return grad_check(fn, x0, eps=eps, coords=coords, seed=seed)


def gradcheck_attention(kind: str, seed: int = 0, eps: float = 1e-6, T: int = 2, Np: int = 3, D: int = 8,
                        h: int = 2, coords: int | None = 24) -> dict[str, float]:
    """Relative errors of the hand-written backward for x, Wq, Wk, Wv (and the
    discrepancy projection for D-STGA, with batch statistics)."""
    rng = np.random.default_rng([seed, ord(kind)])
    p = random_attention_params(D, h, rng, differential=(kind == "D"), training=True)
    x = rng.normal(size=(T, Np, Np, D))
    proj = rng.normal(size=x.shape)
    idx = build_gyroscope_set(T, Np) if kind == "S" else None

    def run(xx):
        out, cache = attention_forward(kind, xx, p, idx)
        dx, grads = attention_backward(kind, proj, cache, p)
        return float((out * proj).sum()), dx, grads

    errors = {"x": _check_vector(lambda xx: run(xx)[:2], x, eps, coords, seed)}
    names = ["wq", "wk", "wv"] + (["pi_w", "bn_gamma"] if kind == "D" else [])
    for name in names:
        base = getattr(p, name)

        def fn(w, name=name, base=base):
            setattr(p, name, w)
            try:
                v, _, g = run(x)
            finally:
                setattr(p, name, base)
            return v, g[name]

        errors[name] = _check_vector(fn, base, eps, coords, seed)
    return errors


def gradcheck_block(seed: int = 0, eps: float = 1e-6, kind: str = "D", T: int = 2, Np: int = 3, D: int = 8,
                    h: int = 2, x_coords: int = 24, param_coords: int = 4) -> dict[str, float]:
    """Full pre-norm block: input plus a sample of every parameter tensor."""
    rng = np.random.default_rng([seed, 7, ord(kind)])
    ap = random_attention_params(D, h, rng, differential=(kind == "D"))
    bp = {"attn." + n: getattr(ap, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    if kind == "D":
        for n in ("pi_w", "pi_b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            bp["attn." + n] = getattr(ap, n)
    bp.update({
        "norm.ln1.gamma": 1.0 + rng.normal(0, 0.1, D), "norm.ln1.beta": rng.normal(0, 0.1, D),
        "norm.ln2.gamma": 1.0 + rng.normal(0, 0.1, D), "norm.ln2.beta": rng.normal(0, 0.1, D),
        "ffn.w1": rng.normal(0, 0.3, (D, 4 * D)), "ffn.b1": rng.normal(0, 0.1, 4 * D),
        "ffn.w2": rng.normal(0, 0.3, (4 * D, D)), "ffn.b2": rng.normal(0, 0.1, D),
    })
    x = rng.normal(size=(T, Np, Np, D))
    proj = rng.normal(size=x.shape)
    idx = build_gyroscope_set(T, Np) if kind == "S" else None

    def run(xx, params):
        out, cache = block_forward_cached(xx, params, kind, h, idx, training=True)
        dx, grads = block_backward(proj, cache, params)
        return float((out * proj).sum()), dx, grads

    errors = {"x": _check_vector(lambda xx: run(xx, bp)[:2], x, eps, x_coords, seed)}
    for name in bp:
        if is_buffer(name):
            continue

        def fn(w, name=name):
            return (lambda r: (r[0], r[2][name]))(run(x, {**bp, name: w}))

        errors[name] = _check_vector(fn, bp[name], eps, param_coords, seed)
    return errors


def gradcheck_encoder(seed: int = 0, eps: float = 1e-6, attn: str = "D-S-M-M", x_coords: int = 12,
                      param_coords: int = 24) -> dict[str, float]:
    """Two-block encoder (one D-STGA and one STGA block): input and all parameters."""
    config = make_config("micro", attn, in_channels=2)
    params = init_params(config, seed, std=0.3)
    rng = np.random.default_rng([seed, 11])
    x = rng.normal(size=(2, 2, 32, 32))
    feats, _ = encoder_forward(x, config, params, training=True)
    projs = [rng.normal(size=f.shape) for f in feats]
    names = [n for n in params if not is_buffer(n)]
    sizes = [params[n].size for n in names]

    def run(xx, p):
        fs, cache = encoder_forward(xx, config, p, training=True)
        dx, grads = encoder_backward(projs, cache, p)
        return sum(float((f * r).sum()) for f, r in zip(fs, projs)), dx, grads

    def unpack(vec):
        out, off = dict(params), 0
        for n, s in zip(names, sizes):
            out[n] = vec[off : off + s].reshape(params[n].shape)
            off += s
        return out

    def fn_params(vec):
        v, _, g = run(x, unpack(vec))
        return v, np.concatenate([g[n].ravel() for n in names])

    flat = np.concatenate([params[n].ravel() for n in names])
    return {
        "x": _check_vector(lambda xx: run(xx, params)[:2], x, eps, x_coords, seed),
        "params": _check_vector(fn_params, flat, eps, param_coords, seed),
    }


GRADCHECK_TARGETS = {
    "stga": lambda seed, eps: gradcheck_attention("S", seed, eps),
    "dstga": lambda seed, eps: gradcheck_attention("D", seed, eps),
    "mhsa": lambda seed, eps: gradcheck_attention("M", seed, eps),
    "block": lambda seed, eps: gradcheck_block(seed, eps),
    "encoder": lambda seed, eps: gradcheck_encoder(seed, eps),
}

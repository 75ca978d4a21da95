"""Four-stage hierarchical spatiotemporal encoder.

Parameters live in a flat, ordered ``dict[str, np.ndarray]``. Names follow
``stage{i}.block{j}.{attn|ffn|norm}.*`` for transformer blocks, plus
``patch_embed.*`` and ``downsample{i}.*`` (between stage ``i`` and ``i+1``).
Batch-norm running statistics of D-STGA blocks are stored alongside as
non-learnable buffers (``*.bn_running_mean`` / ``*.bn_running_var``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attention import (
    AttentionParams,
    GyroscopeIndexSet,
    attention_backward,
    attention_forward,
    build_gyroscope_set,
    updated_bn_stats,
)
from .numerics import (
    DimensionError,
    conv2d,
    conv2d_backward,
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_forward,
    linear,
    linear_backward,
)

ATTN_KINDS = ("M", "S", "D")
BUFFER_SUFFIXES = (".bn_running_mean", ".bn_running_var")

# dims, heads, depths
VARIANTS: dict[str, tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]] = {
    "base": ((128, 256, 512, 1024), (4, 8, 16, 32), (2, 2, 18, 2)),
    "large": ((384, 768, 960, 1536), (6, 12, 24, 48), (2, 2, 18, 2)),
    "huge": ((512, 1024, 1280, 2048), (8, 16, 32, 64), (3, 3, 22, 3)),
    # desk-scale presets
    "tiny": ((16, 32, 48, 64), (2, 2, 4, 4), (1, 1, 1, 1)),
    "micro": ((8, 8, 8, 8), (2, 2, 2, 2), (1, 1, 0, 0)),
}


@dataclass(frozen=True)
class StageConfig:
    dim: int
    heads: int
    depth: int
    attn: str = "M"

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"stage dim {self.dim} not divisible by {self.heads} heads")
        if self.attn not in ATTN_KINDS:
            raise ValueError(f"attention kind must be one of {ATTN_KINDS}, got {self.attn!r}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    stages: tuple[StageConfig, ...]
    in_channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if len(self.stages) != 4:
            raise ValueError(f"exactly 4 stages required, got {len(self.stages)}")

    @property
    def attn_string(self) -> str:
        return "-".join(s.attn for s in self.stages)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.stages)

    def with_attn(self, attn_string: str) -> "ModelConfig":
        kinds = parse_attn_string(attn_string)
        return replace(self, stages=tuple(replace(s, attn=k) for s, k in zip(self.stages, kinds)))


def parse_attn_string(attn_string: str) -> tuple[str, ...]:
    """``"D-D-M-M"`` (or ``"DDMM"``) -> ``("D", "D", "M", "M")``."""
    kinds = tuple(attn_string.replace("-", "").upper())
    if len(kinds) != 4 or any(k not in ATTN_KINDS for k in kinds):
        raise ValueError(f"malformed attention string {attn_string!r}: need 4 letters from M, S, D")
    return kinds


def make_config(variant: str = "base", attn: str = "M-M-M-M", in_channels: int = 3) -> ModelConfig:
    try:
        dims, heads, depths = VARIANTS[variant.lower()]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    kinds = parse_attn_string(attn)
    stages = tuple(StageConfig(d, h, L, k) for d, h, L, k in zip(dims, heads, depths, kinds))
    return ModelConfig(variant.lower(), stages, in_channels)


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


# --------------------------------------------------------------------------
# parameter initialisation and counting
# --------------------------------------------------------------------------

def _stem_width(config: ModelConfig) -> int:
    return max(1, config.dims[0] // 2)


def _conv_init(rng, cout, cin, k, dtype):
    bound = 1.0 / math.sqrt(cin * k * k)
    return rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype), np.zeros(cout, dtype)


def _projection_init(rng, heads, head_dim, dtype) -> dict[str, np.ndarray]:
    bound = 1.0 / math.sqrt(head_dim)
    return {
        "pi_w": rng.uniform(-bound, bound, (heads, head_dim)).astype(dtype),
        "pi_b": np.zeros(heads, dtype),
        "bn_gamma": np.ones(heads, dtype),
        "bn_beta": np.zeros(heads, dtype),
        "bn_running_mean": np.zeros(heads, dtype),
        "bn_running_var": np.ones(heads, dtype),
    }


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64, std: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    C, d0, c1 = config.in_channels, config.dims[0], _stem_width(config)
    p["patch_embed.conv1.weight"], p["patch_embed.conv1.bias"] = _conv_init(rng, c1, C, 7, dtype)
    p["patch_embed.conv2.weight"], p["patch_embed.conv2.bias"] = _conv_init(rng, d0, c1, 2, dtype)
    for i, st in enumerate(config.stages, start=1):
        D, hidden = st.dim, st.dim * config.mlp_ratio
        for j in range(st.depth):
            pre = f"stage{i}.block{j}."
            p[pre + "norm.ln1.gamma"] = np.ones(D, dtype)
            p[pre + "norm.ln1.beta"] = np.zeros(D, dtype)
            for n in ("q", "k", "v", "o"):
                p[pre + f"attn.w{n}"] = rng.normal(0.0, std, (D, D)).astype(dtype)
                p[pre + f"attn.b{n}"] = np.zeros(D, dtype)
            if st.attn == "D":
                for n, a in _projection_init(rng, st.heads, D // st.heads, dtype).items():
                    p[pre + "attn." + n] = a
            p[pre + "norm.ln2.gamma"] = np.ones(D, dtype)
            p[pre + "norm.ln2.beta"] = np.zeros(D, dtype)
            p[pre + "ffn.w1"] = rng.normal(0.0, std, (D, hidden)).astype(dtype)
            p[pre + "ffn.b1"] = np.zeros(hidden, dtype)
            p[pre + "ffn.w2"] = rng.normal(0.0, std, (hidden, D)).astype(dtype)
            p[pre + "ffn.b2"] = np.zeros(D, dtype)
        if i < 4:
            p[f"downsample{i}.weight"], p[f"downsample{i}.bias"] = _conv_init(
                rng, config.stages[i].dim, D, 3, dtype
            )
    return p


def parameter_breakdown(config: ModelConfig, in_channels: int | None = None) -> dict[str, int]:
    """Closed-form learnable-scalar counts per component."""
    C = config.in_channels if in_channels is None else in_channels
    d0, c1 = config.dims[0], _stem_width(config)
    out = {"patch_embed": 49 * C * c1 + c1 + 4 * c1 * d0 + d0}
    for i, st in enumerate(config.stages, start=1):
        D, hidden = st.dim, st.dim * config.mlp_ratio
        per_block = 4 * (D * D + D) + 2 * D * hidden + hidden + D + 4 * D
        if st.attn == "D":
            per_block += st.heads * (D // st.heads + 1) + 2 * st.heads
        out[f"stage{i}"] = st.depth * per_block
        if i < 4:
            nxt = config.stages[i].dim
            out[f"downsample{i}"] = 9 * D * nxt + nxt
    return out


def count_parameters(config: ModelConfig, in_channels: int | None = None) -> int:
    """Exact learnable-scalar count of the encoder (no heads, no buffers)."""
    return sum(parameter_breakdown(config, in_channels).values())


def num_learnable(params: dict[str, np.ndarray]) -> int:
    return sum(a.size for n, a in params.items() if not is_buffer(n))


# --------------------------------------------------------------------------
# embedding, positional encoding, downsampling
# --------------------------------------------------------------------------

def patch_embed(x: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    return patch_embed_forward(x, params)[0]


def patch_embed_forward(x: np.ndarray, params):
    """(T, C, H, W) frames -> (T, H/4, W/4, D1) tokens: 7x7/2 conv then 2x2/2 conv."""
    if x.ndim != 4:
        raise DimensionError(f"frames must be (T, C, H, W), got {x.shape}")
    H, W = x.shape[-2:]
    if H % 4 or W % 4:
        raise DimensionError(f"spatial size {H}x{W} not divisible by 4")
    if H != W:
        raise DimensionError(f"square inputs only, got {H}x{W}")
    w1, b1 = params["patch_embed.conv1.weight"], params["patch_embed.conv1.bias"]
    w2, b2 = params["patch_embed.conv2.weight"], params["patch_embed.conv2.bias"]
    h1 = conv2d(x, w1, b1, stride=2, pad=3, tag="conv")
    h2 = conv2d(h1, w2, b2, stride=2, pad=0, tag="conv")
    return h2.transpose(0, 2, 3, 1), (x, h1)


def patch_embed_backward(dtok: np.ndarray, cache, params) -> tuple[np.ndarray, dict]:
    x, h1 = cache
    dh2 = dtok.transpose(0, 3, 1, 2)
    dh1, dw2, db2 = conv2d_backward(dh2, h1, params["patch_embed.conv2.weight"], stride=2, pad=0)
    dx, dw1, db1 = conv2d_backward(dh1, x, params["patch_embed.conv1.weight"], stride=2, pad=3)
    grads = {
        "patch_embed.conv1.weight": dw1,
        "patch_embed.conv1.bias": db1,
        "patch_embed.conv2.weight": dw2,
        "patch_embed.conv2.bias": db2,
    }
    return dx, grads


def _sincos(pos: np.ndarray, width: int) -> np.ndarray:
    # [sin | cos] blocks with geometric frequencies
    n_sin, n_cos = (width + 1) // 2, width // 2
    omega = 1.0 / 10000 ** (np.arange(n_sin) / max(n_sin, 1))
    ang = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang[:, :n_cos])], axis=1)


def positional_encoding(T: int, Np: int, D: int) -> np.ndarray:
    """Fixed spatiotemporal encoding of shape (T, Np, Np, D).

    Channels ``[0, D/2)`` carry the timestamp as interleaved sin/cos pairs;
    channels ``[D/2, 3D/4)`` and ``[3D/4, D)`` carry the two spatial
    coordinates as sin-cos blocks.
    """
    if D % 4:
        raise DimensionError(f"positional encoding width {D} not divisible by 4")
    dt, da = D // 2, D // 4
    t = np.arange(T, dtype=np.float64)
    freq = 1.0 / 10000 ** (np.arange(0, dt, 2) / dt)
    temporal = np.zeros((T, dt))
    temporal[:, 0::2] = np.sin(t[:, None] * freq)
    temporal[:, 1::2] = np.cos(t[:, None] * freq)
    coords = np.arange(Np, dtype=np.float64)
    ex, ey = _sincos(coords, da), _sincos(coords, da)
    pe = np.empty((T, Np, Np, D))
    pe[..., :dt] = temporal[:, None, None, :]
    pe[..., dt : dt + da] = ex[None, :, None, :]
    pe[..., dt + da :] = ey[None, None, :, :]
    return pe


def downsample(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-2 conv per frame: (T, Np, Np, Din) -> (T, Np/2, Np/2, Dout)."""
    if x.shape[1] % 2:
        raise DimensionError(f"cannot downsample odd token side {x.shape[1]}")
    return conv2d(x.transpose(0, 3, 1, 2), w, b, stride=2, pad=1, tag="conv").transpose(0, 2, 3, 1)


def downsample_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx, dw, db = conv2d_backward(dy.transpose(0, 3, 1, 2), x.transpose(0, 3, 1, 2), w, stride=2, pad=1)
    return dx.transpose(0, 2, 3, 1), dw, db


# --------------------------------------------------------------------------
# transformer block
# --------------------------------------------------------------------------

def block_attention_params(bp: dict[str, np.ndarray], heads: int, training: bool = False) -> AttentionParams:
    kw = {n: bp["attn." + n] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    extra = {n: bp["attn." + n] for n in ("pi_w", "pi_b", "bn_gamma", "bn_beta", "bn_running_mean",
                                          "bn_running_var") if "attn." + n in bp}
    return AttentionParams(**kw, **extra, heads=heads, training=training)


def block_params(params: dict[str, np.ndarray], stage: int, block: int) -> dict[str, np.ndarray]:
    pre = f"stage{stage}.block{block}."
    return {n[len(pre):]: a for n, a in params.items() if n.startswith(pre)}


def block_forward_cached(
    x: np.ndarray,
    bp: dict[str, np.ndarray],
    kind: str,
    heads: int,
    idx: GyroscopeIndexSet | None = None,
    training: bool = False,
):
    if kind not in ATTN_KINDS:
        raise ValueError(f"attention kind must be one of {ATTN_KINDS}, got {kind!r}")
    ap = block_attention_params(bp, heads, training)
    h1, ln1 = layer_norm_forward(x, bp["norm.ln1.gamma"], bp["norm.ln1.beta"], tag="norm")
    a, ac = attention_forward(kind, h1, ap, idx)
    x1 = x + a
    h2, ln2 = layer_norm_forward(x1, bp["norm.ln2.gamma"], bp["norm.ln2.beta"], tag="norm")
    f1 = linear(h2, bp["ffn.w1"], bp["ffn.b1"], "ffn")
    g = gelu(f1)
    out = x1 + linear(g, bp["ffn.w2"], bp["ffn.b2"], "ffn")
    return out, dict(kind=kind, ap=ap, ln1=ln1, ac=ac, ln2=ln2, h2=h2, f1=f1, g=g)


def block_forward(x, bp, kind, heads, idx=None, training=False) -> np.ndarray:
    """Pre-norm residual block: ``x + Attn(LN(x))``, then ``+ FFN(LN(.))``."""
    return block_forward_cached(x, bp, kind, heads, idx, training)[0]


def block_backward(dout: np.ndarray, cache: dict, bp: dict[str, np.ndarray]):
    """Returns (dx, grads) with grads keyed by block-local parameter names."""
    grads: dict[str, np.ndarray] = {}
    dg, grads["ffn.w2"], grads["ffn.b2"] = linear_backward(dout, cache["g"], bp["ffn.w2"])
    df1 = gelu_backward(dg, cache["f1"])
    dh2, grads["ffn.w1"], grads["ffn.b1"] = linear_backward(df1, cache["h2"], bp["ffn.w1"])
    dx1_ln, grads["norm.ln2.gamma"], grads["norm.ln2.beta"] = layer_norm_backward(dh2, cache["ln2"])
    dx1 = dout + dx1_ln
    dh1, ag = attention_backward(cache["kind"], dx1, cache["ac"], cache["ap"])
    for n, g in ag.items():
        grads["attn." + n] = g
    dx_ln, grads["norm.ln1.gamma"], grads["norm.ln1.beta"] = layer_norm_backward(dh1, cache["ln1"])
    return dx1 + dx_ln, grads


# --------------------------------------------------------------------------
# full encoder
# --------------------------------------------------------------------------

def substitute_mask_tokens(tokens: np.ndarray, token_mask: np.ndarray, mask_token: np.ndarray) -> np.ndarray:
    return np.where(token_mask[..., None], mask_token, tokens)


def unit_mask_to_tokens(units: np.ndarray, tokens_per_unit: int = 8) -> np.ndarray:
    return np.repeat(np.repeat(units, tokens_per_unit, axis=1), tokens_per_unit, axis=2)


def encoder_forward(
    x: np.ndarray,
    config: ModelConfig,
    params: dict[str, np.ndarray],
    mask_units: np.ndarray | None = None,
    mask_token: np.ndarray | None = None,
    training: bool = False,
):
    """Frames (T, C, H, W) -> four stage outputs at strides 4, 8, 16, 32.

    With ``mask_units`` (T, H/32, W/32) set, stage-1 tokens inside masked
    units are replaced by ``mask_token`` before the positional encoding is
    added. Returns ``(features, cache)``.
    """
    T, C, H, W = x.shape
    if H % 32 or W % 32:
        raise DimensionError(f"spatial size {H}x{W} not divisible by 32")
    if C != config.in_channels:
        raise DimensionError(f"config expects {config.in_channels} channels, got {C}")
    tok, pe_cache = patch_embed_forward(x, params)
    token_mask = None
    if mask_units is not None:
        token_mask = unit_mask_to_tokens(mask_units)
        if token_mask.shape != tok.shape[:3]:
            raise DimensionError(f"mask geometry {mask_units.shape} does not match tokens {tok.shape}")
        tok = substitute_mask_tokens(tok, token_mask, mask_token)
    h = tok + positional_encoding(T, tok.shape[1], tok.shape[3]).astype(tok.dtype)

    features, stage_caches, ds_inputs, buffer_updates = [], [], [], {}
    for i, st in enumerate(config.stages, start=1):
        idx = build_gyroscope_set(T, h.shape[1]) if st.attn == "S" else None
        caches = []
        for j in range(st.depth):
            bp = block_params(params, i, j)
            h, c = block_forward_cached(h, bp, st.attn, st.heads, idx, training)
            caches.append((bp, c))
            if st.attn == "D" and training:
                mean, var = updated_bn_stats(c["ac"])
                buffer_updates[f"stage{i}.block{j}.attn.bn_running_mean"] = mean
                buffer_updates[f"stage{i}.block{j}.attn.bn_running_var"] = var
        features.append(h)
        stage_caches.append(caches)
        if i < 4:
            ds_inputs.append(h)
            h = downsample(h, params[f"downsample{i}.weight"], params[f"downsample{i}.bias"])
    cache = dict(pe=pe_cache, token_mask=token_mask, stages=stage_caches, ds_inputs=ds_inputs,
                 buffer_updates=buffer_updates)
    return features, cache


def encoder_backward(dfeatures: list[np.ndarray | None], cache: dict, params: dict[str, np.ndarray]):
    """Adjoints of all learnable parameters given adjoints of the stage outputs.

    Returns ``(dx, grads)``; ``grads`` includes ``"mask_token"`` when the
    forward pass substituted mask tokens.
    """
    grads: dict[str, np.ndarray] = {}
    g = None
    for i in range(4, 0, -1):
        df = dfeatures[i - 1]
        if df is not None:
            g = df if g is None else g + df
        if g is None:
            continue
        for j, (bp, c) in reversed(list(enumerate(cache["stages"][i - 1]))):
            g, bg = block_backward(g, c, bp)
            for n, a in bg.items():
                grads[f"stage{i}.block{j}.{n}"] = a
        if i > 1:
            xin = cache["ds_inputs"][i - 2]
            g, grads[f"downsample{i - 1}.weight"], grads[f"downsample{i - 1}.bias"] = downsample_backward(
                g, xin, params[f"downsample{i - 1}.weight"]
            )
    if g is None:
        raise ValueError("no feature adjoints given")
    token_mask = cache["token_mask"]
    if token_mask is not None:
        grads["mask_token"] = (g * token_mask[..., None]).sum(axis=(0, 1, 2))
        g = g * ~token_mask[..., None]
    dx, pg = patch_embed_backward(g, cache["pe"], params)
    grads.update(pg)
    return dx, grads


def encode(x: np.ndarray, config: ModelConfig, params: dict[str, np.ndarray], training: bool = False):
    return encoder_forward(x, config, params, training=training)[0]


# --------------------------------------------------------------------------
# pretrain -> finetune surgery
# --------------------------------------------------------------------------

def convert_for_finetune(
    params: dict[str, np.ndarray], config: ModelConfig, attn_string: str, seed: int = 0
) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Swap attention kinds per stage, reusing the pretrained Q/K/V/O weights.

    Stages switched to ``D`` gain freshly initialised discrepancy projections;
    every other tensor is copied unchanged.
    """
    new_config = config.with_attn(attn_string)
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, a in params.items():
        if ".attn." in name and name.rsplit(".", 1)[1] in (
            "pi_w", "pi_b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"
        ):
            continue  # re-created below for stages that keep D
        out[name] = a.copy()
    for i, st in enumerate(new_config.stages, start=1):
        if st.attn != "D":
            continue
        for j in range(st.depth):
            pre = f"stage{i}.block{j}.attn."
            dtype = out[pre + "wq"].dtype
            for n, a in _projection_init(rng, st.heads, st.dim // st.heads, dtype).items():
                out[pre + n] = a
    return _reorder(out, new_config), new_config


def _reorder(params: dict[str, np.ndarray], config: ModelConfig) -> dict[str, np.ndarray]:
    order = list(init_params_names(config))
    rest = [n for n in params if n not in set(order)]
    return {n: params[n] for n in order + rest if n in params}


def init_params_names(config: ModelConfig):
    yield from ("patch_embed.conv1.weight", "patch_embed.conv1.bias",
                "patch_embed.conv2.weight", "patch_embed.conv2.bias")
    for i, st in enumerate(config.stages, start=1):
        for j in range(st.depth):
            pre = f"stage{i}.block{j}."
            yield pre + "norm.ln1.gamma"
            yield pre + "norm.ln1.beta"
            for n in ("q", "k", "v", "o"):
                yield pre + f"attn.w{n}"
                yield pre + f"attn.b{n}"
            if st.attn == "D":
                for n in ("pi_w", "pi_b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
                    yield pre + "attn." + n
            yield from (pre + "norm.ln2.gamma", pre + "norm.ln2.beta",
                        pre + "ffn.w1", pre + "ffn.b1", pre + "ffn.w2", pre + "ffn.b2")
        if i < 4:
            yield f"downsample{i}.weight"
            yield f"downsample{i}.bias"


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------

CKPT_MAGIC = b"TMCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("bool"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Ordered named tensors: magic, version, count, then per tensor
    ``u32 name_len, name (UTF-8), u32 dtype, u32 rank, u32 extents..., payload``
    with all integers and payloads little-endian."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(params)))
        for name, a in params.items():
            a = np.asarray(a)
            dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
            if dt not in _DTYPE_CODES:
                raise TypeError(f"unsupported dtype {a.dtype} for {name}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<II{a.ndim}I", _DTYPE_CODES[dt], a.ndim, *a.shape))
            fh.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4 : off + 4 + n].decode("utf-8")
        off += 4 + n
        code, rank = struct.unpack_from("<II", buf, off)
        shape = struct.unpack_from(f"<{rank}I", buf, off + 8)
        off += 8 + 4 * rank
        dt = _CODE_DTYPES[code]
        nbytes = dt.itemsize * math.prod(shape)
        out[name] = np.frombuffer(buf, dtype=dt, count=math.prod(shape), offset=off).reshape(shape).copy()
        off += nbytes
    return out

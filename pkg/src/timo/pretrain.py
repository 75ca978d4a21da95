"""Masked image modeling with 1x32x32-pixel mask units, at desk scale.

Masked units are handled densely: their stage-1 tokens are replaced by a
learned mask token and the whole grid runs through the encoder. A linear
head on stage-4 tokens (stride 32, one token per unit) predicts the
per-unit normalised pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (
    ModelConfig,
    encoder_backward,
    encoder_forward,
    init_params,
    is_buffer,
    make_config,
    patch_embed,
    positional_encoding,
    substitute_mask_tokens,
    unit_mask_to_tokens,
)
from .numerics import DimensionError, NumericError, linear, linear_backward
from .sampler import generate_synthetic_sits

UNIT = 32
TOKENS_PER_UNIT = UNIT // 4


@dataclass
class MaskPlan:
    units: np.ndarray  # (T, H/32, W/32) bool, True = masked
    ratio: float
    seed: int

    @property
    def count(self) -> int:
        return int(self.units.sum())


def masked_count(total: int, ratio: float) -> int:
    return int(math.floor(ratio * total + 0.5))


def sample_mask_plan(T: int, H: int, W: int, ratio: float = 0.75, seed: int = 0) -> MaskPlan:
    if H % UNIT or W % UNIT:
        raise DimensionError(f"{H}x{W} not divisible by the {UNIT}-pixel mask unit")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    shape = (T, H // UNIT, W // UNIT)
    total = math.prod(shape)
    chosen = np.random.default_rng(seed).permutation(total)[: masked_count(total, ratio)]
    units = np.zeros(total, dtype=bool)
    units[chosen] = True
    return MaskPlan(units.reshape(shape), ratio, seed)


def _check_plan(frames: np.ndarray, plan: MaskPlan) -> None:
    T, _, H, W = frames.shape
    if plan.units.shape != (T, H // UNIT, W // UNIT):
        raise DimensionError(f"mask plan {plan.units.shape} does not fit frames {frames.shape}")


def apply_mask(frames: np.ndarray, plan: MaskPlan, mask_token: np.ndarray, params: dict) -> np.ndarray:
    """Stage-1 token grid with masked units replaced, positional encoding added after."""
    _check_plan(frames, plan)
    tok = patch_embed(frames, params)
    tok = substitute_mask_tokens(tok, unit_mask_to_tokens(plan.units, TOKENS_PER_UNIT), mask_token)
    return tok + positional_encoding(tok.shape[0], tok.shape[1], tok.shape[3])


def unit_pixels(frames: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """(M, 32*32*C) raw pixels of masked units, ordered by (t, row, col)."""
    _check_plan(frames, plan)
    T, C, H, W = frames.shape
    blocks = frames.reshape(T, C, H // UNIT, UNIT, W // UNIT, UNIT).transpose(0, 2, 4, 3, 5, 1)
    return blocks[plan.units].reshape(-1, UNIT * UNIT * C)


def reconstruction_target(frames: np.ndarray, plan: MaskPlan, eps: float = 1e-6) -> np.ndarray:
    """Per-unit normalised pixels: subtract the unit mean, divide by sqrt(var + eps)."""
    px = unit_pixels(frames, plan)
    mu = px.mean(axis=1, keepdims=True)
    var = px.var(axis=1, keepdims=True)
    centred = px - mu
    # the computed mean of a constant unit can be off by an ulp
    centred[px.min(axis=1) == px.max(axis=1)] = 0.0
    return centred / np.sqrt(var + eps)


def mim_loss(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error over every element of every masked unit."""
    if predictions.shape != targets.shape:
        raise DimensionError(f"predictions {predictions.shape} vs targets {targets.shape}")
    return float(((predictions - targets) ** 2).mean())


def mim_loss_backward(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return 2.0 * (predictions - targets) / predictions.size


# --------------------------------------------------------------------------
# batches and optimisation
# --------------------------------------------------------------------------

@dataclass
class MIMBatch:
    frames: np.ndarray  # (B, T, C, H, W)
    plans: list[MaskPlan]
    targets: list[np.ndarray]


def make_batch(frames: np.ndarray, ratio: float = 0.75, seed: int = 0, eps: float = 1e-6) -> MIMBatch:
    B, T, _, H, W = frames.shape
    plans = [sample_mask_plan(T, H, W, ratio, seed=seed * 1_000_003 + b) for b in range(B)]
    return MIMBatch(frames, plans, [reconstruction_target(f, p, eps) for f, p in zip(frames, plans)])


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class PretrainConfig:
    steps: int = 200
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    mask_ratio: float = 0.75
    target_eps: float = 1e-6


def learning_rate(step: int, total: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay to 0."""
    warm = int(round(warmup_frac * total))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


def decays(name: str, a: np.ndarray) -> bool:
    return a.ndim >= 2


def adamw_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.05,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW step with decoupled weight decay on matrices/kernels only."""
    b1, b2 = betas
    step = state.step + 1
    new_p, new_m, new_v = dict(params), {}, {}
    for name, p in params.items():
        if is_buffer(name) or name not in grads:
            continue
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        upd = mhat / (np.sqrt(vhat) + eps)
        if weight_decay and decays(name, p):
            upd = upd + weight_decay * p
        new_p[name] = p - lr * upd
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(step, new_m, new_v)


def init_pretrain_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 1])
    d1, d4 = config.dims[0], config.dims[3]
    out = UNIT * UNIT * config.in_channels
    params["mim.mask_token"] = rng.normal(0.0, 0.02, d1)
    params["mim.head.weight"] = rng.normal(0.0, 0.02, (d4, out))
    params["mim.head.bias"] = np.zeros(out)
    return params


def mim_forward_backward(params: dict[str, np.ndarray], batch: MIMBatch, config: ModelConfig):
    """Batch loss and gradients for every trainable tensor."""
    total_elems = sum(t.size for t in batch.targets)
    loss, grads = 0.0, {}
    w, b = params["mim.head.weight"], params["mim.head.bias"]
    for frames, plan, target in zip(batch.frames, batch.plans, batch.targets):
        feats, cache = encoder_forward(frames, config, params, plan.units, params["mim.mask_token"], training=True)
        f4 = feats[3]
        pred_all = linear(f4, w, b)
        pred = pred_all[plan.units]
        loss += float(((pred - target) ** 2).sum()) / total_elems
        dpred_all = np.zeros_like(pred_all)
        dpred_all[plan.units] = 2.0 * (pred - target) / total_elems
        df4, dw, db = linear_backward(dpred_all, f4, w)
        _, g = encoder_backward([None, None, None, df4], cache, params)
        g["mim.head.weight"], g["mim.head.bias"] = dw, db
        g["mim.mask_token"] = g.pop("mask_token")
        for n, a in g.items():
            grads[n] = grads[n] + a if n in grads else a
    return loss, grads


def train_step(
    params: dict[str, np.ndarray],
    batch: MIMBatch,
    opt: OptimizerState,
    config: ModelConfig,
    lr: float,
    hp: PretrainConfig | None = None,
):
    """Returns ``(params', opt', loss)`` where ``loss`` is measured before the update."""
    hp = hp or PretrainConfig()
    loss, grads = mim_forward_backward(params, batch, config)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {opt.step}")
    new_params, new_opt = adamw_update(params, grads, opt, lr, hp.weight_decay, hp.betas, hp.adam_eps)
    return new_params, new_opt, loss


def sample_temporal_subset(
    T_total: int, k: int, mode: str = "random", seed: int = 0, fixed: tuple[int, ...] | None = None
) -> list[int]:
    """Sorted timestamp indices: a uniform k-subset, or a configured fixed set."""
    if k > T_total:
        raise ValueError(f"cannot pick {k} of {T_total} timestamps")
    if mode == "fixed":
        idx = list(fixed) if fixed is not None else list(np.linspace(0, T_total - 1, k).round().astype(int))
        if len(idx) != k or any(not 0 <= i < T_total for i in idx):
            raise ValueError(f"fixed indices {idx} invalid for k={k}, T_total={T_total}")
        return sorted(idx)
    if mode != "random":
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(T_total, size=k, replace=False))


# --------------------------------------------------------------------------
# toy run
# --------------------------------------------------------------------------

@dataclass
class ToyRunConfig:
    variant: str = "tiny"
    steps: int = 200
    seed: int = 0
    batch_size: int = 2
    T: int = 3
    T_total: int = 10
    size: int = 64
    channels: int = 3
    scenes: int = 2
    sampling: str = "random"
    lr: float = 2e-3
    weight_decay: float = 0.05
    mask_ratio: float = 0.75


def pretrain_toy(run: ToyRunConfig | None = None):
    """Seeded MIM pretraining on synthetic time series.

    Returns ``(rows, params)`` where rows are ``(step, lr, loss)``.
    """
    run = run or ToyRunConfig()
    config = make_config(run.variant, "M-M-M-M", run.channels)
    hp = PretrainConfig(steps=run.steps, base_lr=run.lr, weight_decay=run.weight_decay, mask_ratio=run.mask_ratio)
    pool = np.stack([
        generate_synthetic_sits(run.T_total, run.channels, run.size, run.size, seed=run.seed * 7919 + s,
                                change_step=run.T_total // 2).data
        for s in range(run.scenes)
    ])
    params = init_pretrain_params(config, run.seed)
    opt = OptimizerState()
    rows = []
    for step in range(run.steps):
        rng = np.random.default_rng([run.seed, step])
        scenes = rng.integers(0, run.scenes, run.batch_size)
        frames = np.stack([
            pool[s, sample_temporal_subset(run.T_total, run.T, run.sampling, seed=int(rng.integers(2**31)))]
            for s in scenes
        ])
        batch = make_batch(frames, run.mask_ratio, seed=int(rng.integers(2**31)), eps=hp.target_eps)
        lr = learning_rate(step, run.steps, hp.base_lr, hp.warmup_frac)
        params, opt, loss = train_step(params, batch, opt, config, lr, hp)
        rows.append((step, lr, loss))
    return rows, params


def write_report(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            w.writerow([step, repr(float(lr)), repr(float(loss))])

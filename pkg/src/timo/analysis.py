"""Closed-form FLOP accounting for the three attention kinds and whole encoders.

Conventions, applied identically by the instrumented forward pass:

* one multiply-accumulate = 2 FLOPs; bias adds and activations are free
* softmax and layer norm cost 5 FLOPs per element
* D-STGA's discrepancy term counts the subtraction ``Q_t - M_Q`` (1 FLOP per
  channel), the per-head ``D' -> 1`` projection (2 FLOPs per channel) and the
  broadcast add of the discrepancy column onto every score map entry
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_forward, init_attention_params
from .encoder import ModelConfig, _stem_width
from .numerics import count_flops

SCORE_KEYS = ("score_full", "score_spatial", "score_temporal", "score_discrepancy")


@dataclass
class FlopsReport:
    components: dict[str, int]
    config: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def score(self) -> int:
        return sum(self.components.get(k, 0) for k in SCORE_KEYS)

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        keys = list(dict.fromkeys([*self.components, *other.components]))
        return FlopsReport({k: self.components.get(k, 0) + other.components.get(k, 0) for k in keys}, self.config)

    def to_dict(self) -> dict:
        return {
            "config": self.config.get("model", self.config),
            "input_geometry": self.config.get("geometry", {}),
            "components": dict(self.components),
            "total_flops": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def count_attention_flops(kind: str, T: int, Np: int, D: int, h: int) -> FlopsReport:
    if D % h:
        raise ValueError(f"dim {D} not divisible by {h} heads")
    R = Np * Np
    N = T * R
    L = T + R - 1
    c: dict[str, int] = {"projections": 8 * N * D * D}
    if kind == "M":
        c.update(score_full=2 * N * N * D, softmax=5 * h * N * N, value_agg=2 * N * N * D)
    elif kind == "S":
        c.update(
            score_spatial=2 * N * R * D,
            score_temporal=2 * N * (T - 1) * D,
            softmax=5 * h * N * L,
            value_agg=2 * N * L * D,
        )
    elif kind == "D":
        c.update(
            score_spatial=2 * R * R * D,
            score_discrepancy=T * R * D + 2 * T * R * D + h * T * R * R,
            score_temporal=2 * N * (T - 1) * D,
            softmax=5 * h * N * L,
            value_agg=2 * N * L * D,
        )
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return FlopsReport(c, {"kind": kind, "T": T, "Np": Np, "D": D, "heads": h})


def count_block_flops(kind: str, T: int, Np: int, D: int, h: int, mlp_ratio: int = 4) -> FlopsReport:
    N = T * Np * Np
    rep = count_attention_flops(kind, T, Np, D, h)
    rep.components["ffn"] = 4 * N * D * D * mlp_ratio
    rep.components["norm"] = 2 * 5 * N * D
    return rep


def count_model_flops(config: ModelConfig, T: int, H: int, W: int | None = None, C: int | None = None) -> FlopsReport:
    """Encoder FLOPs (stem, all blocks, downsampling) for one input clip."""
    W = H if W is None else W
    C = config.in_channels if C is None else C
    if H % 32 or W % 32 or H != W:
        raise ValueError(f"need square input divisible by 32, got {H}x{W}")
    c1, d0 = _stem_width(config), config.dims[0]
    conv = 2 * T * (H // 2) ** 2 * c1 * C * 49 + 2 * T * (H // 4) ** 2 * d0 * c1 * 4
    total = FlopsReport({"conv": conv})
    for i, st in enumerate(config.stages):
        Np = H // 2 ** (i + 2)
        for _ in range(st.depth):
            total = total + count_block_flops(st.attn, T, Np, st.dim, st.heads, config.mlp_ratio)
        if i < 3:
            nxt = config.stages[i + 1].dim
            total.components["conv"] += 2 * T * (Np // 2) ** 2 * nxt * st.dim * 9
    total.config = {
        "model": {"variant": config.variant, "attn": config.attn_string, "dims": list(config.dims),
                  "heads": [s.heads for s in config.stages], "depths": [s.depth for s in config.stages]},
        "geometry": {"T": T, "H": H, "W": W, "C": C},
    }
    return total


def instrumented_attention_flops(kind: str, T: int, Np: int, D: int, h: int, seed: int = 0) -> dict[str, int]:
    """Run one real forward pass and return the per-tag FLOP counts it recorded."""
    rng = np.random.default_rng(seed)
    p = init_attention_params(D, h, rng, differential=(kind == "D"), std=0.3)
    x = rng.normal(size=(T, Np, Np, D))
    with count_flops() as counter:
        attention_forward(kind, x, p)
    return dict(counter.counts)


def scaling_experiment(Np: int, D: int, h: int, T_list) -> dict:
    """Score-computation FLOPs per mechanism over T, with log-log growth exponents."""
    T_list = list(T_list)
    if not T_list or sorted(T_list) != T_list:
        raise ValueError("T_list must be non-empty and ascending")
    rows = []
    for T in T_list:
        for kind in ("M", "S", "D"):
            rep = count_attention_flops(kind, T, Np, D, h)
            spatial = rep.components.get("score_spatial", rep.components.get("score_full", 0))
            rows.append({"T": T, "kind": kind, "score_flops": rep.score, "spatial_flops": spatial,
                         "temporal_flops": rep.components.get("score_temporal", 0)})
    exponents = {}
    if len(set(T_list)) > 1:
        for kind in ("M", "S", "D"):
            ts = np.log([r["T"] for r in rows if r["kind"] == kind])
            fs = np.log([r["score_flops"] for r in rows if r["kind"] == kind])
            exponents[kind] = float(np.polyfit(ts, fs, 1)[0])
    return {"Np": Np, "D": D, "heads": h, "rows": rows, "exponents": exponents}


def growth_exponent(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


TABLE6_ORDER = ("M-M-M-M", "S-M-M-M", "D-M-M-M", "D-D-M-M", "D-D-D-M", "D-D-D-D")
TABLE6_REPORTED_GFLOPS = (642.15, 436.87, 402.52, 372.60, 339.10, 333.64)


def table6_totals(config: ModelConfig, T: int = 3, size: int = 256, C: int | None = None) -> list[tuple[str, int]]:
    return [(a, count_model_flops(config.with_attn(a), T, size, size, C).total) for a in TABLE6_ORDER]


def gflops(flops: int) -> float:
    return flops / 1e9


"""The ten acceptance criteria as runnable checks.

Each ``criterion_N`` returns a :class:`CriterionResult`. The tests assert on
it and the ``acceptance`` subcommand prints it.
"""

from __future__ import annotations

import itertools
import json
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    TABLE6_ORDER,
    count_attention_flops,
    instrumented_attention_flops,
    scaling_experiment,
    table6_totals,
)
from .attention import (
    attention_forward,
    attention_probabilities,
    build_gyroscope_set,
    init_attention_params,
    mhsa,
)
from .checks import EQUIV_TOL, GRAD_TOL, GRADCHECK_TARGETS, stga_equivalence
from .encoder import convert_for_finetune, count_parameters, encode, init_params, make_config
from .pretrain import ToyRunConfig, masked_count, pretrain_toy, reconstruction_target, sample_mask_plan, unit_pixels
from .sampler import (
    CityCenter,
    build_manifest,
    manifest_to_json,
    meters_per_degree,
    read_manifest,
    sample_locations,
    sample_timestamp_grid,
    write_manifest,
)

PARAM_TARGETS = {"base": 91_000_000, "large": 298_000_000, "huge": 675_000_000}


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number}: {self.name} ({self.detail}; {self.seconds:.1f}s)"


def _timed(number: int, name: str):
    def wrap(fn):
        def run(**kw) -> CriterionResult:
            t0 = time.perf_counter()
            passed, detail, data = fn(**kw)
            return CriterionResult(number, name, bool(passed), detail, time.perf_counter() - t0, data)

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


@_timed(1, "parameter counts")
def criterion_1():
    counts = {v: count_parameters(make_config(v)) for v in PARAM_TARGETS}
    rel = {v: counts[v] / PARAM_TARGETS[v] - 1.0 for v in counts}
    ok = all(abs(r) <= 0.05 for r in rel.values())
    detail = ", ".join(f"{v}={counts[v]:,} ({rel[v]:+.2%})" for v in counts)
    return ok, detail, {"counts": counts}


@_timed(2, "STGA matches masked full attention")
def criterion_2(trials: int = 50, seed: int = 0):
    worst, where = 0.0, None
    for T, Np, h in itertools.product((1, 2, 3, 4), (2, 4, 8), (1, 2, 4)):
        dev = stga_equivalence(T, Np, 8, h, seed=seed, trials=trials)
        if dev >= worst:
            worst, where = dev, (T, Np, h)
    return worst < EQUIV_TOL, f"max deviation {worst:.2e} at (T, Np, h)={where}", {"max_dev": worst}


@_timed(3, "gyroscope set cardinality and membership")
def criterion_3(limit: int = 8):
    bad = []
    for T, Np in itertools.product(range(1, limit + 1), repeat=2):
        idx = build_gyroscope_set(T, Np)
        if idx.size != T + Np * Np - 1 or idx.index.shape != (T * Np * Np, T + Np * Np - 1):
            bad.append((T, Np, "size"))
            continue
        t, x, y = np.meshgrid(np.arange(T), np.arange(Np), np.arange(Np), indexing="ij")
        coords = np.stack([t.ravel(), x.ravel(), y.ravel()], axis=1)
        flat = idx.index
        for q, (tq, xq, yq) in enumerate(coords):
            want = {int(k) for k, (tk, xk, yk) in enumerate(coords) if tk == tq or (xk == xq and yk == yq)}
            got = flat[q].tolist()
            if len(set(got)) != len(got) or set(got) != want:
                bad.append((T, Np, q))
                break
    return not bad, f"{limit * limit} geometries, {len(bad)} failures", {"failures": bad[:5]}


@_timed(4, "gradient suite")
def criterion_4(seeds: int = 20, eps: float = 1e-6):
    worst = {}
    for target in ("stga", "dstga", "block", "encoder"):
        worst[target] = max(max(GRADCHECK_TARGETS[target](s, eps).values()) for s in range(seeds))
    ok = all(v < GRAD_TOL for v in worst.values())
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), {"worst": worst}


@_timed(5, "encoder FLOPs ordering")
def criterion_5():
    totals = table6_totals(make_config("base"), T=3, size=256)
    vals = [v for _, v in totals]
    ok = all(a > b for a, b in zip(vals, vals[1:])) and [a for a, _ in totals] == list(TABLE6_ORDER)
    return ok, " > ".join(f"{v / 1e9:.2f}G" for v in vals), {"totals": dict(totals)}


@_timed(6, "complexity claims")
def criterion_6(Np: int = 16, D: int = 64, h: int = 2):
    T_list = list(range(2, 33))
    res = scaling_experiment(Np, D, h, T_list)
    m_exp = res["exponents"]["M"]
    ok_m = abs(m_exp - 2.0) <= 0.1
    spatial = {k: {r["T"]: r["spatial_flops"] for r in res["rows"] if r["kind"] == k} for k in ("S", "D")}
    ok_const = len(set(spatial["D"].values())) == 1
    ok_ratio = all(spatial["S"][T] == T * spatial["D"][T] for T in T_list)
    worst = 0.0
    for kind, T, n in itertools.product("MSD", range(1, 5), range(1, 9)):
        want = count_attention_flops(kind, T, n, 8, 2).components
        got = instrumented_attention_flops(kind, T, n, 8, 2)
        for tag in set(want) | set(got):
            a, b = want.get(tag, 0), got.get(tag, 0)
            worst = max(worst, abs(a - b) / max(a, 1))
    ok_inst = worst <= 0.01
    detail = (f"M exponent {m_exp:.3f}, D spatial constant={ok_const}, S/D spatial ratio==T: {ok_ratio}, "
              f"analytic vs instrumented max rel err {worst:.1e}")
    return ok_m and ok_const and ok_ratio and ok_inst, detail, {"exponents": res["exponents"]}


def degenerate_dstga_deviation(T: int = 3, Np: int = 4, D: int = 8, h: int = 2, seed: int = 0) -> float:
    """Identical frames and a zeroed discrepancy projection: max deviation of
    every D-STGA output frame from spatial attention applied to one frame."""
    rng = np.random.default_rng(seed)
    p = init_attention_params(D, h, rng, differential=True, std=0.5)
    p.pi_w = np.zeros_like(p.pi_w)
    p.pi_b = np.zeros_like(p.pi_b)
    frame = rng.normal(size=(1, Np, Np, D))
    out, _ = attention_forward("D", np.repeat(frame, T, axis=0), p)
    return float(np.abs(out - mhsa(frame, p)).max())


@_timed(7, "D-STGA degeneracies")
def criterion_7(seed: int = 0):
    dev = max(degenerate_dstga_deviation(T, 4, 8, 2, seed) for T in (2, 3, 4))
    rng = np.random.default_rng(seed)
    row_err = 0.0
    for kind in "MSD":
        p = init_attention_params(8, 2, rng, differential=(kind == "D"), std=0.5)
        _, cache = attention_forward(kind, rng.normal(size=(3, 4, 4, 8)), p)
        row_err = max(row_err, float(np.abs(attention_probabilities(kind, cache).sum(-1) - 1.0).max()))
    ok = dev < 1e-6 and row_err < 1e-6
    return ok, f"max frame deviation {dev:.2e}, max row-sum error {row_err:.1e}", {"deviation": dev, "row_err": row_err}


@_timed(8, "MIM pipeline")
def criterion_8(steps: int = 200, seed: int = 0):
    plan = sample_mask_plan(3, 64, 64, 0.75, seed)
    ok_count = plan.count == 9 == masked_count(12, 0.75)
    frames = np.random.default_rng(seed).uniform(size=(3, 3, 64, 64))
    target = reconstruction_target(frames, plan)
    mean_err = float(np.abs(target.mean(axis=1)).max())
    ok_mean = mean_err < 1e-6 and unit_pixels(frames, plan).shape[0] == 9
    run = ToyRunConfig(steps=steps, seed=seed)
    rows, _ = pretrain_toy(run)
    rows2, _ = pretrain_toy(run)
    first, last = rows[0][2], rows[-1][2]
    ok_drop = last < 0.5 * first
    ok_repro = [r[2] for r in rows] == [r[2] for r in rows2]
    detail = (f"popcount {plan.count}/12, target mean err {mean_err:.1e}, loss {first:.4f} -> {last:.4f} "
              f"(ratio {last / first:.3f}), rerun identical={ok_repro}")
    return ok_count and ok_mean and ok_drop and ok_repro, detail, {"losses": [r[2] for r in rows]}


def expected_new_parameters(config, attn_string: str) -> set[str]:
    new = set()
    for i, (old, kind) in enumerate(zip(config.attn_string.split("-"), attn_string.split("-")), start=1):
        if kind == "D":
            for j in range(config.stages[i - 1].depth):
                new |= {f"stage{i}.block{j}.attn.{n}" for n in
                        ("pi_w", "pi_b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")}
    return new


@_timed(9, "fine-tune surgery")
def criterion_9(seed: int = 0, variant: str = "tiny"):
    config = make_config(variant, "M-M-M-M")
    params = init_params(config, seed)
    x = np.random.default_rng(seed).normal(size=(1, 3, 64, 64))
    ref = encode(x, config, params)
    p_s, c_s = convert_for_finetune(params, config, "S-M-M-M", seed)
    dev = max(float(np.abs(a - b).max()) for a, b in zip(ref, encode(x, c_s, p_s)))
    p_d, _ = convert_for_finetune(params, config, "D-D-M-M", seed)
    added = set(p_d) - set(params)
    removed = set(params) - set(p_d)
    want = expected_new_parameters(config, "D-D-M-M")
    ok = dev < 1e-6 and added == want and not removed
    return ok, f"S-M-M-M deviation {dev:.1e}, D-D-M-M added {len(added)} (expected {len(want)})", {}


DEFAULT_CITIES = [
    CityCenter("Wuhan", 30.5928, 114.3055),
    CityCenter("Paris", 48.8566, 2.3522),
    CityCenter("Nairobi", -1.2921, 36.8219),
    CityCenter("Lima", -12.0464, -77.0428),
]


@_timed(10, "sampler statistics")
def criterion_10(n: int = 10_000, sigma_km: float = 50.0, seed: int = 0):
    cities = {c.name: c for c in DEFAULT_CITIES}
    locs = sample_locations(DEFAULT_CITIES, n, sigma_km, seed)
    north, east = [], []
    for lat, lon, name in locs:
        c = cities[name]
        m_lat, m_lon = meters_per_degree(c.lat)
        north.append((lat - c.lat) * m_lat / 1000.0)
        east.append(((lon - c.lon + 180.0) % 360.0 - 180.0) * m_lon / 1000.0)
    stds = (float(np.std(north, ddof=1)), float(np.std(east, ddof=1)))
    ok_std = all(abs(s / sigma_km - 1.0) <= 0.03 for s in stds)
    gaps_ok = True
    for s in range(5):
        grid = sample_timestamp_grid(seed + s)
        gaps = [(b - a).days for a, b in zip(grid, grid[1:])]
        gaps_ok &= len(grid) == 10 and all(181 <= g <= 184 for g in gaps)
    manifest = build_manifest(DEFAULT_CITIES, 50, sigma_km, seed)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "manifest.json"
        write_manifest(manifest, path)
        first = path.read_bytes()
        back = read_manifest(path)
        write_manifest(back, path)
        ok_round = path.read_bytes() == first and back == manifest
        ok_round &= json.loads(manifest_to_json(back)) == json.loads(first)
    detail = f"per-axis std {stds[0]:.2f}/{stds[1]:.2f} km, gaps ok={gaps_ok}, round-trip exact={ok_round}"
    return ok_std and gaps_ok and ok_round, detail, {"stds": stds}


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 11)}


def run_all(only=None) -> list[CriterionResult]:
    return [CRITERIA[i]() for i in (only or CRITERIA)]


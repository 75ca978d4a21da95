"""Command-line entry point: ``timo <subcommand> [options]``.

Exit codes: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import count_model_flops, scaling_experiment
from .checks import EQUIV_TOL, GRAD_TOL, GRADCHECK_TARGETS, stga_equivalence
from .encoder import VARIANTS, count_parameters, make_config, parameter_breakdown

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit; raise so main() owns the exit code
        raise UsageError(f"{self.prog}: {message}")


def default_seed() -> int:
    raw = os.environ.get("TIMO_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TIMO_SEED must be an integer, got {raw!r}") from None


def header(args, geometry: dict | None = None, dtype: str = "float64") -> dict:
    """Reproducibility header embedded in every report."""
    opts = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    return {"tool": "timo", "version": __version__, "command": args.command, "seed": getattr(args, "seed", None),
            "dtype": dtype, "geometry": geometry or {}, "options": opts}


def _emit(report: dict, args) -> None:
    if getattr(args, "json", False):
        print(json.dumps(report, indent=2))
    out = getattr(args, "out_json", None)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")


def _verdict(ok: bool, message: str) -> int:
    print(("PASS " if ok else "FAIL ") + message)
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

PARAM_TARGETS = {"base": 91_000_000, "large": 298_000_000, "huge": 675_000_000}


def cmd_paramcount(args) -> int:
    config = make_config(args.variant, args.attn, args.channels)
    total = count_parameters(config)
    report = {"header": header(args, {"C": args.channels}), "total": total,
              "breakdown": parameter_breakdown(config)}
    if not args.json:
        for k, v in report["breakdown"].items():
            print(f"{k:>16s} {v:>14,d}")
        print(f"{'total':>16s} {total:>14,d}")
    _emit(report, args)
    target = PARAM_TARGETS.get(args.variant)
    if target is None:
        return EXIT_OK
    rel = total / target - 1.0
    return _verdict(abs(rel) <= 0.05, f"{args.variant}: {total:,} vs {target:,} ({rel:+.2%}, tolerance 5%)")


def cmd_flops(args) -> int:
    config = make_config(args.variant, args.attn[0], args.channels)
    geometry = {"T": args.T, "H": args.size, "W": args.size, "C": args.channels}
    reports = [count_model_flops(config.with_attn(a), args.T, args.size, args.size, args.channels) for a in args.attn]
    if args.json:
        _emit({"header": header(args, geometry), "reports": [r.to_dict() for r in reports]}, args)
    else:
        for a, r in zip(args.attn, reports):
            print(f"{a}: {r.total / 1e9:.3f} GFLOPs")
            for k, v in r.components.items():
                print(f"    {k:>18s} {v:>18,d}")
        _emit({"header": header(args, geometry), "reports": [r.to_dict() for r in reports]},
              argparse.Namespace(out_json=args.out_json))
    totals = [r.total for r in reports]
    if len(totals) > 1:
        return _verdict(all(a > b for a, b in zip(totals, totals[1:])), "totals strictly decrease in the given order")
    return EXIT_OK


def cmd_scaling(args) -> int:
    res = scaling_experiment(args.np, args.dim, args.heads, args.T_list)
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["T", "kind", "score_flops", "spatial_flops", "temporal_flops"])
            w.writeheader()
            w.writerows(res["rows"])
    if args.json:
        _emit({"header": header(args, {"Np": args.np, "D": args.dim, "heads": args.heads}), **res}, args)
    else:
        print(f"{'T':>4s} {'kind':>4s} {'score':>16s} {'spatial':>16s} {'temporal':>16s}")
        for r in res["rows"]:
            print(f"{r['T']:>4d} {r['kind']:>4s} {r['score_flops']:>16,d} {r['spatial_flops']:>16,d} "
                  f"{r['temporal_flops']:>16,d}")
        print("exponents: " + ", ".join(f"{k}={v:.3f}" for k, v in res["exponents"].items()))
    sp = {(r["T"], r["kind"]): r["spatial_flops"] for r in res["rows"]}
    ratio_ok = all(sp[(T, "S")] == T * sp[(T, "D")] for T in args.T_list)
    m = res["exponents"].get("M")
    m_ok = m is None or abs(m - 2.0) <= 0.1
    return _verdict(ratio_ok and m_ok, f"STGA/D-STGA spatial ratio == T: {ratio_ok}; MHSA exponent {m}")


def cmd_equiv(args) -> int:
    if args.dim % args.heads:
        raise UsageError(f"--dim {args.dim} not divisible by --heads {args.heads}")
    dev = stga_equivalence(args.T, args.np, args.dim, args.heads, args.seed, args.trials)
    _emit({"header": header(args, {"T": args.T, "Np": args.np, "D": args.dim, "heads": args.heads}),
           "max_deviation": dev, "tolerance": EQUIV_TOL}, args)
    return _verdict(dev < EQUIV_TOL, f"max |stga - oracle| = {dev:.3e} over {args.trials} trials (< {EQUIV_TOL:g})")


def cmd_gradcheck(args) -> int:
    errors = {}
    for s in range(args.seed, args.seed + args.seeds):
        for k, v in GRADCHECK_TARGETS[args.target](s, args.eps).items():
            errors[k] = max(errors.get(k, 0.0), v)
    _emit({"header": header(args), "max_relative_error": errors, "tolerance": GRAD_TOL}, args)
    if not args.json:
        for k, v in errors.items():
            print(f"{k:>18s} {v:.3e}")
    bad = [k for k, v in errors.items() if not v < GRAD_TOL]
    msg = f"{args.target}: worst {max(errors.values()):.3e}" + (f"; first violation: {bad[0]}" if bad else "")
    return _verdict(not bad, msg)


def cmd_pretrain_toy(args) -> int:
    from .pretrain import ToyRunConfig, pretrain_toy, write_report

    run = ToyRunConfig(variant=args.variant, steps=args.steps, seed=args.seed)
    rows, _ = pretrain_toy(run)
    if args.report:
        write_report(rows, args.report)
    first, last = rows[0][2], rows[-1][2]
    _emit({"header": header(args, {"T": run.T, "H": run.size, "W": run.size, "C": run.channels}),
           "initial_loss": first, "final_loss": last, "losses": [r[2] for r in rows]}, args)
    if not args.json:
        for step, lr, loss in rows[:: max(1, len(rows) // 10)]:
            print(f"step {step:>5d} lr {lr:.3e} loss {loss:.6f}")
    return _verdict(last < 0.5 * first, f"loss {first:.6f} -> {last:.6f} (ratio {last / first:.3f}, need < 0.5)")


def cmd_manifest(args) -> int:
    from .sampler import build_manifest, load_cities, manifest_to_json, write_manifest

    manifest = build_manifest(load_cities(args.cities), args.n, args.sigma_km, args.seed, args.jitter)
    if args.out:
        write_manifest(manifest, args.out)
        print(f"wrote {len(manifest.records)} records to {args.out}")
    else:
        print(manifest_to_json(manifest))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .sampler import generate_synthetic_sits, write_tensor

    sits = generate_synthetic_sits(args.T, args.channels, args.size, args.size, args.seed,
                                   change_step=args.change_step)
    data = sits.data.astype(np.float32 if args.dtype == "float32" else np.float64)
    write_tensor(args.out, data)
    print(f"wrote {data.shape} {data.dtype} to {args.out}")
    return EXIT_OK


def cmd_acceptance(args) -> int:
    from .acceptance import run_all

    results = run_all(args.criterion)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("need one or more positive integers")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser(seed: int) -> argparse.ArgumentParser:
    p = _Parser(prog="timo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"timo {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=seed, help="seed (default: $TIMO_SEED or 0)")
        sp.add_argument("--json", action="store_true", help="print a JSON report")
        sp.add_argument("--out-json", help="also write the JSON report to this file")
        return sp

    variants = sorted(VARIANTS)
    sp = add("paramcount", cmd_paramcount, "count encoder parameters")
    sp.add_argument("--variant", choices=variants, default="base")
    sp.add_argument("--attn", default="M-M-M-M")
    sp.add_argument("--channels", type=_positive, default=3)

    sp = add("flops", cmd_flops, "analytic encoder FLOPs")
    sp.add_argument("--variant", choices=variants, default="base")
    sp.add_argument("--attn", nargs="+", default=["M-M-M-M"], help="one or more attention strings")
    sp.add_argument("--T", type=_positive, default=3)
    sp.add_argument("--size", type=_positive, default=256)
    sp.add_argument("--channels", type=_positive, default=3)

    sp = add("scaling", cmd_scaling, "score FLOPs versus T")
    sp.add_argument("--np", type=_positive, default=16)
    sp.add_argument("--dim", type=_positive, default=64)
    sp.add_argument("--heads", type=_positive, default=2)
    sp.add_argument("--T-list", dest="T_list", type=_int_list, default=list(range(2, 33)))
    sp.add_argument("--report", help="CSV output path")

    sp = add("equiv", cmd_equiv, "STGA versus the masked full-attention oracle")
    sp.add_argument("--T", type=_positive, default=3)
    sp.add_argument("--np", type=_positive, default=4)
    sp.add_argument("--dim", type=_positive, default=16)
    sp.add_argument("--heads", type=_positive, default=2)
    sp.add_argument("--trials", type=_positive, default=50)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--target", choices=sorted(GRADCHECK_TARGETS), required=True)
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--seeds", type=_positive, default=1, help="number of consecutive seeds")

    sp = add("pretrain-toy", cmd_pretrain_toy, "seeded toy masked-image-modeling run")
    sp.add_argument("--steps", type=_positive, default=200)
    sp.add_argument("--variant", choices=variants, default="tiny")
    sp.add_argument("--report", help="CSV loss curve path")

    sp = add("manifest", cmd_manifest, "location/timestamp sampling manifest")
    sp.add_argument("--cities", required=True, help="CSV with name,lat,lon")
    sp.add_argument("--n", type=_positive, default=100)
    sp.add_argument("--sigma-km", type=float, default=50.0)
    sp.add_argument("--jitter", type=int, default=0, help="max timestamp offset in days")
    sp.add_argument("--out")

    sp = add("synth", cmd_synth, "synthetic image time series tensor")
    sp.add_argument("--T", type=_positive, default=10)
    sp.add_argument("--size", type=_positive, default=64)
    sp.add_argument("--channels", type=_positive, default=3)
    sp.add_argument("--change-step", type=int, default=None)
    sp.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    sp.add_argument("--out", required=True)

    sp = add("acceptance", cmd_acceptance, "run acceptance criteria")
    sp.add_argument("--criterion", type=int, nargs="*", choices=range(1, 11), help="subset (default: all)")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser(default_seed()).parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

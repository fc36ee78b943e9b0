"""Verification CLI: equivalence, gradient, scaling, and uniformity suites.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
Reports are written to --out (or stdout) as canonical JSON or CSV; fixed
seeds produce byte-identical reports. Human-readable summaries go to stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import blocks, complexity, gradcheck, reporting
from .complexity import OpCounter
from .config import PRESETS, ModelConfig, load_model_config, parse_raw
from .dense_attention import DenseAttnParams, multi_head_attn, uniformity_at_init
from .errors import ConfigError, ParameterError
from .interp import Point3
from .stdeform_attention import dense_equivalence_construct, stdeform_attn
from .tensor_core import ClipFeatureMap, make_rng, randn, split_seed

EQUIV_TOL = 1e-10
DENSE_SLOPE_WINDOW = (1.9, 2.1)
DEFORM_SLOPE_WINDOW = (0.95, 1.1)


def _load_config(args) -> ModelConfig:
    base = PRESETS[args.preset] if getattr(args, "preset", None) else ModelConfig()
    cfg = load_model_config(args.config, base=base) if args.config else base
    if args.seed is not None:
        cfg = ModelConfig(**{**cfg.as_dict(), "seed": args.seed})
    return cfg


def _parse_sizes(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--sizes expects comma-separated integers, got {raw!r}") from None


def _emit_report(args, payload: dict, csv_header=None, csv_rows=None):
    if args.format == "json":
        reporting.emit(reporting.canonical_json(payload), args.out)
    else:
        if csv_header is None:
            raise ConfigError(f"command '{args.command}' only supports --format json")
        reporting.emit(reporting.rows_to_csv(csv_header, csv_rows), args.out)


# ---------------------------------------------------------------------------
# equiv


def _equiv_instance(t, h, w, heads, c, seed, mutate=False):
    seeds = split_seed(seed, 4)
    fmap = ClipFeatureMap(randn((t, h, w, c), seeds[0]))
    dense = DenseAttnParams.random(heads, c, seeds[1])
    z_q = make_rng(seeds[2]).normal(size=c)
    rng = make_rng(seeds[3])
    p_q = Point3(x=rng.uniform(0, w - 1) if w > 1 else 0.25,
                 y=rng.uniform(0, h - 1) if h > 1 else 0.25,
                 t=rng.uniform(0, t - 1) if t > 1 else 0.25)
    keys = fmap.values.reshape(-1, c)
    dense_out, _ = multi_head_attn(dense, z_q, keys)
    override, deform_out, _ = dense_equivalence_construct(fmap, dense, z_q, p_q)
    if mutate:
        override.wo[0, 0, 0] += 1e-3
        deform_out, _ = stdeform_attn(override, z_q, p_q, fmap)
    return {
        "t": t, "h": h, "w": w, "heads": heads, "points": t * h * w,
        "max_abs_diff": float(np.max(np.abs(deform_out - dense_out))),
    }


def cmd_equiv(args) -> int:
    if args.config:
        raw = parse_raw(Path(args.config).read_text()) if Path(args.config).exists() else None
        if raw is None:
            raise ConfigError(f"config file not found: {args.config}")
        cfg = _load_config(args)
        if "points" in raw and raw["points"] != cfg.t * cfg.h * cfg.w:
            raise ConfigError(
                f"equivalence requires points = t*h*w = {cfg.t * cfg.h * cfg.w}, "
                f"config sets points = {raw['points']}"
            )
        sweep = [(cfg.t, cfg.h, cfg.w, cfg.heads, cfg.c)]
        seed = cfg.seed if args.seed is None else args.seed
    else:
        seed = 7 if args.seed is None else args.seed
        sweep = [(t, h, w, m, 4)
                 for t in range(1, 4) for h in range(1, 5) for w in range(1, 5)
                 for m in (1, 2)]

    entries = []
    for i, (t, h, w, m, c) in enumerate(sweep):
        entries.append(_equiv_instance(t, h, w, m, c, seed + i, mutate=args.mutate))
    worst = max(e["max_abs_diff"] for e in entries)
    passed = worst <= EQUIV_TOL
    payload = {"tolerance": EQUIV_TOL, "instances": entries,
               "max_abs_diff": worst, "passed": passed}
    _emit_report(args, payload,
                 csv_header=["t", "h", "w", "heads", "points", "max_abs_diff"],
                 csv_rows=[[e["t"], e["h"], e["w"], e["heads"], e["points"],
                            e["max_abs_diff"]] for e in entries])
    if args.plot:
        reporting.render_equiv_figure(
            entries, reporting.sibling_path(args.out, ".png", "equiv"))
    print(f"equiv: {len(entries)} instances, max |diff| = {worst:.3e} "
          f"({'PASS' if passed else 'FAIL'} at {EQUIV_TOL:g})", file=sys.stderr)
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    if args.format == "csv":
        raise ConfigError("gradcheck reports are JSON only")
    modules = args.module or list(gradcheck.INSTANCE_FACTORIES)
    seed = 7 if args.seed is None else args.seed
    reports = gradcheck.run_suite(modules, args.instances, seed,
                                  tolerance=args.tolerance, h=args.step)
    all_pass = all(r.passed for r in reports)
    payload = {
        "tolerance": args.tolerance,
        "step": args.step,
        "reports": [r.as_dict() for r in reports],
        "passed": all_pass,
    }
    _emit_report(args, payload)
    worst = max(reports, key=lambda r: r.max_rel_err)
    print(f"gradcheck: {len(reports)} groups over {modules}, worst {worst.group} "
          f"rel err {worst.max_rel_err:.3e} ({'PASS' if all_pass else 'FAIL'})",
          file=sys.stderr)
    return 0 if all_pass else 1


# ---------------------------------------------------------------------------
# scaling


def cmd_scaling(args) -> int:
    sizes = _parse_sizes(args.sizes)
    if len(sizes) < 4:
        raise ConfigError(f"scaling sweep needs at least 4 grid sizes, got {sizes}")
    seed = 7 if args.seed is None else args.seed
    paths = ["dense", "deformable"] if args.path == "both" else [args.path]

    t0 = time.perf_counter()
    reports = {}
    for path in paths:
        try:
            reports[path] = complexity.measure_encoder(path, sizes, args.c, args.heads,
                                                       args.k, seed)
        except ParameterError as exc:  # bad sweep or dims → config error
            raise ConfigError(str(exc)) from exc
    elapsed = time.perf_counter() - t0

    ok = True
    for path, report in reports.items():
        lo, hi = DENSE_SLOPE_WINDOW if path == "dense" else DEFORM_SLOPE_WINDOW
        ok = ok and lo <= report.slope <= hi

    if args.format == "json":
        payload = {path: report.as_dict() for path, report in reports.items()}
        reporting.emit(reporting.canonical_json(payload), args.out)
    else:
        header = ["cells", "multiplies", "adds", "interp_reads"]
        if len(reports) == 1:
            report = next(iter(reports.values()))
            reporting.emit(reporting.rows_to_csv(header, report.rows()), args.out)
        elif args.out is None:
            for path, report in reports.items():
                print(f"# path={path}")
                print(reporting.rows_to_csv(header, report.rows()), end="")
        else:
            for path, report in reports.items():
                target = reporting.sibling_path(args.out, f".{path}.csv", "scaling")
                Path(target).write_text(reporting.rows_to_csv(header, report.rows()))
    if args.plot:
        reporting.render_scaling_figure(
            list(reports.values()), reporting.sibling_path(args.out, ".png", "scaling"))

    summary = ", ".join(f"{p} slope {r.slope:.3f}" for p, r in reports.items())
    print(f"scaling: {summary} in {elapsed:.2f}s wall ({'PASS' if ok else 'FAIL'})",
          file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# uniform-init


def cmd_uniform_init(args) -> int:
    sizes = _parse_sizes(args.sizes)
    if len(sizes) < 2:
        raise ConfigError(f"uniform-init sweep needs at least 2 key counts, got {sizes}")
    if args.trials < 100:
        raise ConfigError(f"uniform-init needs at least 100 trials, got {args.trials}")
    seed = 7 if args.seed is None else args.seed

    entries = []
    for i, n_k in enumerate(sizes):
        scaled, unscaled = uniformity_at_init(n_k, args.trials, seed + i, c_v=args.cv,
                                              force_zero_logits=args.zero_logits)
        entries.append({"n_k": n_k, "trials": args.trials,
                        "scaled_max_deviation": scaled, "max_deviation": unscaled})
    non_increasing = entries[-1]["scaled_max_deviation"] <= entries[0]["scaled_max_deviation"]
    payload = {"c_v": args.cv, "entries": entries, "non_increasing": non_increasing}
    _emit_report(args, payload,
                 csv_header=["n_k", "trials", "scaled_max_deviation", "max_deviation"],
                 csv_rows=[[e["n_k"], e["trials"], e["scaled_max_deviation"],
                            e["max_deviation"]] for e in entries])
    if args.plot:
        reporting.render_uniformity_figure(
            entries, reporting.sibling_path(args.out, ".png", "uniform_init"))
    print("uniform-init: scaled stat "
          + " -> ".join(f"{e['scaled_max_deviation']:.3f}" for e in entries)
          + f" ({'non-increasing' if non_increasing else 'INCREASING'})", file=sys.stderr)
    return 0 if non_increasing else 1


# ---------------------------------------------------------------------------
# demo


def cmd_demo(args) -> int:
    if args.format == "csv":
        raise ConfigError("demo reports are JSON only")
    cfg = _load_config(args)
    model = blocks.build_model(cfg)
    clip_seed = split_seed(cfg.seed, 1)[0]
    clip = ClipFeatureMap(randn((cfg.t, cfg.h, cfg.w, cfg.c), clip_seed))

    enc_counter, dec_counter = OpCounter(), OpCounter()
    emb, refs, cache = blocks.model_forward(model, clip, counter=enc_counter,
                                            dec_counter=dec_counter)
    plans = cache["dec"][-1]["plans"]

    # Toy gradient-descent smoke test on a smooth scalar loss (no accuracy claim).
    trace = []
    for _ in range(args.steps):
        emb_i, _, cache_i = blocks.model_forward(model, clip)
        trace.append(float(0.5 * np.mean(emb_i**2)))
        grads, _ = blocks.model_backward(model, cache_i, emb_i / emb_i.size)
        for name, param in model.named_parameters().items():
            param -= args.lr * grads[name]
    emb_final, _, _ = blocks.model_forward(model, clip)
    trace.append(float(0.5 * np.mean(emb_final**2)))

    payload = {
        "config": cfg.as_dict(),
        "embeddings": emb.tolist(),
        "reference_points": [{"x": p.x, "y": p.y, "t": p.t} for p in refs],
        "sampling_plans": [
            {"offsets": plan.offsets.tolist(), "weights": plan.weights.tolist()}
            for plan in plans
        ],
        "op_counts": {
            "encoder": enc_counter.snapshot().as_dict(),
            "decoder": dec_counter.snapshot().as_dict(),
            "total": (enc_counter.snapshot() + dec_counter.snapshot()).as_dict(),
        },
        "loss_trace": trace,
    }
    _emit_report(args, payload)
    if args.plot:
        reporting.render_loss_figure(trace, reporting.sibling_path(args.out, ".png", "demo"))
    print(f"demo: loss {trace[0]:.6f} -> {trace[-1]:.6f} over {args.steps} steps",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stdeform",
        description="Verification suites for spatio-temporal deformable attention kernels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, formats=("json", "csv")):
        p.add_argument("--config", help="model config file (key=value lines)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="report path (default: stdout)")
        p.add_argument("--format", choices=formats, default="json")
        p.add_argument("--plot", action="store_true",
                       help="render a figure next to the report")

    p = sub.add_parser("equiv", help="dense-equivalence sweep at K = H*W*T")
    common(p)
    p.add_argument("--mutate", action="store_true",
                   help="corrupt one copied weight (verifies failure detection)")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    common(p)
    p.add_argument("--module", action="append",
                   choices=list(gradcheck.INSTANCE_FACTORIES),
                   help="restrict to one module (repeatable; default: all)")
    p.add_argument("--instances", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scaling", help="instrumented multiply counts over a grid sweep")
    common(p)
    p.add_argument("--sizes", default="8,27,64,125,216")
    p.add_argument("--path", choices=["dense", "deformable", "both"], default="both")
    p.add_argument("--c", type=int, default=1, help="channel count for the sweep")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--k", type=int, default=4, help="sampling points per head")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("uniform-init", help="deviation of init-time weights from uniform")
    common(p)
    p.add_argument("--sizes", default="64,512,4096", help="key counts N_k")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--cv", type=int, default=64, help="head dimension C_v")
    p.add_argument("--zero-logits", action="store_true",
                   help="force all logits to zero (deviation is exactly 0)")
    p.set_defaults(func=cmd_uniform_init)

    p = sub.add_parser("demo", help="seeded forward dump plus a toy descent trace")
    common(p)
    p.add_argument("--preset", choices=list(PRESETS), default="desk")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

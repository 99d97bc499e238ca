"""gptvq command line: quantize, decode, eval, sweep, bench, generate.

Exit codes: 0 success, 1 usage error, 2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import ar1_synthetic, run_sweep, sqnr_db
from .codebook import SeedMethod
from .engine import VQConfig, Weighting, proxy_loss, quantize_layer
from .errors import GPTVQError, InputError, NumericError, ShapeMismatch
from .numerics import HessianContext, build_hessian, load_tensor, prepare_context, save_tensor
from .postproc import codebook_update, svd_compress_codebooks
from .vqformat import bench_decode, bits_per_value, decode_container, load_layer, parse_container, scale_overhead_bpv, serialize

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def parse_synthetic(spec: str, seed: int = 0) -> np.ndarray:
    """``ar1:RHO:ROWSxCOLS`` -> seeded AR(1)-correlated Gaussian tensor."""
    try:
        kind, rho, shape = spec.split(":")
        rows, cols = (int(v) for v in shape.lower().split("x"))
        rho = float(rho)
    except ValueError:
        raise InputError(f"bad --synthetic spec {spec!r}, expected ar1:RHO:ROWSxCOLS") from None
    if kind != "ar1":
        raise InputError(f"unknown synthetic generator {kind!r}")
    return ar1_synthetic(rows, cols, rho, seed)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _context(args, cols: int, inputs: dict) -> HessianContext:
    if getattr(args, "hessian", None):
        raw = _read(args.hessian)
        inputs["hessian"] = digest(raw)
        H = load_tensor(args.hessian)
    elif getattr(args, "calib", None):
        raw = _read(args.calib)
        inputs["calib"] = digest(raw)
        H = build_hessian(load_tensor(args.calib))
    else:
        return HessianContext.identity(cols, args.damp)
    if H.shape != (cols, cols):
        raise ShapeMismatch(f"Hessian is {H.shape[0]}x{H.shape[1]} but the weights have {cols} columns")
    return prepare_context(H, args.damp)


def _blas_limit():
    # pin BLAS so results cannot depend on its thread count
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=1)


def _print_report(pairs: dict, out=None):
    out = out or sys.stdout
    width = max(len(k) for k in pairs)
    for k, v in pairs.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        out.write(f"{k:<{width}}  {v}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    timings = {}
    t0 = time.perf_counter()
    inputs = {"weights": digest(_read(args.weights))}
    W = load_tensor(args.weights)
    ctx = _context(args, W.shape[1], inputs)
    timings["prepare"] = time.perf_counter() - t0

    cfg = VQConfig(
        d=args.d, bits_per_index=args.index_bits, group_size=args.group_size, group_cols=args.group_cols,
        block_size=args.block_size, codebook_bits=args.codebook_bits, em_iters=args.em_iters,
        seed_method=args.seed_method, rng_seed=args.seed, scale_block=args.scale_block,
        int4_scale_group=args.int4_scale_group, weighting=args.weighting,
    )
    t0 = time.perf_counter()
    ql = quantize_layer(W, ctx, cfg, workers=args.threads)
    timings["quantize"] = time.perf_counter() - t0
    if args.codebook_update:
        t0 = time.perf_counter()
        ql = codebook_update(W, ctx, ql, args.codebook_update)
        timings["codebook_update"] = time.perf_counter() - t0
    if args.svd_rank:
        t0 = time.perf_counter()
        ql = svd_compress_codebooks(W, ctx, ql, args.svd_rank, args.svd_steps)
        timings["svd"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    blob = serialize(ql)
    Path(args.out).write_bytes(blob)
    timings["serialize"] = time.perf_counter() - t0

    W_hat = ql.reconstruct()
    metrics = {
        "bpv": bits_per_value(cfg),
        "overhead_bpv": scale_overhead_bpv(cfg),
        "sqnr_db": _num(sqnr_db(W, W_hat)) if np.any(W) else None,
        "proxy_loss": proxy_loss(W, W_hat, ctx),
    }
    manifest = {
        "tool": "gptvq",
        "version": __version__,
        "command": "quantize",
        "config": cfg.to_dict(),
        "postproc": {"codebook_update": args.codebook_update, "svd_rank": args.svd_rank,
                     "svd_steps": args.svd_steps if args.svd_rank else 0, "damp": args.damp},
        "inputs": inputs,
        "rng_seed": args.seed,
        "container": {"bytes": len(blob), "digest": digest(blob)},
        "metrics": metrics,
    }
    manifest_path = Path(str(args.out) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if args.json:
        print(json.dumps(dict(manifest, timings=timings), indent=2, sort_keys=True))
    else:
        _print_report({
            "container": args.out, "bytes": len(blob), "bpv": metrics["bpv"],
            "overhead_bpv": metrics["overhead_bpv"], "sqnr_db": metrics["sqnr_db"],
            "proxy_loss": metrics["proxy_loss"], "manifest": str(manifest_path),
            **{f"time_{k}_s": v for k, v in timings.items()},
        })
    return 0


def cmd_decode(args) -> int:
    c = parse_container(_read(args.container), strict=args.strict)
    W_hat = decode_container(c)
    save_tensor(W_hat, args.out)
    _print_report({"decoded": args.out, "rows": W_hat.shape[0], "cols": W_hat.shape[1]})
    return 0


def cmd_eval(args) -> int:
    blob = _read(args.container)
    c = parse_container(blob, strict=args.strict)
    W_hat = decode_container(c)
    W = load_tensor(args.weights)
    if W.shape != W_hat.shape:
        raise ShapeMismatch(f"weights are {W.shape} but the container holds {W_hat.shape}")
    ctx = _context(args, W.shape[1], {})
    cfg = load_layer(c).config
    report = {
        "sqnr_db": _num(sqnr_db(W, W_hat)),
        "proxy_loss": proxy_loss(W, W_hat, ctx),
        "bpv": bits_per_value(cfg),
        "overhead_bpv": scale_overhead_bpv(cfg),
        "bytes": len(blob),
    }
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        _print_report(report)
    return 0


def cmd_sweep(args) -> int:
    if args.weights:
        W = load_tensor(args.weights)
    elif args.synthetic:
        W = parse_synthetic(args.synthetic, args.seed)
    else:
        raise InputError("sweep needs --weights or --synthetic")
    ctx = _context(args, W.shape[1], {}) if (args.hessian or args.calib) else None
    report = run_sweep(W, ctx, args.target_overhead, args.index_bits, args.codebook_bits,
                       args.em_iters, args.seed_method, csv_path=args.out)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_bench(args) -> int:
    result = bench_decode(_read(args.container), args.reps)
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        _print_report(result)
    return 0


def cmd_generate(args) -> int:
    t = parse_synthetic(args.synthetic, args.seed)
    save_tensor(t, args.out)
    _print_report({"generated": args.out, "rows": t.shape[0], "cols": t.shape[1]})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def _hessian_flags(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--hessian", help="precomputed Hessian H (.t2d, cols x cols)")
    src.add_argument("--calib", help="calibration activations X (.t2d, cols x samples); H = X X^T")
    p.add_argument("--damp", type=float, default=0.01, help="dampening as a fraction of mean(diag H)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="gptvq", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"gptvq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize a weight tensor into a .gvq container", formatter_class=fmt)
    q.add_argument("--weights", required=True, help="weight matrix W (.t2d, rows x cols)")
    _hessian_flags(q)
    q.add_argument("--d", type=int, default=2, choices=(1, 2, 4), help="VQ dimensionality")
    q.add_argument("--index-bits", type=int, default=6, help="bits per index (log2 of codebook size)")
    q.add_argument("--group-size", type=int, default=8192, help="weights per codebook group")
    q.add_argument("--group-cols", type=int, default=None, help="columns per group; unset means min(256, group size)")
    q.add_argument("--block-size", type=int, default=128, help="error-feedback block width")
    q.add_argument("--codebook-bits", type=int, default=8, choices=(32, 8, 4), help="codebook storage bits")
    q.add_argument("--em-iters", type=int, default=100, help="EM iterations per codebook")
    q.add_argument("--seed-method", default="mahalanobis", choices=[m.value for m in SeedMethod],
                   help="codebook seeding")
    q.add_argument("--seed", type=int, default=0, help="random seed")
    q.add_argument("--weighting", default="inv_diag", choices=[w.value for w in Weighting],
                   help="EM point weights: inverse-Hessian diagonal or squared Cholesky diagonal")
    q.add_argument("--codebook-update", type=int, default=0, metavar="STEPS",
                   help="codebook gradient steps after the sweep (0 disables)")
    q.add_argument("--svd-rank", type=int, default=None, metavar="R", help="SVD codebook rank (d=1 only)")
    q.add_argument("--svd-steps", type=int, default=100, help="factor refinement steps for --svd-rank")
    q.add_argument("--scale-block", type=int, default=None, choices=(16, 32, 64),
                   help="blockwise normalization block size")
    q.add_argument("--int4-scale-group", type=int, default=128, metavar="N",
                   help="INT4 codebook scale-group width (0: one scale per group)")
    q.add_argument("--out", required=True, help="output container (.gvq); manifest goes to OUT.manifest.json")
    q.add_argument("--threads", type=_positive, default=os.cpu_count() or 1, help="worker threads")
    q.add_argument("--json", action="store_true", help="print the manifest (with timings) as JSON")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("decode", help="decode a container to a .t2d tensor", formatter_class=fmt)
    d.add_argument("container", help="input .gvq container")
    d.add_argument("--out", required=True, help="output tensor (.t2d)")
    d.add_argument("--strict", action="store_true", help="reject non-zero pad bits")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="SQNR, proxy loss and bpv of a container against W", formatter_class=fmt)
    e.add_argument("container", help="input .gvq container")
    e.add_argument("--weights", required=True, help="reference weights (.t2d)")
    _hessian_flags(e)
    e.add_argument("--strict", action="store_true", help="reject non-zero pad bits")
    e.add_argument("--json", action="store_true", help="print the report as JSON")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="uniform vs 1D/2D/4D codebooks at matched overhead", formatter_class=fmt)
    s.add_argument("--weights", default=None, help="weight matrix (.t2d)")
    s.add_argument("--synthetic", default=None, metavar="SPEC", help="generator spec ar1:RHO:ROWSxCOLS")
    _hessian_flags(s)
    s.add_argument("--seed", type=int, default=0, help="seed for --synthetic")
    s.add_argument("--index-bits", type=int, default=3, help="index bits per weight")
    s.add_argument("--target-overhead", type=float, default=0.25, help="codebook overhead in bits per weight")
    s.add_argument("--codebook-bits", type=int, default=8, choices=(32, 8), help="codebook storage bits")
    s.add_argument("--em-iters", type=int, default=100, help="EM iterations per codebook")
    s.add_argument("--seed-method", default="mahalanobis", choices=[m.value for m in SeedMethod],
                   help="codebook seeding")
    s.add_argument("--out", default="sweep.csv", help="CSV output path")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="time repeated decodes of a container", formatter_class=fmt)
    b.add_argument("container", help="input .gvq container")
    b.add_argument("--reps", type=int, default=10, help="number of full decodes")
    b.add_argument("--json", action="store_true", help="print the report as JSON")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("generate", help="write a synthetic .t2d tensor", formatter_class=fmt)
    g.add_argument("--synthetic", required=True, metavar="SPEC", help="generator spec ar1:RHO:ROWSxCOLS")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--out", required=True, help="output tensor (.t2d)")
    g.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _blas_limit():
            return args.func(args)
    except NumericError as exc:
        print(f"gptvq: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, ValueError) as exc:
        print(f"gptvq: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GPTVQError as exc:
        print(f"gptvq: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

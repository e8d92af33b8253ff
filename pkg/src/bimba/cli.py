"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or input error. Diagnostics
go to stderr; data goes to stdout or the files named by flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

import numpy as np

from . import harness
from .core import TensorFormatError, make_rng, read_tensor, write_tensor
from .selector import (SelectorConfig, compression_summary, init_selector_params,
                       select_tokens, synthetic_question)
from .ssm import init_ssm_params, scan_chunked, scan_sequential

log = logging.getLogger("bimba")

SCAN_TOL = 1e-10
GRAD_TOL = 1e-5
PRECISIONS = {"f64": np.float64, "f32": np.float32}


class CheckFailed(Exception):
    pass


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _selector_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layout", choices=["append", "interleave"], default="interleave")
    p.add_argument("--direction", choices=["uni", "bi"], default="bi")
    p.add_argument("--tf", type=_positive, default=4, help="temporal compression factor")
    p.add_argument("--sf", type=_positive, default=2, help="spatial compression factor")
    p.add_argument("--question", action="store_true",
                   help="condition on a seeded synthetic question")
    p.add_argument("--state-size", type=_positive, default=8)
    p.add_argument("--depth", type=_positive, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bimba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("scan-check", help="chunked scan vs sequential oracle")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--instances", type=_positive, default=100)
    p.add_argument("--csv")

    p = sub.add_parser("grad-check", help="scan VJP vs central differences")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--instances", type=_positive, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--csv")

    p = sub.add_parser("bench", help="scaling benchmark")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--methods", default="selector,pool,perceiver,attention")
    p.add_argument("--tokens", default="4096,8192,16384",
                   help="comma-separated video-token counts")
    p.add_argument("--repeats", type=_positive, default=5)
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="f64")
    p.add_argument("--budget-bytes", type=int)
    p.add_argument("--threads", type=_positive, default=1)
    p.add_argument("--csv")

    p = sub.add_parser("needle", help="needle retention with a ridge probe")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--seeds", type=_positive, default=5, help="number of consecutive seeds")
    p.add_argument("--methods", default="pool,append-uni,interleave-bi")
    p.add_argument("--samples", type=_positive, default=harness.NeedleDefaults.n_samples)
    p.add_argument("--csv")

    p = sub.add_parser("compress", help="run the selector on a tensor file")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="f64")
    _selector_flags(p)

    p = sub.add_parser("info", help="print configuration and shape arithmetic")
    p.add_argument("--shape", default="64,40,40", help="T,h,w of the input grid")
    p.add_argument("--tf", type=_positive, default=4)
    p.add_argument("--sf", type=_positive, default=2)
    p.add_argument("--budget-bytes", type=int)
    return parser


# --------------------------------------------------------------------------


def cmd_scan_check(args) -> int:
    rng = make_rng(args.seed)
    rows, worst = [], 0.0
    for i in range(args.instances):
        L = int(rng.integers(1, 257))
        d = int(rng.integers(1, 9))
        ns = int(rng.integers(1, 17))
        p = init_ssm_params(d, ns, rng)
        x = rng.standard_normal((L, d))
        ref = scan_sequential(x, p)
        scale = max(float(np.abs(ref).max()), np.finfo(float).tiny)
        for chunk in sorted({1, 3, 7, 32, L}):
            dev = float(np.abs(scan_chunked(x, p, chunk) - ref).max()) / scale
            worst = max(worst, dev)
            rows.append((i, L, d, ns, chunk, dev))
    if args.csv:
        harness.write_csv(args.csv, ("instance", "length", "d", "state_size", "chunk", "rel_dev"), rows)
    print(f"max_rel_deviation={worst!r}")
    print(f"instances={args.instances} tolerance={SCAN_TOL!r}")
    if worst > SCAN_TOL:
        raise CheckFailed(f"scan deviation {worst:.3e} exceeds {SCAN_TOL:.0e}")
    return 0


def cmd_grad_check(args) -> int:
    rng = make_rng(args.seed)
    rows, worst = [], 0.0
    for i in range(args.instances):
        L = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        ns = int(rng.integers(1, 4))
        pt = harness.random_scan_point(rng, L, d, ns)
        err = harness.fd_check("scan", pt, args.step, seed=args.seed + i)
        worst = max(worst, err)
        rows.append((i, L, d, ns, err))
    if args.csv:
        harness.write_csv(args.csv, ("instance", "length", "d", "state_size", "rel_err"), rows)
    print(f"max_rel_error={worst!r}")
    print(f"instances={args.instances} step={args.step!r} tolerance={GRAD_TOL!r}")
    if worst > GRAD_TOL:
        raise CheckFailed(f"gradient error {worst:.3e} exceeds {GRAD_TOL:.0e}")
    return 0


def emit_summary(records: Sequence[harness.BenchmarkRecord], csv_path=None) -> str:
    """Text table sorted by (method, tokens); optionally also written as CSV."""
    if not records:
        raise ValueError("no records to summarise")
    ordered = sorted(records, key=lambda r: (r.method, r.tokens))
    if csv_path is not None:
        harness.write_bench_csv(csv_path, ordered)
    lines = [f"{'method':<10} {'tokens':>8} {'median_s':>11} {'peak_bytes':>13} status"]
    for r in ordered:
        t = "-" if r.status != "ok" else f"{r.median_seconds:.5f}"
        lines.append(f"{r.method:<10} {r.tokens:>8} {t:>11} {r.peak_bytes:>13} {r.status}")
    return "\n".join(lines)


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    tokens = [int(t) for t in args.tokens.split(",")]
    cfg = harness.BenchConfig(repeats=args.repeats, dtype=np.dtype(PRECISIONS[args.precision]).name,
                              budget_bytes=args.budget_bytes, threads=args.threads)
    records = harness.bench_scaling(methods, tokens, make_rng(args.seed), cfg)
    print(emit_summary(records, args.csv))
    if "perceiver" in methods:
        print("note: perceiver baseline is a single cross-attention layer "
              f"with {cfg.num_latents} latents", file=sys.stderr)
    return 0


_NEEDLE_METHODS = {
    "append-uni": ("append", "uni"),
    "append-bi": ("append", "bi"),
    "interleave-uni": ("interleave", "uni"),
    "interleave-bi": ("interleave", "bi"),
}


def cmd_needle(args) -> int:
    cfg = harness.NeedleDefaults(n_samples=args.samples)
    methods = []
    for name in (m.strip() for m in args.methods.split(",") if m.strip()):
        if name in _NEEDLE_METHODS:
            methods.append(cfg.selector(*_NEEDLE_METHODS[name]))
        elif name in harness.BASELINE_METHODS:
            methods.append(name)
        else:
            raise ValueError(f"unknown needle method {name!r}")
    seeds = [args.seed + i for i in range(args.seeds)]
    results = harness.needle_experiment(methods, seeds, cfg)
    if args.csv:
        harness.write_needle_csv(args.csv, results)
    for m in methods:
        rs = [r for r in results if r.method == harness.method_name(m)]
        per_pos = np.mean([r.per_position for r in rs], axis=0)
        print(f"{rs[0].method:<22} mean_acc={np.mean([r.accuracy for r in rs]):.4f} "
              f"spread={per_pos.max() - per_pos.min():.4f}")
    return 0


def cmd_compress(args) -> int:
    dtype = PRECISIONS[args.precision]
    Z = read_tensor(args.input)
    if Z.data.dtype != dtype:
        Z = type(Z)(Z.data.astype(dtype))
    cfg = SelectorConfig(args.tf, args.sf, args.layout, args.direction, args.question,
                         args.state_size, args.depth, args.seed)
    rng = make_rng(args.seed)
    params = init_selector_params(Z.d, cfg, rng=rng)
    X = synthetic_question(rng, 8, Z.d) if args.question else None
    Q = select_tokens(Z, X, cfg, params)
    write_tensor(Q, args.out)
    print(f"in={Z.shape} out={Q.shape} tokens {Z.num_tokens} -> {Q.num_tokens}")
    return 0


def cmd_info(args) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) < 3:
        raise ValueError("--shape needs T,h,w")
    s = compression_summary(shape, args.tf, args.sf)
    print(f"input  {'x'.join(map(str, s['input_shape']))} = {s['input_tokens']} tokens")
    print(f"output {'x'.join(map(str, s['output_shape']))} = {s['output_tokens']} tokens")
    print(f"compression {s['ratio']:g}x")
    L_prime = s["input_tokens"] + s["output_tokens"]
    print(f"combined sequence L' = {L_prime}")
    print(f"attention score buffer (f64) = {L_prime * L_prime * 8} bytes")
    if args.budget_bytes:
        print(f"capacity threshold for budget {args.budget_bytes}: "
              f"L' = {harness.capacity_threshold(args.budget_bytes)}")
    return 0


COMMANDS = {
    "scan-check": cmd_scan_check,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
    "needle": cmd_needle,
    "compress": cmd_compress,
    "info": cmd_info,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TensorFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line surface: encode, decode, stats, allocate, spectra, verify,
and the toy-experiment drivers perturb and alpha-sweep.

All machine-readable output goes to files; stdout carries one-line
human-readable summaries. Exit codes: 0 success, 1 validation failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .allocator import AllocationConfig, allocate
from .codec import EreConfig, decode, encode, read_ere, size_report, verify, write_ere
from .spectral import build_profile, effective_rank, mp_singular_quantiles
from .tensor_archive import ArchiveError, read_archive, write_archive

DEFAULT_SIGMAS = "0.05,0.1,0.2,0.5"
DEFAULT_ALPHAS = "0,0.25,0.5,0.75,1"


def _alpha(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"alpha must be in [0, 1], got {text}")
    return value


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from exc


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("ERE_THREADS", "")
    return int(env) if env.isdigit() and int(env) > 0 else 1


def _require_files(*paths: str) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise ArchiveError(f"no such file: {p}")


def _write_csv(path: str | Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def cmd_encode(args) -> int:
    _require_files(args.base, args.finetuned)
    base = read_archive(args.base)
    finetuned = read_archive(args.finetuned)
    config = EreConfig(prior_rank=args.rank, bits=args.bits, alpha=args.alpha,
                       exclude=tuple(args.exclude or ()))
    archive = encode(base, finetuned, config, threads=_threads(args))
    nbytes = write_ere(archive, args.out)
    kinds = [e.kind for e in archive.layers.values()]
    report = size_report(archive)
    print(f"encoded {len(kinds)} layers ({kinds.count('lowrank')} lowrank, "
          f"{kinds.count('raw')} raw, {kinds.count('zero')} zero) -> {args.out} "
          f"({nbytes} bytes, {100 * report.ratio_vs_full:.2f}% of fp32 weights)")
    return 0


def cmd_decode(args) -> int:
    _require_files(args.base, args.ere)
    base = read_archive(args.base)
    restored = decode(base, read_ere(args.ere), threads=_threads(args))
    nbytes = write_archive(restored, args.out)
    print(f"decoded {len(restored)} tensors -> {args.out} ({nbytes} bytes)")
    return 0


def cmd_stats(args) -> int:
    _require_files(args.ere)
    report = size_report(read_ere(args.ere))
    print(f"{'layer':40s} {'kind':8s} {'rank':>5s} {'payload':>12s} {'fp32':>12s}")
    for row in report.layers:
        print(f"{row.name:40s} {row.kind:8s} {row.rank:5d} "
              f"{row.payload_bytes:12d} {row.fp32_bytes:12d}")
    print(f"total: payload {report.payload_bytes} + header {report.header_bytes} "
          f"+ magic 12 = {report.file_bytes} bytes "
          f"({100 * report.ratio_vs_full:.2f}% of fp32 weights, "
          f"{100 * report.ratio_vs_residual:.2f}% of fp32 residual)")
    if args.csv:
        _write_csv(args.csv,
                   ["layer", "kind", "rank", "code_bytes", "scale_bytes", "d_bytes",
                    "raw_bytes", "payload_bytes", "header_share", "fp32_bytes"],
                   [{"layer": r.name, "kind": r.kind, "rank": r.rank,
                     "code_bytes": r.code_bytes, "scale_bytes": r.scale_bytes,
                     "d_bytes": r.d_bytes, "raw_bytes": r.raw_bytes,
                     "payload_bytes": r.payload_bytes, "header_share": r.header_share,
                     "fp32_bytes": r.fp32_bytes} for r in report.layers])
        print(f"per-layer CSV -> {args.csv}")
    return 0


def _residual_profiles(base, finetuned, min_dim: int = 8):
    from .codec import compute_residual
    residuals, _ = compute_residual(base, finetuned)
    profiles = []
    for name, delta in residuals.items():
        if delta.ndim == 2 and min(delta.shape) >= min_dim and delta.any():
            profiles.append(build_profile(delta, name))
    return profiles


def cmd_allocate(args) -> int:
    _require_files(args.base, args.finetuned)
    base = read_archive(args.base)
    finetuned = read_archive(args.finetuned)
    profiles = _residual_profiles(base, finetuned)
    if not profiles:
        raise ArchiveError("no eligible 2-D layers with nonzero residual")
    plan = allocate(profiles, AllocationConfig(prior_rank=args.rank, alpha=args.alpha))
    by_name = {p.layer_name: p for p in profiles}
    rows = []
    for name in sorted(plan.ranks):
        p = by_name[name]
        rows.append({"layer": name, "n": p.n, "m": p.m,
                     "continuous_rank": f"{plan.continuous_ranks[name]:.6f}",
                     "rank": plan.ranks[name],
                     "param_cost": plan.ranks[name] * p.cost_per_rank,
                     "tail_energy_at_rank": f"{p.tail_at(plan.ranks[name]):.6e}"})
    _write_csv(args.out,
               ["layer", "n", "m", "continuous_rank", "rank", "param_cost",
                "tail_energy_at_rank"], rows)
    lam = "none" if plan.lambda_star is None else f"{plan.lambda_star:.6e}"
    print(f"allocated {len(rows)} layers, budget {plan.budget}, lambda {lam}, "
          f"total tail energy {plan.objective_estimate:.6e} -> {args.out}")
    return 0


def cmd_spectra(args) -> int:
    _require_files(args.base, args.finetuned)
    base = read_archive(args.base)
    finetuned = read_archive(args.finetuned)
    from .codec import compute_residual
    residuals, _ = compute_residual(base, finetuned)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec_rows, erank_rows = [], []
    for name, delta in residuals.items():
        if delta.ndim != 2 or not delta.any() or not base[name].any():
            continue
        res_profile = build_profile(delta, name)
        base_profile = build_profile(base[name], name)
        er = effective_rank(res_profile.sigma)
        eb = effective_rank(base_profile.sigma)
        n, m = delta.shape
        ratio = min(n, m) / max(n, m)
        k = res_profile.min_dim
        quantiles = 1.0 - (np.arange(k) + 0.5) / k
        mp_ref = mp_singular_quantiles(ratio, quantiles) / (1.0 + math.sqrt(ratio))
        top = res_profile.sigma[0]
        for i in range(k):
            spec_rows.append({"layer": name, "index": i,
                              "sigma_normalized": f"{res_profile.sigma[i] / top:.8e}",
                              "erank": f"{er:.6f}",
                              "erank_ratio": f"{er / eb:.6f}",
                              "mp_reference": f"{mp_ref[i]:.8e}"})
        erank_rows.append({"layer": name, "n": n, "m": m,
                           "erank_residual": f"{er:.6f}", "erank_base": f"{eb:.6f}",
                           "erank_ratio": f"{er / eb:.6f}"})
    _write_csv(out_dir / "spectra.csv",
               ["layer", "index", "sigma_normalized", "erank", "erank_ratio",
                "mp_reference"], spec_rows)
    _write_csv(out_dir / "erank.csv",
               ["layer", "n", "m", "erank_residual", "erank_base", "erank_ratio"],
               erank_rows)
    print(f"wrote {len(spec_rows)} spectrum rows for {len(erank_rows)} layers -> {out_dir}")
    return 0


def cmd_verify(args) -> int:
    _require_files(args.base, args.finetuned, args.ere)
    base = read_archive(args.base)
    finetuned = read_archive(args.finetuned)
    report = verify(base, finetuned, args.ere, tol=args.tol)
    for check in report.layers:
        status = "ok" if check.passed else "FAIL"
        print(f"{check.name:40s} {check.kind:8s} rel_err {check.rel_frobenius:.3e} "
              f"cosine {check.cosine:+.6f} {status}")
    print(f"checksum {'ok' if report.checksum_ok else 'FAIL'}; "
          f"budget {'ok' if report.budget_ok else 'FAIL'}; "
          f"max rel err {report.max_rel_error:.3e}; "
          f"mean cosine {report.mean_cosine:.6f}"
          + (f"; {report.message}" if report.message else ""))
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_perturb(args) -> int:
    seeds = list(range(args.seeds))
    if args.kind == "noise":
        rows = analysis.run_noise_experiment(seeds, args.sigmas)
        records = [{"seed": s, "sigma": sig, "mode": mode, "feature_cosine": f"{c:.8f}"}
                   for s, sig, mode, c in rows]
        _write_csv(args.out, ["seed", "sigma", "mode", "feature_cosine"], records)
    else:
        rows = analysis.run_lowrank_experiment(seeds, args.keep_fractions)
        records = [{"seed": s, "keep_fraction": kf, "mode": mode,
                    "feature_cosine": f"{c:.8f}"}
                   for s, kf, mode, c in rows]
        _write_csv(args.out, ["seed", "keep_fraction", "mode", "feature_cosine"], records)
    print(f"{args.kind} experiment: {len(records)} rows over {args.seeds} seeds -> {args.out}")
    return 0


def cmd_alpha_sweep(args) -> int:
    theta, theta_prime = analysis.train_toy_pair(args.seed)
    rows = analysis.alpha_sweep(theta, theta_prime, args.rank, args.alphas, bits=args.bits)
    _write_csv(args.out, ["alpha", "feature_cosine"],
               [{"alpha": a, "feature_cosine": f"{c:.8f}"} for a, c in rows])
    print(f"alpha sweep over {len(rows)} values at rank {args.rank}, "
          f"bits {args.bits} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ere",
        description="Compress fine-tuned checkpoints as low-rank residual archives.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a base/fine-tuned pair into an archive")
    p.add_argument("--base", required=True, help="base weights (TSA1 file)")
    p.add_argument("--finetuned", required=True, help="fine-tuned weights (TSA1 file)")
    p.add_argument("--rank", required=True, type=int,
                   help="prior rank fixing the parameter budget")
    p.add_argument("--bits", type=int, choices=(2, 4, 8), default=4,
                   help="factor quantization bit width (default 4)")
    p.add_argument("--alpha", type=_alpha, default=0.5,
                   help="mix toward the uniform prior rank, in [0, 1] (default 0.5)")
    p.add_argument("--exclude", action="append", default=[], metavar="GLOB",
                   help="store matching tensors raw (repeatable)")
    p.add_argument("--threads", type=int, default=None,
                   help="layer-level parallelism (default: $ERE_THREADS or 1)")
    p.add_argument("--out", required=True, help="output archive (ERE1 file)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct fine-tuned weights from base + archive")
    p.add_argument("--base", required=True, help="base weights (TSA1 file)")
    p.add_argument("--ere", required=True, help="residual archive (ERE1 file)")
    p.add_argument("--threads", type=int, default=None,
                   help="layer-level parallelism (default: $ERE_THREADS or 1)")
    p.add_argument("--out", required=True, help="output weights (TSA1 file)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stats", help="size accounting for an archive")
    p.add_argument("--ere", required=True, help="residual archive (ERE1 file)")
    p.add_argument("--csv", default=None, help="also write per-layer rows as CSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("allocate", help="solve the rank allocation and write the plan")
    p.add_argument("--base", required=True, help="base weights (TSA1 file)")
    p.add_argument("--finetuned", required=True, help="fine-tuned weights (TSA1 file)")
    p.add_argument("--rank", required=True, type=int,
                   help="prior rank fixing the parameter budget")
    p.add_argument("--alpha", type=_alpha, default=0.5,
                   help="mix toward the uniform prior rank, in [0, 1] (default 0.5)")
    p.add_argument("--out", required=True, help="output plan (CSV file)")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("spectra", help="residual spectrum CSVs with reference quantiles")
    p.add_argument("--base", required=True, help="base weights (TSA1 file)")
    p.add_argument("--finetuned", required=True, help="fine-tuned weights (TSA1 file)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("verify", help="check an archive against the original pair")
    p.add_argument("--base", required=True, help="base weights (TSA1 file)")
    p.add_argument("--finetuned", required=True, help="fine-tuned weights (TSA1 file)")
    p.add_argument("--ere", required=True, help="residual archive (ERE1 file)")
    p.add_argument("--tol", type=float, default=1e-2,
                   help="max per-layer relative reconstruction error (default 1e-2)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("perturb", help="toy robustness experiment (noise or rank reduction)")
    p.add_argument("--kind", choices=("noise", "lowrank"), default="noise",
                   help="perturbation family (default noise)")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (default 10)")
    p.add_argument("--sigmas", type=_float_list, default=_float_list(DEFAULT_SIGMAS),
                   help=f"noise levels, comma-separated (default {DEFAULT_SIGMAS})")
    p.add_argument("--keep-fractions", type=_float_list, default=[0.8],
                   help="rank fractions kept, comma-separated (default 0.8)")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("alpha-sweep", help="codec quality across the prior-mixing grid")
    p.add_argument("--alphas", type=_float_list, default=_float_list(DEFAULT_ALPHAS),
                   help=f"alpha grid, comma-separated (default {DEFAULT_ALPHAS})")
    p.add_argument("--rank", type=int, default=8, help="prior rank (default 8)")
    p.add_argument("--bits", type=int, choices=(2, 4, 8), default=4,
                   help="factor quantization bit width (default 4)")
    p.add_argument("--seed", type=int, default=0, help="toy training seed (default 0)")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_alpha_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArchiveError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

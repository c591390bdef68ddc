"""``magr`` command line: synth, analyze, preprocess, quantize.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, DataError
from .magr import DEFAULT_ALPHA_CHANNEL, DEFAULT_ALPHA_GROUP, DEFAULT_ITERS, MagRConfig, magr_preprocess
from .pipeline import (
    load_manifest,
    run_pipeline,
    synth_chain,
    synth_layer,
    write_manifest,
)
from .quant import Method, QuantConfig, default_beta, save_quantized
from .tensor import as_matrix, fraction_rank, write_tensor

log = logging.getLogger("magr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 2, 3, 4

DEFAULTS = {
    "alpha_channel": DEFAULT_ALPHA_CHANNEL,
    "alpha_group": DEFAULT_ALPHA_GROUP,
    "iters": DEFAULT_ITERS,
    "cd_iters": 30,
    "damp": 0.01,
    "bits": 4,
    "group": 0,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _workers(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MAGR_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MAGR_WORKERS must be an integer, got {env!r}") from None
    return 1


def _add_magr_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=None,
                   help="l-inf penalty (default 1e-3 per-channel, 1e-4 grouped)")
    p.add_argument("--iters", type=int, default=DEFAULTS["iters"], help="MagR iterations K")
    p.add_argument("--group", type=int, default=DEFAULTS["group"],
                   help="group size along each channel; 0 = per-channel")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="magr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic layers and a manifest")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--m", type=int, default=64, help="rows of each weight matrix (input dim)")
    p.add_argument("--n", type=int, default=32, help="columns (output channels)")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--frac-rank", type=float, default=0.25)
    p.add_argument("--outlier-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chain", action="store_true",
                   help="chain-compatible layers (first m x n, then n x n)")
    p.add_argument("--out-dir", default="synth")

    p = sub.add_parser("analyze", help="fraction-rank statistics of the manifest's features")
    p.add_argument("--manifest", default="manifest.txt")
    p.add_argument("--threshold", type=float, default=0.01)

    p = sub.add_parser("preprocess", help="run MagR only and write the processed weights")
    p.add_argument("--manifest", default="manifest.txt")
    p.add_argument("--out-dir", default="magr_out")
    _add_magr_flags(p)

    p = sub.add_parser("quantize", help="MagR (optional) + quantization + report")
    p.add_argument("--manifest", default="manifest.txt")
    p.add_argument("--out-dir", default="magr_out")
    _add_magr_flags(p)
    p.add_argument("--magr", choices=("on", "off"), default="on")
    p.add_argument("--bits", type=int, default=DEFAULTS["bits"], choices=(2, 3, 4, 8))
    p.add_argument("--beta", type=float, default=None,
                   help="step shrink (default by bits: 4->1.0, 3->0.9, 2->0.8; grouped 2/3->0.95)")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.RTN.value)
    p.add_argument("--cd-iters", type=int, default=DEFAULTS["cd_iters"])
    p.add_argument("--damp", type=float, default=DEFAULTS["damp"])
    p.add_argument("--propagate", action="store_true",
                   help="treat the manifest as a linear chain and propagate features")
    p.add_argument("--workers", type=int, default=None, help="defaults to $MAGR_WORKERS or 1")
    p.add_argument("--timings", action="store_true",
                   help="write wall-clock seconds to report.csv (otherwise 0)")
    return parser


def _magr_config(args) -> MagRConfig:
    group = args.group or None
    alpha = args.alpha
    if alpha is None:
        alpha = DEFAULTS["alpha_group"] if group else DEFAULTS["alpha_channel"]
    return MagRConfig(alpha=alpha, max_iter=args.iters, group_size=group)


def cmd_synth(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.chain:
        records = synth_chain(
            args.layers, args.m, args.n, args.samples, args.frac_rank, args.outlier_rate, args.seed
        )
    else:
        records = [
            synth_layer(args.m, args.n, args.samples, args.frac_rank, args.outlier_rate,
                        args.seed + i, name=f"layer{i}")
            for i in range(args.layers)
        ]
    rows = []
    for rec in records:
        w = f"{rec.name}.w.magr"
        x = f"{rec.name}.x.magr"
        write_tensor(os.path.join(args.out_dir, w), rec.W_hat)
        write_tensor(os.path.join(args.out_dir, x), rec.features)
        rows.append((rec.name, w, "x", x))
    write_manifest(os.path.join(args.out_dir, "manifest.txt"), rows)
    print(f"wrote {len(records)} layers to {os.path.join(args.out_dir, 'manifest.txt')}")
    return EXIT_OK


def fraction_rank_stats(values: list[float]) -> dict[str, float]:
    pct = 100.0 * np.asarray(values, dtype=np.float64)
    return {
        "Min": float(pct.min()),
        "Max": float(pct.max()),
        "Mean": float(pct.mean()),
        "25% Percentile": float(np.percentile(pct, 25)),
        "75% Percentile": float(np.percentile(pct, 75)),
    }


def cmd_analyze(args) -> int:
    records = load_manifest(args.manifest)
    values = []
    for rec in records:
        if rec.features is None:
            log.warning("%s: no feature matrix, skipped", rec.name)
            continue
        fr = fraction_rank(rec.features, args.threshold)
        values.append(fr)
        print(f"{rec.name}\t{100 * fr:.2f}")
    if not values:
        raise DataError("no layer in the manifest has a feature matrix")
    stats = fraction_rank_stats(values)
    print("\t".join(stats))
    print("\t".join(f"{v:.2f}" for v in stats.values()))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _magr_config(args)
    records = load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    lines = ["layer,alpha,maxmag_before,maxmag_after,drift,objective_first,objective_last"]
    for rec in records:
        W, report = magr_preprocess(rec.W_hat, rec.hessian_matrix(), cfg)
        w = f"{rec.name}.w.magr"
        write_tensor(os.path.join(args.out_dir, w), W)
        if rec.features is not None:
            other, kind = f"{rec.name}.x.magr", "x"
            write_tensor(os.path.join(args.out_dir, other), rec.features)
        else:
            other, kind = f"{rec.name}.h.magr", "h"
            write_tensor(os.path.join(args.out_dir, other), rec.hessian)
        rows.append((rec.name, w, kind, other))
        lines.append(
            f"{rec.name},{cfg.alpha!r},{float(np.mean(report.max_mag_before))!r},"
            f"{float(np.mean(report.max_mag_after))!r},{report.output_drift!r},"
            f"{report.objective_trace[0]!r},{report.objective_trace[-1]!r}"
        )
    write_manifest(os.path.join(args.out_dir, "manifest.txt"), rows)
    with open(os.path.join(args.out_dir, "magr_report.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"preprocessed {len(records)} layers into {args.out_dir}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    magr = _magr_config(args) if args.magr == "on" else None
    beta = args.beta if args.beta is not None else default_beta(args.bits, args.group)
    quant = QuantConfig(
        bits=args.bits,
        group_size=args.group,
        beta=beta,
        method=args.method,
        cd_iters=args.cd_iters,
        optq_damp=args.damp,
    )
    records = load_manifest(args.manifest)
    layers, report = run_pipeline(
        records, magr, quant, propagate=args.propagate, workers=_workers(args.workers)
    )
    os.makedirs(args.out_dir, exist_ok=True)
    for rec, layer in zip(records, layers):
        save_quantized(layer, args.out_dir, rec.name)
    report.write_csv(os.path.join(args.out_dir, "report.csv"), timings=args.timings)
    with open(os.path.join(args.out_dir, "maxmag.csv"), "w") as f:
        f.write(report.maxmag_table())
    summary = report.summary()
    with open(os.path.join(args.out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    sys.stdout.write(summary)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "preprocess": cmd_preprocess,
    "quantize": cmd_quantize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"magr: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"magr: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"magr: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

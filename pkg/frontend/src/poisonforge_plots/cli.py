"""poisonforge-plot: render a figure from a poisonforge CSV.

Exit codes: 0 success, 1 runtime failure, 2 bad input or schema mismatch.
"""

import argparse
import sys

from .render import plot_curves, plot_histograms, plot_synthetic_map
from .schema import SchemaError

CURVES = ("error", "lambda", "norm", "fpr", "fnr")


def build_parser():
    p = argparse.ArgumentParser(prog="poisonforge-plot")
    p.add_argument("--kind", required=True,
                   choices=CURVES + ("synthetic", "hist"))
    p.add_argument("--in", dest="input", required=True, help="input CSV")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--points", default=None,
                   help="points CSV overlay (synthetic only)")
    p.add_argument("--boundaries", default=None,
                   help="boundaries CSV overlay (synthetic only)")
    p.add_argument("--label", default="validation error",
                   help="colorbar label (synthetic only)")
    return p


def cli_main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.kind in CURVES:
            plot_curves(args.input, args.kind, args.out)
        elif args.kind == "synthetic":
            plot_synthetic_map(args.input, args.out, points_csv=args.points,
                               boundaries_csv=args.boundaries,
                               label=args.label)
        else:
            plot_histograms(args.input, args.out)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


def main():
    sys.exit(cli_main())

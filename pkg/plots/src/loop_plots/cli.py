"""CLI for the figure renderer.

    loop-plots render --input metrics.csv --output curves.png \
        --kind reward_curves [--smooth N]

Exit codes: 0 success, 2 bad arguments or CSV schema problems, 3 I/O.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import PlotError, PlotSpec, render


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loop-plots",
                                     description="Render experiment figures")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure from a CSV")
    p.add_argument("--input", required=True, metavar="CSV")
    p.add_argument("--output", required=True, metavar="IMAGE")
    p.add_argument("--kind", required=True,
                   choices=("reward_curves", "variance_scaling"))
    p.add_argument("--smooth", type=int, default=1, metavar="N",
                   help="trailing moving-average window (default 1 = none)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv if argv is not None else sys.argv[1:])
    try:
        spec = PlotSpec(
            input_csv=Path(args.input),
            output_image=Path(args.output),
            kind=args.kind,
            smoothing_window=args.smooth,
        )
        result = render(spec)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {result.output_image} ({len(result.labels)} series, "
          f"{result.rows_read} rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())

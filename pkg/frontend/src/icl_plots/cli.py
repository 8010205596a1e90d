"""Command line: expand report globs into a figure grid and render it."""

from __future__ import annotations

import argparse
import glob
import math
import os
import sys

from .figures import FigureSpec, render_curves
from .reports import SchemaError


def _parse_layout(text: str | None, n_reports: int) -> tuple[int, int]:
    if text is None:
        cols = min(3, n_reports)
        return math.ceil(n_reports / cols), cols
    try:
        rows_s, _, cols_s = text.lower().partition("x")
        rows, cols = int(rows_s), int(cols_s)
    except ValueError:
        raise ValueError(f"--layout wants ROWSxCOLS, got '{text}'") from None
    return rows, cols


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="icl-lab-plots", description="Render MSE-vs-context figures from reports."
    )
    p.add_argument("reports", nargs="+", help="report files or globs (.csv/.json)")
    p.add_argument("--layout", help="panel grid ROWSxCOLS (default: up to 3 columns)")
    p.add_argument("--logy", action="store_true", help="log-scale MSE axis")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--name", default="figure", help="output file stem")
    p.add_argument(
        "--baselines",
        default="zero,least_squares",
        help="comma list from: zero,least_squares,knn3,averaging (empty for none)",
    )
    p.add_argument("--title", action="append", default=None,
                   help="per-panel title, repeatable (default: report metadata)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    paths: list[str] = []
    for pattern in args.reports:
        matches = sorted(glob.glob(pattern))
        if not matches and not os.path.exists(pattern):
            print(f"error: no reports match '{pattern}'", file=sys.stderr)
            return 2
        paths.extend(matches or [pattern])
    try:
        rows, cols = _parse_layout(args.layout, len(paths))
        baselines = tuple(b for b in args.baselines.split(",") if b)
        spec = FigureSpec(
            report_paths=tuple(paths),
            rows=rows,
            cols=cols,
            titles=tuple(args.title) if args.title else None,
            logy=args.logy,
            baselines=baselines,
            name=args.name,
        )
        os.makedirs(args.out_dir, exist_ok=True)
        for path in render_curves(spec, args.out_dir):
            print(f"wrote {path}")
        return 0
    except (SchemaError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or file-format error,
3 numerical failure.  All commands are deterministic for fixed inputs;
--workers only sets how many reconstruction chunks may be prepared
concurrently and never changes output bytes.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline, solver, synth
from .errors import FormatError, NumericsError, UsageError


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; route through UsageError for exit 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_disk_flags(p):
    p.add_argument("--disk-center", metavar="KC,LC",
                   help="override the estimated disk center (row,col)")
    p.add_argument("--disk-radius", type=float,
                   help="override the estimated disk radius in pixels")


def _add_fit_flags(p):
    p.add_argument("dataset", help="input tensor (.s4dm)")
    p.add_argument("target", help="training image (.csv or .pgm)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--geometry", default="pixelated",
                   help="pixelated | mask:interior | mask:exterior | "
                        "segments:M | segments:RxS")
    _add_disk_flags(p)
    p.add_argument("--r", type=float, default=solver.ElasticNetConfig().r,
                   help="penalty mixing: 1 pure l1, 0 pure l2")
    p.add_argument("--tol", type=float, default=solver.ElasticNetConfig().tol)
    p.add_argument("--max-sweeps", type=int,
                   default=solver.ElasticNetConfig().max_sweeps)
    p.add_argument("--memory-budget", default="4G", metavar="BYTES",
                   help="design-matrix budget, e.g. 4G or 512M; larger "
                        "designs stream from disk (default 4G)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes; does not affect results")


def _parse_center(text):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"expected KC,LC, got {text!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError as e:
        raise UsageError(f"bad disk center {text!r}") from e


def _run_config(args, train_rows=None, train_fraction=None):
    return pipeline.RunConfig(
        dataset=args.dataset,
        target=args.target,
        out_dir=args.out,
        geometry=args.geometry,
        train_rows=train_rows,
        train_fraction=train_fraction,
        disk_center=_parse_center(args.disk_center),
        disk_radius=args.disk_radius,
        enet=solver.ElasticNetConfig(r=args.r, tol=args.tol,
                                     max_sweeps=args.max_sweeps),
        path=_path_config(args),
        memory_budget=pipeline.parse_bytes(args.memory_budget),
        workers=args.workers,
    )


def _path_config(args):
    explicit = getattr(args, "lambdas", None)
    if explicit:
        try:
            lams = tuple(float(t) for t in explicit.split(","))
        except ValueError as e:
            raise UsageError(f"bad lambda list {explicit!r}") from e
        return solver.PathConfig(explicit_lambdas=lams)
    return solver.PathConfig(
        n_lambda=getattr(args, "n_lambda", 100),
        lambda_min_ratio=getattr(args, "lambda_min_ratio", 1e-3))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stemfilter",
                     description="Detector-plane filters for 4D scanning "
                                 "diffraction data via elastic-net regression.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       description="Generate a synthetic 4D dataset with a "
                                   "planted linear filter, its ground-truth "
                                   "image, and training targets.")
    p.add_argument("items", nargs="*", metavar="KEY=VALUE",
                   help="spec items, e.g. scan.i=32 noise.snr_db=20")
    p.add_argument("--spec", help="file of KEY=VALUE lines ('#' comments)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single item (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pattern", action="append", default=[],
                   help=f"training target to render (repeatable); one of "
                        f"{pipeline._PATTERN_HELP} (default: lattice)")
    p.add_argument("--force", action="store_true",
                   help="allow datasets whose design exceeds the budget")
    p.add_argument("--memory-budget", default="4G", metavar="BYTES")

    p = sub.add_parser("fit", help="fit a filter at one penalty level")
    _add_fit_flags(p)
    p.add_argument("--lam", type=float, required=True, metavar="LAMBDA")
    p.add_argument("--region", metavar="I0:I1:J0:J1",
                   help="scan region to train on (default: full scan)")

    p = sub.add_parser("path", help="fit a penalty path with validation")
    _add_fit_flags(p)
    p.add_argument("--n-lambda", type=int, default=100, dest="n_lambda")
    p.add_argument("--lambda-min-ratio", type=float, default=1e-3,
                   dest="lambda_min_ratio")
    p.add_argument("--lambdas", metavar="L1,L2,...",
                   help="explicit descending grid, overrides --n-lambda")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--train-rows", type=int,
                       help="train on the top N scan rows")
    group.add_argument("--train-fraction", type=float,
                       help="train on the top fraction of rows (default 0.5)")

    p = sub.add_parser("reconstruct", help="apply a stored filter")
    p.add_argument("dataset")
    p.add_argument("filter", help="stored filter (.f4dm)")
    p.add_argument("--out", required=True,
                   help="output directory; writes recon.csv and recon.pgm")
    p.add_argument("--region", metavar="I0:I1:J0:J1")

    p = sub.add_parser("validate", help="score a stored filter on a target")
    p.add_argument("dataset")
    p.add_argument("filter")
    p.add_argument("target")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--train-rows", type=int)
    group.add_argument("--train-fraction", type=float)
    p.add_argument("--out", help="optional CSV of the two numbers")

    p = sub.add_parser("linetrace", help="normalized intensity profile")
    p.add_argument("image", help="image to trace (.csv or .pgm)")
    p.add_argument("--box", required=True, metavar="X0:Y0:X1:Y1",
                   help="axis-aligned trace line, x = column, y = row")
    p.add_argument("--width", type=int, default=3,
                   help="band width in pixels, odd (default 3)")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("fillcurve", help="extract the lambda/filling curve")
    p.add_argument("diagnostics", help="diagnostics.csv from fit or path")
    p.add_argument("--out", required=True, help="output CSV")

    return parser


def _parse_box(text):
    parts = text.split(":")
    if len(parts) != 4:
        raise UsageError(f"expected X0:Y0:X1:Y1, got {text!r}")
    try:
        return tuple(int(t) for t in parts)
    except ValueError as e:
        raise UsageError(f"bad box {text!r}") from e


def _dispatch(args) -> int:
    if args.command == "synth":
        items = {}
        if args.spec:
            items.update(synth.load_spec_file(args.spec))
        items.update(synth.parse_spec_items(args.items))
        for text in args.set:
            synth.set_spec_item(items, text)
        patterns = tuple(args.pattern) or ("lattice",)
        pipeline.run_synth(items, args.out, patterns, force=args.force,
                           budget=pipeline.parse_bytes(args.memory_budget))
        return 0

    if args.command == "fit":
        config = _run_config(args)
        region = pipeline.parse_region(args.region) if args.region else None
        result, _ = pipeline.run_fit(config, args.lam, region)
        print(f"lambda={result.lam:.6g} sweeps={result.sweeps_used} "
              f"filling_ratio={result.filling_ratio:.6g} "
              f"kkt={result.kkt_max_violation:.3g}")
        return 0

    if args.command == "path":
        config = _run_config(args, args.train_rows, args.train_fraction)
        _, report = pipeline.run_path(config)
        sel = report.selected
        print(f"{len(report.rows)} lambdas; selected lambda={sel.lam:.6g} "
              f"train_rmse={sel.train_rmse:.6g} test_rmse={sel.test_rmse:.6g} "
              f"filling_ratio={sel.filling_ratio:.6g}")
        return 0

    if args.command == "reconstruct":
        region = pipeline.parse_region(args.region) if args.region else None
        pipeline.run_reconstruct(args.dataset, args.filter, args.out, region)
        print(f"wrote recon.csv and recon.pgm to {args.out}")
        return 0

    if args.command == "validate":
        tr, te = pipeline.run_validate(args.dataset, args.filter, args.target,
                                       args.train_rows, args.train_fraction,
                                       args.out)
        print(f"train_rmse={tr:.17g} test_rmse={te:.17g}")
        return 0

    if args.command == "linetrace":
        pipeline.run_linetrace(args.image, _parse_box(args.box), args.width,
                               args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "fillcurve":
        pairs = pipeline.run_fillcurve(args.diagnostics, args.out)
        print(f"wrote {args.out} ({len(pairs)} rows)")
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

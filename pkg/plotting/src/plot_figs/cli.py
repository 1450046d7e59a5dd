"""Command-line entry point: ``plot_figs <figure-id> --in ... --out ...``."""
import argparse
import sys

from .figures import FIGURES, PlotDataError, render


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plot_figs",
        description="Render a figure from simulator CSV output.")
    parser.add_argument("figure", choices=sorted(FIGURES),
                        help="figure identifier")
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        metavar="CSV", help="input CSV file(s)")
    parser.add_argument("--out", required=True, metavar="PATH",
                        help="output image path (suffix picks the format)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        render(args.figure, args.inputs, args.out)
    except FileNotFoundError as err:
        print(f"error: {err.filename}: no such file", file=sys.stderr)
        return 1
    except PlotDataError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()

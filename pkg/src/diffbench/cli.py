"""Command-line entry point: ``gen``, ``check``, ``run`` and ``plot``.

Exit codes: 0 success, 1 a derivative failed its correctness check,
2 usage error (bad flags, missing files, empty input).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from diffbench import ba, datagen, gmm, harness, plotting
from diffbench.errors import UsageError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

ALL_ENGINES = ("manual", "forward", "reverse", "split", "fd")
OBJECTIVES = ("gmm", "ba", "ht")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _engines(text: str) -> list[str]:
    names = [e.strip() for e in text.split(",") if e.strip()]
    bad = [e for e in names if e not in ALL_ENGINES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown engine(s) {bad}; choose from {', '.join(ALL_ENGINES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffbench", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write random instances", allow_abbrev=False)
    g.add_argument("--objective", choices=OBJECTIVES)
    g.add_argument("--preset", choices=sorted(datagen.PRESETS), help="write every instance of a size grid")
    g.add_argument("--d", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--n", type=int, help="GMM data points or HT correspondences")
    g.add_argument("--m", type=float, default=0.0, help="Wishart prior parameter (GMM)")
    g.add_argument("--cams", type=int)
    g.add_argument("--pts", type=int)
    g.add_argument("--obs", type=int)
    g.add_argument("--size-class", choices=sorted(datagen.HT_CLASSES), default="small")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True, help="output directory")

    for name, helptext in (("check", "cross-check engines"), ("run", "check, time and write CSV")):
        c = sub.add_parser(name, help=helptext, allow_abbrev=False)
        c.add_argument("--objective", choices=OBJECTIVES, help="restrict to one objective")
        c.add_argument("--engines", type=_engines, default=list(ALL_ENGINES))
        c.add_argument("--size", choices=sorted(datagen.PRESETS), default="small", help="size grid preset")
        c.add_argument("--data", type=Path, help="read instances written by gen from this directory")
        c.add_argument("--seed", type=int, default=0)
        if name == "run":
            c.add_argument("--out", type=Path, required=True, help="CSV path (appended to)")
            c.add_argument("--time-limit", type=float, default=None,
                           help=f"seconds per single run (default ${harness.TIME_LIMIT_ENV} or 40000)")
            c.add_argument("--max-repeats", type=int, default=None, help="cap on timed repeats")
            c.add_argument("--budget", type=float, default=None, help="target seconds of timed runs per measurement")
            c.add_argument("--no-plot", action="store_true", help="skip the SVG figures next to the CSV")

    pl = sub.add_parser("plot", help="SVG figure from a results CSV", allow_abbrev=False)
    pl.add_argument("--in", dest="inp", type=Path, required=True)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--relative", action="store_true", help="plot derivative/objective time ratios")
    pl.add_argument("--objective", choices=OBJECTIVES)
    return p


def _gen(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    if args.preset:
        grid = datagen.PRESETS[args.preset]
        if args.objective:
            grid = _only(grid, args.objective)
        paths = datagen.write_grid(grid, args.out, args.seed)
    elif args.objective == "gmm":
        _need(args, "d", "k", "n")
        path = args.out / datagen.gmm_filename(args.d, args.k, args.n)
        gmm.write_gmm(datagen.gen_gmm(args.d, args.k, args.n, args.m, args.seed), path)
        paths = [path]
    elif args.objective == "ba":
        _need(args, "cams", "pts", "obs")
        path = args.out / datagen.ba_filename(args.cams, args.pts, args.obs)
        ba.write_ba(datagen.gen_ba(args.cams, args.pts, args.obs, args.seed), path)
        paths = [path]
    elif args.objective == "ht":
        n = args.n if args.n is not None else datagen.HT_CLASSES[args.size_class][1]
        paths = datagen.write_grid(datagen.SizeGrid(ht=(args.size_class, (n,))), args.out, args.seed)
    else:
        raise UsageError("gen needs --objective or --preset")
    for p in paths:
        print(p)
    return EXIT_OK


def _need(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"gen --objective {args.objective} needs {' '.join(missing)}")


def _only(grid: datagen.SizeGrid, objective: str) -> datagen.SizeGrid:
    return datagen.SizeGrid(**{objective: getattr(grid, objective)})


def _cases(args):
    grid = datagen.PRESETS[args.size]
    if args.objective:
        grid = _only(grid, args.objective)
    if args.data is not None and not args.data.is_dir():
        raise UsageError(f"data directory {args.data} not found")
    cases = harness.cases_for_grid(grid, args.seed, args.data)
    if not cases:
        raise UsageError(f"preset {args.size} has no {args.objective or ''} instances")
    return cases


def _check(args) -> int:
    failed = False
    for case in _cases(args):
        try:
            errs = harness.check_case(case, args.engines)
        except FileNotFoundError as e:
            raise UsageError(str(e)) from e
        for engine, err in errs.items():
            ok = err <= harness.CHECK_TOL
            failed |= not ok
            shown = "raised" if math.isinf(err) else f"{err:.3g}"
            print(f"{case.objective} {case.size_label} {engine}: rel_err={shown} {'ok' if ok else 'FAIL'}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def _run(args) -> int:
    args.out.parent.mkdir(parents=True, exist_ok=True)
    try:
        records = harness.run_suite(
            _cases(args),
            args.engines,
            args.out,
            limit_s=args.time_limit,
            max_repeats=args.max_repeats,
            budget_s=args.budget,
        )
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    for r in records:
        rel = "" if r.rel is None else f"{r.rel:.3g}"
        print(f"{r.objective} {r.size_label} {r.engine}: {r.status} rel={rel}")
    if not args.no_plot:
        for objective in sorted({r.objective for r in records}):
            recs = [r for r in records if r.objective == objective]
            if not any(r.status == "ok" for r in recs):
                continue
            for relative, tag in ((True, "relative"), (False, "absolute")):
                out = args.out.with_name(f"{args.out.stem}_{objective}_{tag}.svg")
                plotting.emit_plot(recs, out, relative=relative, title=f"{objective} {tag} runtimes")
                print(out)
    return EXIT_CHECK_FAILED if any(r.status == "failed" for r in records) else EXIT_OK


def _plot(args) -> int:
    if not args.inp.is_file():
        raise UsageError(f"{args.inp} not found")
    records = harness.read_csv(args.inp)
    if args.objective:
        records = [r for r in records if r.objective == args.objective]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    plotting.emit_plot(records, args.out, relative=args.relative)
    print(args.out)
    return EXIT_OK


COMMANDS = {"gen": _gen, "check": _check, "run": _run, "plot": _plot}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"diffbench: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())

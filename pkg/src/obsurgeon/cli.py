"""Command-line entry point: ``obsurgeon run|report|oracle-check|validate-recipe``.

Exit codes: 0 success, 1 validation error (bad recipe, failed oracle check),
2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .recipe import RecipeError, resolve_recipe, shipped_recipes

log = logging.getLogger("obsurgeon")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2
FISHER_TOL = 1e-8


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obsurgeon", description="Second-order pruning recipes on toy models.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute a recipe")
    r.add_argument("--recipe", required=True, help="recipe file or shipped recipe name")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, default=None, help="run directory (default runs/<recipe id>-s<seed>)")
    r.add_argument("--threads", type=_positive_int, default=None,
                   help="BLAS thread limit (default: $OBSURGEON_THREADS or library default)")
    r.add_argument("--no-report", action="store_true", help="skip the report and figures after the run")

    rep = sub.add_parser("report", help="summarize a run directory, or compare two")
    rep.add_argument("run_dirs", nargs="+", type=Path, metavar="RUN_DIR")
    rep.add_argument("--out", type=Path, default=None, help="where to write tables and figures")
    rep.add_argument("--no-figures", action="store_true")

    o = sub.add_parser("oracle-check", help="compare fast paths against the brute-force oracles")
    o.add_argument("--configs", type=_positive_int, default=50)
    o.add_argument("--instances", type=_positive_int, default=200)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--threads", type=_positive_int, default=None)

    v = sub.add_parser("validate-recipe", help="parse and validate recipes")
    v.add_argument("--recipe", action="append", default=[], help="recipe file or shipped name (repeatable)")
    v.add_argument("--list", action="store_true", help="list shipped recipe names")
    v.add_argument("--show", action="store_true", help="print the normalized recipe")
    return p


def cmd_run(args) -> int:
    from .report import report
    from .runner import RunAborted, run

    recipe = resolve_recipe(args.recipe)
    out = args.out or Path("runs") / f"{recipe.id}-s{args.seed}"
    log.info("running %s (seed %d) into %s", recipe.id, args.seed, out)
    try:
        rep = run(recipe, args.seed, out, args.threads)
    except RunAborted as exc:
        log.error("%s", exc)
        if not args.no_report:
            print(report(out).text)
        return EXIT_ABORT
    if args.no_report:
        print(json.dumps({"status": rep.status, "final_sparsity": rep.final_sparsity, **rep.final}, indent=2))
    else:
        print(report(out).text)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import compare, report

    if len(args.run_dirs) > 2:
        log.error("report takes one run directory, or two to compare")
        return EXIT_INVALID
    missing = [d for d in args.run_dirs if not d.is_dir()]
    if missing:
        log.error("not a directory: %s", missing[0])
        return EXIT_INVALID
    if len(args.run_dirs) == 2:
        s = compare(*args.run_dirs, out_dir=args.out)
    else:
        s = report(args.run_dirs[0], out_dir=args.out, figures=not args.no_figures)
    print(s.text)
    for f in s.files:
        log.info("wrote %s", f)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    from .oracles import oracle_check
    from .runner import thread_limit

    with thread_limit(args.threads):
        res = oracle_check(args.configs, args.instances, args.seed)
    fisher_ok = res["fisher_max_abs_error"] <= FISHER_TOL
    group_ok = res["group_matches"] == res["group_instances"]
    print(f"{'PASS' if fisher_ok else 'FAIL'}  Fisher inverse vs dense oracle over {res['fisher_configs']} configs: "
          f"max abs error {res['fisher_max_abs_error']:.3e} (tol {FISHER_TOL:g}), "
          f"max relative error {res['fisher_max_rel_error']:.3e}")
    print(f"{'PASS' if group_ok else 'FAIL'}  best group vs exhaustive search: "
          f"{res['group_matches']}/{res['group_instances']} agree")
    return EXIT_OK if fisher_ok and group_ok else EXIT_INVALID


def cmd_validate(args) -> int:
    from .recipe import render_recipe

    if args.list:
        print("\n".join(shipped_recipes()))
    refs = args.recipe or ([] if args.list else shipped_recipes())
    status = EXIT_OK
    for ref in refs:
        try:
            r = resolve_recipe(ref)
        except (RecipeError, FileNotFoundError) as exc:
            print(f"INVALID {ref}: {exc}")
            status = EXIT_INVALID
            continue
        print(f"ok      {ref} ({r.id})")
        if args.show:
            print(render_recipe(r))
    return status


COMMANDS = {"run": cmd_run, "report": cmd_report, "oracle-check": cmd_oracle_check,
            "validate-recipe": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (RecipeError, FileNotFoundError, yaml.YAMLError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

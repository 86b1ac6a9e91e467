"""Command line front end.

Subcommands:

``ttmfg run CONFIG``
    Execute a key=value benchmark config and write CSV, manifest and
    figures into its output directory.
``ttmfg rules print --kind sl2p --dim 5``
    Print the nodes and weights of a diffusion increment rule.
``ttmfg verify``
    Run the fresh-build invariant checks.
``ttmfg report-fit PATH [PATH ...]``
    Fit CPU-versus-dimension models across saved manifests.

Exit codes: 0 success, 2 usage error, 3 a run did not converge,
4 an invariant check failed.

The ``--threads`` option (default: the ``TTMFG_THREADS`` environment
variable) caps BLAS and OpenMP worker pools.  It takes effect here,
before numpy is first imported, which is why the heavy modules are
imported inside the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_INVARIANT = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        raw = os.environ.get("TTMFG_THREADS")
        if raw is None:
            return
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"TTMFG_THREADS must be an integer, got {raw!r}")
    if threads < 1:
        raise ValueError(f"thread cap must be at least 1, got {threads}")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttmfg",
        description="tensor-train semi-Lagrangian benchmark driver",
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="cap BLAS/OpenMP worker threads (default: TTMFG_THREADS)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a benchmark config")
    run_p.add_argument("config", type=Path, help="key=value config file")
    run_p.add_argument(
        "--output", default=None, help="override the output directory"
    )
    run_p.add_argument(
        "--no-figures", action="store_true", help="skip figure rendering"
    )
    run_p.add_argument(
        "--long", action="store_true",
        help="allow configs marked as long runs",
    )

    rules_p = sub.add_parser("rules", help="inspect diffusion increment rules")
    rules_sub = rules_p.add_subparsers(dest="rules_command", required=True)
    print_p = rules_sub.add_parser("print", help="print nodes and weights")
    print_p.add_argument(
        "--kind", required=True, choices=("sl1", "sl2e", "sl2p", "det")
    )
    print_p.add_argument("--dim", required=True, type=int)
    print_p.add_argument("--variance", type=float, default=1.0)

    sub.add_parser("verify", help="run fresh-build invariant checks")

    fit_p = sub.add_parser(
        "report-fit", help="fit CPU-vs-dimension models across manifests"
    )
    fit_p.add_argument(
        "paths", nargs="+", type=Path,
        help="manifest files or directories containing them",
    )
    return parser


def _row_line(row) -> str:
    parts = [f"  n_steps={row.n_steps}"]
    if row.grid_n is not None:
        parts.append(f"grid_n={row.grid_n}")
    if row.dt is not None:
        parts.append(f"dt={row.dt:.4g}")
    for name in ("e2_u", "e2_m", "min_probe", "mass_defect"):
        value = getattr(row, name)
        if value is not None:
            parts.append(f"{name}={value:.4e}")
    if row.benchmark == "dim_sweep":
        parts.insert(1, f"dim={row.dim}")
    if row.iterations is not None:
        parts.append(f"iters={row.iterations}")
    if row.cpu_seconds is not None:
        parts.append(f"cpu={row.cpu_seconds:.3g}s")
    if row.converged is False:
        parts.append("NOT CONVERGED")
    return " ".join(parts)


def _cmd_run(args) -> int:
    from . import reporting

    try:
        text = args.config.read_text()
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = reporting.parse_config(text)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    overrides = {}
    if args.output is not None:
        overrides["output"] = args.output
    if args.no_figures:
        overrides["figures"] = False
    if overrides:
        spec = replace(spec, **overrides)
    try:
        report = reporting.run_experiment(spec, allow_long=args.long)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    paths = reporting.write_report(report, spec.output)
    print(f"{spec.resolved_label()}: {len(report.rows)} rows")
    for row in report.rows:
        print(_row_line(row))
    print(f"csv: {paths['csv']}")
    print(f"manifest: {paths['manifest']}")
    for fig in paths["figures"]:
        print(f"figure: {fig}")
    if not report.all_converged:
        print(
            "warning: at least one run hit its iteration cap without "
            "meeting the stopping tolerance", file=sys.stderr,
        )
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cmd_rules(args) -> int:
    from . import reporting

    try:
        print(reporting.describe_rule(args.kind, args.dim, args.variance))
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _cmd_verify(args) -> int:
    from . import reporting

    failed = 0
    for check in reporting.verify_invariants():
        status = "ok  " if check.passed else "FAIL"
        print(f"{status} {check.name}: {check.detail}")
        failed += 0 if check.passed else 1
    if failed:
        print(f"{failed} invariant check(s) failed", file=sys.stderr)
        return EXIT_INVARIANT
    print("all invariant checks passed")
    return EXIT_OK


def _cmd_report_fit(args) -> int:
    from . import reporting

    manifests: list[Path] = []
    for path in args.paths:
        if path.is_dir():
            manifests.extend(sorted(path.glob("*.json")))
        elif path.exists():
            manifests.append(path)
        else:
            print(f"error: no such path: {path}", file=sys.stderr)
            return EXIT_USAGE
    if not manifests:
        print("error: no manifests found", file=sys.stderr)
        return EXIT_USAGE
    try:
        fit = reporting.report_fit(manifests)
    except (ValueError, KeyError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    print(f"benchmark: {fit['benchmark']}  scheme: {fit['scheme']}")
    print(f"dims: {fit['dims']}")
    cpu = ", ".join(format(c, ".4g") for c in fit["cpu_seconds"])
    print(f"cpu_seconds: [{cpu}]")
    power = fit["power"]
    print(
        f"power model a*d^b: a={power['coefficient']:.4g} "
        f"b={power['exponent']:.4g} R2={power['r_squared']:.6f}"
    )
    expo = fit["exponential"]
    print(
        f"exponential model a*exp(b*d): a={expo['coefficient']:.4g} "
        f"b={expo['rate']:.4g} R2={expo['r_squared']:.6f}"
    )
    print(f"preferred: {fit['preferred']}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap(args.threads)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "rules":
        return _cmd_rules(args)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "report-fit":
        return _cmd_report_fit(args)
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())

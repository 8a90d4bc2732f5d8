"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 model or input error, 3 a
verification (or comparison) failed.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from . import experiment, lumping, perturbation
from .semantics import vector_field
from .solver import IntegrationError, SolverConfig, Trajectory, integrate, trajectory_distance
from .syntax import SEMANTICS, ModelError, format_model, load_model, validate

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_FAIL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("expected positive integers")
    return values


def _write(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _load(args):
    model = load_model(args.model, getattr(args, "rho", None))
    errors = []
    for d in validate(model):
        if d.severity == "error":
            errors.append(d)
        else:
            print(f"{args.model}:{d}", file=sys.stderr)
    if errors:
        for d in errors:
            print(f"{args.model}:{d}", file=sys.stderr)
        raise SystemExit(EXIT_MODEL)
    return model


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        method=args.method, rtol=args.rtol, atol=args.atol, h=args.h, t_end=args.t_end, grid=args.grid
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_check(args) -> int:
    model = _load(args)
    f = vector_field(model)
    print(f"{args.model}: ok ({len(model.atoms)} atoms, {len(f)} states, {len(model.rate_vector)} rates, rho={model.rho})")
    return EXIT_OK


def cmd_odes(args) -> int:
    f = vector_field(_load(args))
    text = f.to_json_text() + "\n" if args.json else "\n".join(f.equations()) + "\n"
    _write(text, args.out)
    return EXIT_OK


def _print_report(report: lumping.VerificationReport) -> None:
    print(report.summary())
    if report.partition is not None:
        print(f"partition: {report.partition}")
    if report.witness is not None:
        print("witness: " + ", ".join(f"{k}={v:.6g}" for k, v in report.witness.items()))
    for w in report.warnings:
        _warn(w)


def cmd_lump(args) -> int:
    model = _load(args)
    partition = lumping.load_partition(args.partition) if args.partition else None
    mode = args.mode
    if mode.startswith("eps-"):
        base = mode[4:]
        cfg = SolverConfig(t_end=args.t_end, grid=args.grid)
        result = perturbation.approximate_lumping(
            model, base, partition, args.t_end, args.norm, args.samples, args.tol, args.seed, cfg
        )
        _print_report(result.verification)
        for w in result.warnings:
            _warn(w)
        p = result.perturbation
        print(f"eps = {p.epsilon!r} ({args.norm}-norm), delta = {p.delta!r}")
        if p.bound is not None:
            print(f"L = {p.L:.6g}, K = {p.K:.6g}, bound at t={p.t:g}: {p.bound:.6g}")
        if args.out:
            data = result.to_json()
            data["reference_model"] = format_model(result.reference)
            _write(json.dumps(data, indent=2) + "\n", args.out)
        return EXIT_OK if result.verification.passed else EXIT_FAIL

    if partition is None:
        candidates = lumping.discover_partitions(model, mode, args.samples, args.tol, args.seed)
        nontrivial = candidates[:-1]
        if not nontrivial:
            # report why the closest shape-compatible grouping is not exact
            nontrivial = lumping.discover_partitions(model, "eps-" + mode, args.samples, args.tol, args.seed)[:-1]
        if not nontrivial:
            print(f"no {mode.upper()} partition coarser than the discrete one was found")
            if args.out:
                _write(json.dumps({"verdict": lumping.FAIL, "kind": mode, "detail": "no candidate"}, indent=2) + "\n", args.out)
            return EXIT_FAIL
        partition = nontrivial[0].partition
    if mode == lumping.EFL:
        report = lumping.verify_efl(model, partition, args.samples, args.tol, args.seed)
    else:
        if isinstance(partition, lumping.TuplePartition):
            partition = lumping.projected_partition(lumping.complete_tuple_partition(model, partition))
        report = lumping.verify_ofl(model, partition, args.samples, args.tol, args.seed)
    _print_report(report)
    data = report.to_json()
    if report.passed:
        lumped = lumping.build_lumped_ode(model, report.partition, mode, force=True)
        print(f"lumped system: {len(lumped)} of {len(lumped.field)} states ({', '.join(lumped.names)})")
        data["lumped_states"] = list(lumped.names)
    if args.out:
        _write(json.dumps(data, indent=2) + "\n", args.out)
    return EXIT_OK if report.passed else EXIT_FAIL


def _lumped_system(model, args) -> lumping.LumpedSystem:
    mode = args.lump or lumping.OFL
    if args.partition:
        partition = lumping.load_partition(args.partition)
    else:
        partition = lumping.discover_partitions(model, mode, args.samples, args.tol, args.seed)[0].partition
    return lumping.build_lumped_ode(model, partition, mode, samples=args.samples, tol=args.tol, seed=args.seed)


def cmd_solve(args) -> int:
    model = _load(args)
    cfg = _solver_config(args)
    if args.lump:
        system = _lumped_system(model, args)
        traj = integrate(system, system.lump_initial(), cfg)
        if args.lump == lumping.EFL and args.expand:
            traj = system.recover(traj)
    else:
        f = vector_field(model)
        traj = integrate(f, f.initial_state(), cfg)
        if args.block_sums:
            traj = _lumped_system(model, args).block_sums(traj)
    if args.clamp:
        traj = traj.clamped()
    if args.out is None or args.out == "-":
        traj.to_csv(sys.stdout)
    else:
        traj.to_csv(args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = Trajectory.from_csv(args.first), Trajectory.from_csv(args.second)
    mapping = None
    if args.common:
        shared = [n for n in a.names if n in set(b.names)]
        if not shared:
            raise UsageError("the trajectories share no column")
        mapping = {n: n for n in shared}
    dist = trajectory_distance(a, b, args.norm, mapping)
    print(f"max distance ({args.norm}-norm): {dist!r}")
    if args.tol is not None and dist > args.tol:
        return EXIT_FAIL
    return EXIT_OK


def cmd_experiment(args) -> int:
    rhos = SEMANTICS if args.rho == "both" else (args.rho,)
    deltas = experiment.default_deltas(args.delta_start, args.delta_stop, args.delta_step)
    spec = experiment.ExperimentSpec(
        efl_D=args.efl_d, ofl_D=args.ofl_d, deltas=deltas, rhos=rhos, t_end=args.t_end, grid=args.grid,
        norm=args.norm, bound=not args.no_bound,
    )
    rows = experiment.run_sweep(spec, args.jobs)
    if args.out is None or args.out == "-":
        experiment.write_csv(rows, sys.stdout)
    else:
        experiment.write_csv(rows, args.out)
        print(f"wrote {len(rows)} rows to {args.out}")
    for line in experiment.summarize(rows).lines():
        print(line, file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fepa", description="Fluid process algebra: ODEs, lumping and perturbation bounds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("model", help="model file")
        p.add_argument("--rho", choices=SEMANTICS, help="override the semantics given in the file")
        return p

    def verification_flags(p):
        p.add_argument("--samples", type=_positive_int, default=50, help="random populations per check")
        p.add_argument("--tol", type=_positive_float, default=1e-9, help="relative tolerance of the checks")
        p.add_argument("--seed", type=int, default=42, help="sampling seed")

    def solver_flags(p):
        p.add_argument("--t-end", type=_positive_float, default=100.0)
        p.add_argument("--grid", type=_positive_float, default=0.2, help="output time step")

    p = model_cmd("check", "parse and validate a model")
    p.set_defaults(func=cmd_check)

    p = model_cmd("odes", "print the ODE system")
    p.add_argument("--json", action="store_true", help="machine-readable form")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_odes)

    p = model_cmd("lump", "verify or discover a lumpable partition")
    p.add_argument("--mode", choices=("efl", "ofl", "eps-efl", "eps-ofl"), default="ofl")
    p.add_argument("--partition", help="partition JSON file (default: discover one)")
    p.add_argument("--norm", choices=("inf", "1", "2"), default="inf")
    p.add_argument("--out", help="write the JSON report here")
    verification_flags(p)
    solver_flags(p)
    p.set_defaults(func=cmd_lump)

    p = model_cmd("solve", "integrate a model (optionally lumped) and print a CSV trajectory")
    p.add_argument("--lump", choices=("efl", "ofl"), help="solve the lumped system instead")
    p.add_argument("--partition", help="partition JSON file for --lump (default: discover one)")
    p.add_argument("--expand", action="store_true", help="with --lump efl, write every replica's columns")
    p.add_argument("--block-sums", action="store_true", help="solve the full system but write the ordinary-lumping block sums")
    p.add_argument("--method", choices=("rk45", "rk4"), default="rk45")
    p.add_argument("--rtol", type=_positive_float, default=1e-8)
    p.add_argument("--atol", type=_positive_float, default=1e-10)
    p.add_argument("--h", type=_positive_float, default=1e-3, help="fixed step for rk4")
    p.add_argument("--clamp", action="store_true", help="set roundoff-negative values to zero")
    p.add_argument("--out", help="output CSV (default stdout)")
    verification_flags(p)
    solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="maximum distance between two trajectory CSVs")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--norm", choices=("inf", "1", "2"), default="inf")
    p.add_argument("--common", action="store_true", help="compare only the columns both files have")
    p.add_argument("--tol", type=float, help="exit with status 3 if the distance exceeds this")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment", help="sweep the heterogeneous-rates study")
    p.add_argument("--efl-d", type=_int_list, default=(3, 6, 9, 12), help="D values for exact lumping")
    p.add_argument("--ofl-d", type=_int_list, default=(12,), help="D values for ordinary lumping")
    p.add_argument("--delta-start", type=_positive_float, default=0.0005)
    p.add_argument("--delta-stop", type=_positive_float, default=0.1)
    p.add_argument("--delta-step", type=_positive_float, default=0.005)
    p.add_argument("--rho", choices=(*SEMANTICS, "both"), default="both")
    p.add_argument("--norm", choices=("inf", "1", "2"), default="inf")
    p.add_argument("--no-bound", action="store_true", help="skip the theoretical bound column")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out", help="output CSV (default stdout)")
    solver_flags(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_MODEL
    except UsageError as exc:
        print(f"fepa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        where = getattr(args, "model", "")
        print(f"{where}: error: {exc}" if where else f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (lumping.LumpingError, IntegrationError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())

"""Experiment command line: simulate, compare, convergence, stability, reproduce

Results go to stdout (the primary table of each command) and to files under
the output directory; logs go to stderr.
"""

import io
import logging
import sys
from argparse import ArgumentParser, ArgumentTypeError, Namespace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .analysis import (
    AllOverflowed,
    OverflowPresent,
    check_ladder,
    error_stats,
    fit_strong_order,
    path_spread,
    scan_stability_region,
    state_p_stable,
    sup_squared_error,
)
from .config import EXAMPLES, ConfigManager, ExperimentConfig, example_config_path
from .ctmc import stationary_distribution
from .errors import PCEMError, ResourceGuardError, ValidationError
from .output import (
    error_row,
    open_output,
    safe_name,
    write_convergence_fit,
    write_error_table,
    write_path_dump,
    write_region,
    write_simulation_summary,
    write_stability_summary,
    write_state_stability,
)
from .schemes import SchemePreset, resolve_scheme
from .simulate import SeedPair, build_grid, run_replications, simulate_coupled


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Step-replications (summed over schemes and steps) allowed without --allow-long.
WORK_LIMIT = 1_000_000_000

# Resolved experiment written next to the results; rerun it with --config.
EXPERIMENT_RECORD = "experiment.json"

# cmd_simulate warns when scheme paths drift apart by more than this share of the reference magnitude.
SPREAD_WARNING_RATIO = 0.1

Table = List[list]


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _lattice_axis(text: str) -> List:
    values = _float_list(text)
    if len(values) != 3 or values[2] != int(values[2]) or values[2] < 1:
        raise ArgumentTypeError(f"expected low,high,count, got {text!r}")
    return [values[0], values[1], int(values[2])]


def _common_flags() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument("--config", type=str, default=None, help="JSON experiment file (defaults apply when omitted).")
    parser.add_argument("--seed", type=int, default=None, help="Master seed, an unsigned 64-bit integer.")
    parser.add_argument("--out", type=str, default=None, help="Directory for result files.")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads for the replication engine.")
    parser.add_argument(
        "--scheme",
        type=str,
        default=None,
        help="Comma separated preset names, 'custom' (with --theta/--eta) or 'all'. "
        f"Presets: {', '.join(p.value for p in SchemePreset)}.",
    )
    parser.add_argument("--theta", type=_float_list, default=None, help="Drift implicitness, one value or one per component.")
    parser.add_argument("--eta", type=_float_list, default=None, help="Diffusion implicitness, one value or one per component.")
    parser.add_argument("--delta", type=_float_list, default=None, help="Comma separated step sizes replacing the config ladder.")
    parser.add_argument("--replications", type=int, default=None, help="Monte Carlo replications.")
    parser.add_argument("--allow-long", action="store_true", help="Permit runs beyond the desk-scale work guard.")
    parser.add_argument("--dump-paths", action="store_true", help="Write columnar path dumps (simulate only).")
    parser.add_argument("--no-header", action="store_true", help="Omit the '# generated' timestamp line.")
    parser.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Set the log level",
    )
    return parser


def build_parser() -> ArgumentParser:
    common = _common_flags()
    parser = ArgumentParser(
        prog="switching-pcem",
        description="Predictor-corrector Euler-Maruyama schemes for SDEs with Markovian switching",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("simulate", parents=[common], help="One coupled path per scheme at the first step size.")
    commands.add_parser("compare", parents=[common], help="Mean sup-squared error table, schemes x step sizes.")
    commands.add_parser("convergence", parents=[common], help="Strong-order fit over the step ladder.")

    stability = commands.add_parser("stability", parents=[common], help="p-stability regions on a lattice.")
    stability.add_argument("--p", type=float, default=None, help="Moment order p > 0.")
    stability.add_argument("--lambda-range", type=_lattice_axis, default=None, help="lambda*dt axis as low,high,count.")
    stability.add_argument("--alpha-range", type=_lattice_axis, default=None, help="alpha axis as low,high,count.")

    reproduce = commands.add_parser("reproduce", parents=[common], help="Run a committed example configuration.")
    reproduce.add_argument("example", choices=list(EXAMPLES), help="Example name.")
    reproduce.add_argument("--scale", choices=["desk", "paper"], default="desk", help="Run size (default: desk).")
    return parser


def _scheme_override(args: Namespace) -> Optional[list]:
    """Config `schemes` entries selected on the command line, None to keep the config's"""
    names = [n.strip() for n in args.scheme.split(",")] if args.scheme else []
    if args.theta is not None or args.eta is not None:
        theta, eta = [0.0], [0.0]
        if len(names) == 1 and names[0] not in ("custom", "all"):
            _, params = resolve_scheme(names[0])
            theta, eta = list(params.theta), list(params.eta)
        elif len(names) > 1 or names == ["all"]:
            raise ValidationError("--theta/--eta select a single scheme")
        return [{"theta": args.theta if args.theta is not None else theta,
                 "eta": args.eta if args.eta is not None else eta}]
    if not names:
        return None
    if names == ["all"]:
        return [preset.value for preset in SchemePreset]
    if "custom" in names:
        raise ValidationError("--scheme custom requires --theta and/or --eta")
    return names


def load_experiment(args: Namespace, manager: Optional[ConfigManager] = None) -> ExperimentConfig:
    """Config file plus command-line overrides, validated"""
    manager = manager or ConfigManager(args.config)
    if args.seed is not None:
        manager.set("seed", args.seed)
    if args.out is not None:
        manager.set("output_dir", args.out)
    if args.replications is not None:
        manager.set("replications", args.replications)
    if args.delta is not None:
        manager.set("deltas", args.delta)
    schemes = _scheme_override(args)
    if schemes is not None:
        manager.set("schemes", schemes)
    return manager.to_experiment()


def _record_config(manager: ConfigManager, experiment: ExperimentConfig) -> None:
    if experiment.output_dir:
        target = Path(experiment.output_dir) / EXPERIMENT_RECORD
        manager.save(str(target))
        logger.info(f"Resolved experiment written to {target}")


def estimated_work(experiment: ExperimentConfig, deltas: Optional[Sequence[float]] = None) -> int:
    deltas = experiment.deltas if deltas is None else deltas
    steps = sum(build_grid(experiment.horizon, dt).n_steps for dt in deltas)
    return steps * experiment.replications * len(experiment.schemes)


def guard_resources(experiment: ExperimentConfig, allow_long: bool, deltas: Optional[Sequence[float]] = None) -> None:
    """Raises ResourceGuardError when the run exceeds WORK_LIMIT without --allow-long"""
    work = estimated_work(experiment, deltas)
    if work > WORK_LIMIT and not allow_long:
        raise ResourceGuardError(
            f"run needs about {work:.3g} step-replications (limit {WORK_LIMIT:.0e}); pass --allow-long to proceed"
        )


def _emit(
    render: Callable[[TextIO], None], name: str, experiment: ExperimentConfig, stdout: Optional[TextIO]
) -> None:
    """Render a table once; write it to the output directory and optionally to stdout"""
    buffer = io.StringIO()
    render(buffer)
    text = buffer.getvalue()
    if stdout is not None:
        stdout.write(text)
    if experiment.output_dir:
        with open_output(Path(experiment.output_dir), name) as f:
            f.write(text)


def _error_table(experiment: ExperimentConfig, threads: int) -> Tuple[Table, int]:
    """Rows of the schemes x deltas table and the number of all-overflowed cells"""
    model = experiment.model()
    rows: Table = []
    failed = 0
    for delta in experiment.deltas:
        grid = build_grid(experiment.horizon, delta)
        logger.info(f"dt={delta}: {experiment.replications} replications, {len(experiment.schemes)} schemes")
        results = run_replications(
            model,
            experiment.schemes,
            grid,
            experiment.y0,
            experiment.r0,
            experiment.generator,
            experiment.replications,
            experiment.seed,
            batch_size=experiment.batch_size,
            threads=threads,
        )
        for errors in results:
            try:
                stats = error_stats(errors)
            except AllOverflowed as e:
                logger.error(f"dt={delta}: {e}")
                failed += 1
                stats = None
            rows.append(error_row(errors.label, errors.params, delta, stats, experiment.replications))
    return rows, failed


def _fits(experiment: ExperimentConfig, rows: Table) -> list:
    fits = []
    for label, params in experiment.schemes:
        points = [(float(r[3]), float(r[5])) for r in rows if r[0] == label]
        fit = fit_strong_order(points)
        logger.info(f"{label}: slope {fit.slope:.4f}, strong order {fit.strong_order:.4f}, R^2 {fit.r_squared:.4f}")
        fits.append((label, params, fit))
    return fits


def cmd_simulate(args: Namespace, stdout: TextIO) -> int:
    """One coupled numeric/reference path per scheme on replication 0"""
    manager = ConfigManager(args.config)
    experiment = load_experiment(args, manager)
    _record_config(manager, experiment)
    delta = experiment.deltas[0]
    grid = build_grid(experiment.horizon, delta)
    guard_resources(experiment, args.allow_long, [delta])
    model = experiment.model()
    seeds = SeedPair.for_replication(experiment.seed, 0)

    pi = stationary_distribution(experiment.generator)
    logger.info(f"Stationary distribution {np.array2string(pi, precision=4)}")

    rows = []
    paths = []
    for label, params in experiment.schemes:
        coupled = simulate_coupled(model, params, grid, experiment.y0, experiment.r0, seeds, experiment.generator)
        try:
            sup_sq, overflow_index = sup_squared_error(coupled), None
        except OverflowPresent as e:
            sup_sq, overflow_index = e.value, e.overflow_index
        rows.append((label, params, delta, sup_sq, overflow_index))
        paths.append(coupled.numeric)
        if args.dump_paths:
            with open_output(Path(experiment.output_dir or "."), f"path_{safe_name(label)}.txt") as f:
                write_path_dump(f, coupled.numeric, coupled.reference, header=not args.no_header)

    occupancy = np.bincount(coupled.reference.regimes.states - 1, minlength=experiment.generator.n_states)
    logger.info(f"Regime occupancy on the grid {occupancy / occupancy.sum()}")

    if len(paths) > 1:
        spread = path_spread(paths)
        scale = float(np.nanmax(np.abs(coupled.reference.states)))
        if spread > SPREAD_WARNING_RATIO * scale:
            logger.warning(f"Scheme paths differ by up to {spread:.4g} against a reference magnitude of {scale:.4g}")

    _emit(
        lambda s: write_simulation_summary(s, rows, header=not args.no_header), "simulate.csv", experiment, stdout
    )
    return 0


def cmd_compare(args: Namespace, stdout: TextIO) -> int:
    manager = ConfigManager(args.config)
    experiment = load_experiment(args, manager)
    _record_config(manager, experiment)
    guard_resources(experiment, args.allow_long)
    rows, failed = _error_table(experiment, args.threads)
    _emit(lambda s: write_error_table(s, rows, header=not args.no_header), "errors.csv", experiment, stdout)
    return 3 if failed else 0


def cmd_convergence(args: Namespace, stdout: TextIO) -> int:
    """Error table over the ladder plus one log-log fit per scheme; the fit table goes to stdout"""
    manager = ConfigManager(args.config)
    experiment = load_experiment(args, manager)
    _record_config(manager, experiment)
    check_ladder(experiment.deltas)
    guard_resources(experiment, args.allow_long)
    rows, _ = _error_table(experiment, args.threads)
    _emit(lambda s: write_error_table(s, rows, header=not args.no_header), "convergence_points.csv", experiment, None)
    fits = _fits(experiment, rows)
    _emit(
        lambda s: write_convergence_fit(s, fits, header=not args.no_header), "convergence_fit.csv", experiment, stdout
    )
    return 0


def cmd_stability(args: Namespace, stdout: TextIO) -> int:
    """Region per scheme; per-regime verdicts when the config holds a stability-test model"""
    manager = ConfigManager(args.config)
    if args.p is not None:
        manager.set("stability.p", args.p)
    if args.lambda_range is not None:
        manager.set("stability.lambda_dt", args.lambda_range)
    if args.alpha_range is not None:
        manager.set("stability.alpha", args.alpha_range)
    experiment = load_experiment(args, manager)
    _record_config(manager, experiment)

    lambda_dt, alpha = experiment.lattice.axes()
    test_model = experiment.stability_test_model()
    dt = experiment.deltas[0]
    summary = []
    for label, params in experiment.schemes:
        region = scan_stability_region(params, experiment.stability_p, lambda_dt, alpha, scheme=label)
        _emit(
            lambda s: write_region(s, region, header=not args.no_header),
            f"region_{safe_name(label)}.csv",
            experiment,
            None,
        )
        verdict = None
        if test_model is not None:
            verdict = state_p_stable(test_model, params, dt, experiment.stability_p)
            logger.info(f"{label}: state-p-stable at dt={dt}: {verdict.overall}")
            _emit(
                lambda s: write_state_stability(s, test_model, dt, verdict, header=not args.no_header),
                f"state_{safe_name(label)}.csv",
                experiment,
                None,
            )
        summary.append((region, verdict))

    _emit(
        lambda s: write_stability_summary(s, summary, header=not args.no_header),
        "stability_summary.csv",
        experiment,
        stdout,
    )
    return 0


def cmd_reproduce(args: Namespace, stdout: TextIO) -> int:
    """Committed example at desk or paper scale; adds a fit table when the ladder allows one"""
    if args.config:
        raise ValidationError("reproduce uses the committed example configuration; drop --config")
    manager = ConfigManager(str(example_config_path(args.example)))
    if args.scale == "paper":
        manager.apply_paper_scale()
        if not args.allow_long:
            raise ResourceGuardError(f"{args.example} at paper scale runs for hours; pass --allow-long to proceed")
    experiment = load_experiment(args, manager)
    _record_config(manager, experiment)
    guard_resources(experiment, args.allow_long)
    logger.info(
        f"Reproducing {args.example} ({args.scale}): T={experiment.horizon}, "
        f"{len(experiment.deltas)} step sizes, {experiment.replications} replications"
    )

    rows, failed = _error_table(experiment, args.threads)
    stem = f"{args.example}_{args.scale}"
    _emit(lambda s: write_error_table(s, rows, header=not args.no_header), f"{stem}_errors.csv", experiment, stdout)

    try:
        check_ladder(experiment.deltas)
    except ValidationError:
        logger.info("Step ladder too short for an order fit")
        return 3 if failed else 0
    if not failed:
        fits = _fits(experiment, rows)
        _emit(
            lambda s: write_convergence_fit(s, fits, header=not args.no_header), f"{stem}_fit.csv", experiment, None
        )
    return 3 if failed else 0


COMMANDS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "convergence": cmd_convergence,
    "stability": cmd_stability,
    "reproduce": cmd_reproduce,
}


def run(argv: Optional[Sequence[str]] = None, stdout: Optional[TextIO] = None) -> int:
    """Parse arguments, dispatch and map errors to exit codes"""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    level = getattr(logging, args.log_level)
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger("switching_pcem").setLevel(level)

    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2

    try:
        return COMMANDS[args.command](args, stdout or sys.stdout)
    except PCEMError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def main():
    """Main entry point"""
    sys.exit(run())


if __name__ == "__main__":
    main()

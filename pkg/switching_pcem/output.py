"""CSV tables and path dumps

Every float is printed with the shortest representation that parses back to
the same value. An optional first line `# generated <UTC ISO time>` is the
only run-dependent content; everything else is a pure function of the inputs.

Schemas:
    errors       scheme,theta,eta,delta,n_reps,mean_sup_sq,std_error,overflow_count
    fit          scheme,theta,eta,slope,intercept,r_squared,strong_order
    region       lambda_dt,alpha,p,moment,stable
    state        regime,alpha,lambda,lambda_dt,moment,stable
    path dump    time regime dW_1..dW_m y_1..y_d [ref_1..ref_d]  (space separated)

gnuplot reads a region file directly:
    set datafile separator ','; plot 'region_EM.csv' using 1:2:($5 == 1 ? 1 : 0) every ::1
"""

import csv
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Tuple

import numpy as np

from .analysis import ConvergenceFit, ErrorStats, StabilityRegion, StateStability
from .models import StabilityTestModel
from .schemes import SchemeParams
from .simulate import PathResult


logger = logging.getLogger(__name__)

ERROR_COLUMNS = ["scheme", "theta", "eta", "delta", "n_reps", "mean_sup_sq", "std_error", "overflow_count"]
FIT_COLUMNS = ["scheme", "theta", "eta", "slope", "intercept", "r_squared", "strong_order"]
REGION_COLUMNS = ["lambda_dt", "alpha", "p", "moment", "stable"]
STATE_COLUMNS = ["regime", "alpha", "lambda", "lambda_dt", "moment", "stable"]
SIMULATION_COLUMNS = ["scheme", "theta", "eta", "delta", "sup_sq_error", "overflow_index"]
STABILITY_SUMMARY_COLUMNS = ["scheme", "theta", "eta", "p", "stable_nodes", "total_nodes", "state_p_stable"]


def format_float(value) -> str:
    """Shortest round-trip decimal for a float"""
    return repr(float(value))


def _degrees(values: Sequence[float]) -> str:
    return ";".join(format_float(v) for v in values)


def header_line() -> str:
    return f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n"


def _writer(stream: TextIO, columns: Sequence[str], header: bool):
    if header:
        stream.write(header_line())
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(columns)
    return writer


def error_row(
    label: str, params: SchemeParams, delta: float, stats: Optional[ErrorStats], n_reps: int
) -> list:
    """One error-table row; stats=None marks a cell where every replication overflowed"""
    if stats is None:
        return [label, _degrees(params.theta), _degrees(params.eta), format_float(delta),
                n_reps, "nan", "nan", n_reps]
    return [
        label,
        _degrees(params.theta),
        _degrees(params.eta),
        format_float(delta),
        stats.n_replications,
        format_float(stats.mean_sup_sq),
        format_float(stats.std_error),
        stats.overflow_count,
    ]


def write_error_table(stream: TextIO, rows: Iterable[list], header: bool = True) -> None:
    writer = _writer(stream, ERROR_COLUMNS, header)
    writer.writerows(rows)


def write_convergence_fit(
    stream: TextIO, fits: Iterable[Tuple[str, SchemeParams, ConvergenceFit]], header: bool = True
) -> None:
    writer = _writer(stream, FIT_COLUMNS, header)
    for label, params, fit in fits:
        writer.writerow([
            label,
            _degrees(params.theta),
            _degrees(params.eta),
            format_float(fit.slope),
            format_float(fit.intercept),
            format_float(fit.r_squared),
            format_float(fit.strong_order),
        ])


def write_region(stream: TextIO, region: StabilityRegion, header: bool = True) -> None:
    writer = _writer(stream, REGION_COLUMNS, header)
    for i, lambda_dt in enumerate(region.lambda_dt):
        for j, alpha in enumerate(region.alpha):
            writer.writerow([
                format_float(lambda_dt),
                format_float(alpha),
                format_float(region.p),
                format_float(region.moments[i, j]),
                int(region.mask[i, j]),
            ])


def write_state_stability(
    stream: TextIO, model: StabilityTestModel, dt: float, verdict: StateStability, header: bool = True
) -> None:
    writer = _writer(stream, STATE_COLUMNS, header)
    for k, (stable, moment) in enumerate(zip(verdict.per_regime, verdict.moments), start=1):
        alpha, lam = model.regime(k)
        writer.writerow([
            k, format_float(alpha), format_float(lam), format_float(lam * dt), format_float(moment), int(stable),
        ])


def write_simulation_summary(
    stream: TextIO,
    rows: Iterable[Tuple[str, SchemeParams, float, float, Optional[int]]],
    header: bool = True,
) -> None:
    """One row per scheme; overflow_index is empty for finite paths and the error
    then covers the whole grid, otherwise only the finite prefix"""
    writer = _writer(stream, SIMULATION_COLUMNS, header)
    for label, params, delta, sup_sq, overflow_index in rows:
        writer.writerow([
            label,
            _degrees(params.theta),
            _degrees(params.eta),
            format_float(delta),
            format_float(sup_sq),
            "" if overflow_index is None else overflow_index,
        ])


def write_stability_summary(
    stream: TextIO,
    rows: Iterable[Tuple[StabilityRegion, Optional[StateStability]]],
    header: bool = True,
) -> None:
    writer = _writer(stream, STABILITY_SUMMARY_COLUMNS, header)
    for region, verdict in rows:
        writer.writerow([
            region.scheme,
            _degrees(region.params.theta),
            _degrees(region.params.eta),
            format_float(region.p),
            region.stable_count,
            region.mask.size,
            "" if verdict is None else int(verdict.overall),
        ])


def write_path_dump(
    stream: TextIO, path: PathResult, reference: Optional[PathResult] = None, header: bool = True
) -> None:
    """Columnar dump, one row per grid point; the last row has no increment (written as nan)"""
    if header:
        stream.write(header_line())
    m = path.brownian_increments.shape[1]
    d = path.states.shape[1]
    columns = ["time", "regime"] + [f"dW_{j + 1}" for j in range(m)] + [f"y_{k + 1}" for k in range(d)]
    if reference is not None:
        columns += [f"ref_{k + 1}" for k in range(d)]
    stream.write("# " + " ".join(columns) + "\n")

    n = path.grid.n_points
    increments = np.vstack([path.brownian_increments, np.full((1, m), np.nan)])
    for k in range(n):
        fields = [format_float(path.grid.times[k]), str(int(path.regimes.states[k]))]
        fields += [format_float(v) for v in increments[k]]
        fields += [format_float(v) for v in path.states[k]]
        if reference is not None:
            fields += [format_float(v) for v in reference.states[k]]
        stream.write(" ".join(fields) + "\n")


def safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def open_output(directory: Path, name: str) -> TextIO:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    logger.info(f"Writing {path}")
    return open(path, "w", newline="")

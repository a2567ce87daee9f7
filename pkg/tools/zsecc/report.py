"""CSV reports: per-trial results, the strategy x rate aggregate and the
large-weight position histogram. Accuracies and drops are written in percent
with fixed precision so reruns produce byte-identical files."""
from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path

from .errors import OutputError
from .faults import AggregateRow, FaultTrialReport
from .inplace import BLOCK
from .nn import QuantizedNetwork
from .wot import census, layer_census

logger = logging.getLogger(__name__)

TRIAL_HEADER = (
    "model", "strategy", "scope", "fault_rate", "trial", "seed", "flips", "corrected",
    "detected_double", "detected_uncorrectable", "parity_zeroed", "accuracy", "drop",
)
AGGREGATE_HEADER = ("strategy", "rate", "trials", "mean_drop", "std_drop", "space_overhead_pct")
HISTOGRAM_HEADER = (
    "layer", *(f"pos{i}" for i in range(BLOCK)), "large_count", "crowded_blocks",
    "pct_0_31", "pct_32_63", "pct_64_128",
)


def _pct(x: float) -> str:
    return f"{100.0 * x:.4f}"


def _rate(r: float) -> str:
    return f"{r:g}"


def _write(path: Path | str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    n = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
                n += 1
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    logger.info("wrote %s (%d rows)", path, n)
    return path


def write_trials_csv(reports: Iterable[FaultTrialReport], path: Path | str) -> Path:
    return _write(path, TRIAL_HEADER, (
        (
            r.model, r.strategy.cli_name, r.scope.value, _rate(r.rate), r.trial, r.seed, r.flips,
            r.counters.corrected, r.counters.detected_double, r.counters.detected_uncorrectable,
            r.counters.parity_zeroed, _pct(r.accuracy), _pct(r.drop),
        )
        for r in reports
    ))


def write_aggregate_csv(rows: Iterable[AggregateRow], path: Path | str) -> Path:
    return _write(path, AGGREGATE_HEADER, (
        (r.strategy.cli_name, _rate(r.rate), r.trials, _pct(r.mean_drop), _pct(r.std_drop),
         f"{r.space_overhead_pct:.1f}")
        for r in rows
    ))


def write_histogram_csv(qnet: QuantizedNetwork, path: Path | str) -> Path:
    """One row per weight tensor plus an ``all`` row."""
    entries = layer_census(qnet) + [("all", census(qnet))]
    return _write(path, HISTOGRAM_HEADER, (
        (name, *c.histogram, c.large_count, c.crowded_blocks, *(f"{b:.2f}" for b in c.bands))
        for name, c in entries
    ))


def format_aggregate(rows: Sequence[AggregateRow]) -> str:
    """Plain-text table in the strategy-by-rate shape, drops in percentage points."""
    rates = sorted({r.rate for r in rows})
    strategies = list(dict.fromkeys(r.strategy for r in rows))
    cell = {(r.strategy, r.rate): r for r in rows}
    lines = ["strategy   " + "".join(f"{_rate(rate):>18}" for rate in rates) + "  overhead"]
    for s in strategies:
        parts = []
        for rate in rates:
            r = cell.get((s, rate))
            parts.append(f"{100 * r.mean_drop:>9.3f} ±{100 * r.std_drop:>7.3f}" if r else " " * 18)
        overhead = next(r.space_overhead_pct for r in rows if r.strategy is s)
        lines.append(f"{s.cli_name:<11}" + "".join(parts) + f"  {overhead:>6.1f}%")
    return "\n".join(lines)

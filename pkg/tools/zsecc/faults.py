"""Random bit-flip injection and the strategy x rate x trial experiment."""
from __future__ import annotations

import enum
import logging
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError
from .nn import QuantizedNetwork, evaluate
from .protect import (
    ProtectedModel,
    ProtectionStrategy,
    RecoveryCounters,
    apply_strategy_store,
    to_network,
)
from .quantizer import round_half_away
from .rng import stream

logger = logging.getLogger(__name__)


class FaultScope(str, enum.Enum):
    ALL = "all"          # weight payloads and their redundancy arrays
    WEIGHTS = "weights"  # weight payloads only


@dataclass(frozen=True)
class FaultModel:
    rate: float
    seed: int = 0
    scope: FaultScope = FaultScope.ALL

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ArgumentError(f"fault rate must lie in [0, 1], got {self.rate}")
        object.__setattr__(self, "scope", FaultScope(self.scope))

    def flip_count(self, total_bits: int) -> int:
        return int(round_half_away(total_bits * self.rate))


def inject(data: np.ndarray, model: FaultModel) -> tuple[np.ndarray, np.ndarray]:
    """Flip ``round(8 * len(data) * rate)`` distinct bits of a byte array.

    Bit p is bit ``p % 8`` (LSB first) of byte ``p // 8``. Returns the mutated
    copy and the sorted flipped positions.
    """
    data = np.asarray(data, dtype=np.uint8)
    total = 8 * data.size
    count = model.flip_count(total)
    out = data.copy()
    if count == 0:
        return out, np.zeros(0, dtype=np.int64)
    positions = np.sort(stream(model.seed, "faults").choice(total, size=count, replace=False))
    np.bitwise_xor.at(out, positions >> 3, (1 << (positions & 7)).astype(np.uint8))
    return out, positions.astype(np.int64)


def _fault_space(pm: ProtectedModel, scope: FaultScope) -> list[tuple[int, str]]:
    """(record index, field) pairs in address order."""
    space = []
    for i in pm.weight_records():
        space.append((i, "payload"))
        if scope is FaultScope.ALL:
            space.append((i, "redundancy"))
    return space


def inject_store(pm: ProtectedModel, model: FaultModel) -> tuple[ProtectedModel, np.ndarray]:
    """Inject faults into the in-scope bytes of a store; biases are never hit."""
    space = _fault_space(pm, model.scope)
    parts = [getattr(pm.records[i], name) for i, name in space]
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)
    mutated, positions = inject(flat, model)
    records = list(pm.records)
    offset = 0
    for (i, name), part in zip(space, parts):
        records[i] = replace(records[i], **{name: mutated[offset:offset + part.size]})
        offset += part.size
    return pm.with_records(records), positions


@dataclass(frozen=True)
class FaultTrialReport:
    model: str
    strategy: ProtectionStrategy
    scope: FaultScope
    rate: float
    trial: int
    seed: int
    flips: int
    counters: RecoveryCounters
    clean_accuracy: float
    accuracy: float

    @property
    def drop(self) -> float:
        return self.clean_accuracy - self.accuracy


@dataclass(frozen=True)
class AggregateRow:
    strategy: ProtectionStrategy
    rate: float
    trials: int
    mean_drop: float
    std_drop: float
    space_overhead_pct: float


@dataclass
class ExperimentReport:
    clean_accuracy: float
    trials: list[FaultTrialReport]
    aggregate: list[AggregateRow]


def run_trial(store: ProtectedModel, dataset, fault: FaultModel, trial: int, clean_accuracy: float,
              model_name: str = "model", eval_limit: int | None = None) -> FaultTrialReport:
    faulty, positions = inject_store(store, fault)
    qnet, counters = to_network(faulty)
    acc = evaluate(qnet, dataset, eval_limit)
    return FaultTrialReport(
        model=model_name,
        strategy=store.strategy,
        scope=fault.scope,
        rate=fault.rate,
        trial=trial,
        seed=fault.seed,
        flips=int(positions.size),
        counters=counters,
        clean_accuracy=clean_accuracy,
        accuracy=acc,
    )


def aggregate(reports: Iterable[FaultTrialReport], stores: dict[ProtectionStrategy, ProtectedModel]
              ) -> list[AggregateRow]:
    """Mean and sample std (ddof=1) of the drop per (strategy, rate), in first-seen order."""
    groups: dict[tuple[ProtectionStrategy, float], list[float]] = {}
    for r in reports:
        groups.setdefault((r.strategy, r.rate), []).append(r.drop)
    rows = []
    for (strategy, rate), drops in groups.items():
        d = np.asarray(drops)
        rows.append(AggregateRow(
            strategy=strategy,
            rate=rate,
            trials=d.size,
            mean_drop=float(d.mean()),
            std_drop=float(d.std(ddof=1)) if d.size > 1 else 0.0,
            space_overhead_pct=stores[strategy].space_overhead_pct,
        ))
    return rows


def run_experiment(qnet: QuantizedNetwork, dataset, strategies: Iterable[str | ProtectionStrategy],
                   rates: Iterable[float], trials: int = 10, base_seed: int = 42,
                   scope: FaultScope | str = FaultScope.ALL, workers: int = 1,
                   model_name: str = "model", eval_limit: int | None = None) -> ExperimentReport:
    """Every (strategy, rate, trial) cell; trial t uses seed base_seed + t for all strategies."""
    if trials < 1:
        raise ArgumentError(f"trials must be >= 1, got {trials}")
    strategies = [ProtectionStrategy.parse(s) for s in strategies]
    rates = list(rates)
    scope = FaultScope(scope)
    clean = evaluate(qnet, dataset, eval_limit)
    logger.info("clean accuracy %.4f on %d samples", clean, eval_limit or len(dataset))
    stores = {s: apply_strategy_store(qnet, s) for s in strategies}

    cells = [(s, rate, t) for s in strategies for rate in rates for t in range(trials)]

    def one(cell: tuple[ProtectionStrategy, float, int]) -> FaultTrialReport:
        s, rate, t = cell
        return run_trial(stores[s], dataset, FaultModel(rate, base_seed + t, scope), t, clean,
                         model_name, eval_limit)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, cells))
    else:
        reports = [one(c) for c in cells]

    rows = aggregate(reports, stores)
    for row in rows:
        logger.info("%-8s rate %.0e: drop %.4f +- %.4f", row.strategy.cli_name, row.rate,
                    row.mean_drop, row.std_drop)
    return ExperimentReport(clean_accuracy=clean, trials=reports, aggregate=rows)

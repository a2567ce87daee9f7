"""Weight-distribution-oriented training (quantization-aware training with throttling).

Each batch runs a QAT step, then clamps every quantized weight at a non-eighth
block position into [-64, 63] and writes the clamped values back into the
float weights. The loop stops once the throttled int8 model matches the target
accuracy, or after ``max_epochs``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import quantizer
from .errors import ArgumentError, OutputError
from .inplace import BLOCK, SMALL_MAX, SMALL_MIN, pad_to_blocks
from .nn import (
    SGD,
    Network,
    QuantizedNetwork,
    batches,
    evaluate,
    images_to_float,
    quantize_network,
)
from .quantizer import QuantizedTensor

logger = logging.getLogger(__name__)

# half-open |w| bands reported by census; int8 magnitudes never exceed 128
BANDS = ((0, 32), (32, 64), (64, 129))


@dataclass(frozen=True)
class WotConfig:
    lam: float = 1e-4
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 20
    target_accuracy: float = 0.0
    seed: int = 42
    eval_interval: int = 200
    eval_samples: int | None = 1000
    calibration_samples: int = 500
    tolerance: float = 1e-4  # 0.01 percentage points

    def __post_init__(self):
        if self.lam < 0:
            raise ArgumentError(f"lam must be >= 0, got {self.lam}")
        if self.learning_rate <= 0:
            raise ArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.target_accuracy <= 1.0:
            raise ArgumentError(f"target_accuracy must lie in [0, 1], got {self.target_accuracy}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.eval_interval < 1:
            raise ArgumentError("batch_size and eval_interval must be >= 1, max_epochs >= 0")


@dataclass(frozen=True)
class CensusRecord:
    iteration: int
    large_count: int
    acc_before: float | None = None
    acc_after: float | None = None
    histogram: tuple[int, ...] = (0,) * BLOCK
    bands: tuple[float, float, float] = (0.0, 0.0, 0.0)
    crowded_blocks: int = 0


@dataclass
class WotResult:
    network: Network
    qnet: QuantizedNetwork
    log: list[CensusRecord] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def _non_eighth(n: int) -> np.ndarray:
    return (np.arange(n) % BLOCK) != BLOCK - 1


def throttle(q: QuantizedTensor) -> QuantizedTensor:
    """Clamp values at non-eighth positions of each 8-weight block into [-64, 63]."""
    flat = q.values.reshape(-1)
    mask = _non_eighth(flat.size)
    out = flat.copy()
    out[mask] = np.clip(flat[mask], SMALL_MIN, SMALL_MAX)
    return QuantizedTensor(values=out.reshape(q.values.shape), scale=q.scale)


def sync_float_from_throttle(weights: np.ndarray, before: QuantizedTensor, after: QuantizedTensor,
                             scale: float | None = None) -> np.ndarray:
    """Float weights with every value the throttle changed replaced by v' * scale."""
    scale = after.scale if scale is None else scale
    changed = before.values != after.values
    out = np.array(weights, dtype=np.float64, copy=True)
    out[changed] = after.values[changed].astype(np.float64) * scale
    return out


def _census_of(tensors: list[np.ndarray], iteration: int = 0) -> CensusRecord:
    histogram = np.zeros(BLOCK, dtype=np.int64)
    band_counts = np.zeros(len(BANDS), dtype=np.int64)
    crowded = 0
    total = 0
    for values in tensors:
        blocks, _ = pad_to_blocks(values)
        large = (blocks < SMALL_MIN) | (blocks > SMALL_MAX)
        histogram += large.sum(axis=0)
        crowded += int(np.count_nonzero(large.sum(axis=1) > 1))
        mag = np.abs(values.astype(np.int16)).reshape(-1)
        for b, (lo, hi) in enumerate(BANDS):
            band_counts[b] += np.count_nonzero((mag >= lo) & (mag < hi))
        total += mag.size
    bands = tuple(float(100.0 * c / total) if total else 0.0 for c in band_counts)
    return CensusRecord(
        iteration=iteration,
        large_count=int(histogram[: BLOCK - 1].sum()),
        histogram=tuple(int(h) for h in histogram),
        bands=bands,
        crowded_blocks=crowded,
    )


def census(qnet: QuantizedNetwork, iteration: int = 0) -> CensusRecord:
    """Large-value (outside [-64, 63]) statistics over all weight tensors.

    ``large_count`` covers the first seven positions of each block only; the
    histogram has one bucket per position, the eighth included.
    """
    return _census_of([t.values for _, t in qnet.weight_tensors()], iteration)


def layer_census(qnet: QuantizedNetwork) -> list[tuple[str, CensusRecord]]:
    return [(name, _census_of([t.values])) for name, t in qnet.weight_tensors()]


def hard_throttle(qnet: QuantizedNetwork) -> QuantizedNetwork:
    return qnet.with_weights([throttle(t) for _, t in qnet.weight_tensors()])


def _throttle_float(net: Network) -> int:
    """Throttle step on the float weights; returns how many values changed."""
    changed = 0
    for _, layer in net.parametric():
        q = quantizer.quantize(layer.weight)
        t = throttle(q)
        diff = int(np.count_nonzero(q.values != t.values))
        if diff:
            layer.weight = sync_float_from_throttle(layer.weight, q, t)
            changed += diff
    return changed


def _checkpoint(net: Network, iteration: int, calibration: np.ndarray, eval_set,
                limit: int | None) -> tuple[CensusRecord, QuantizedNetwork]:
    before = quantize_network(net, calibration)
    after = quantize_network(net, calibration, weight_hook=throttle)
    record = replace(
        census(before, iteration),
        acc_before=evaluate(before, eval_set, limit),
        acc_after=evaluate(after, eval_set, limit),
    )
    logger.info(
        "iteration %d: %d large values, accuracy %.4f before / %.4f after throttle",
        iteration, record.large_count, record.acc_before, record.acc_after,
    )
    return record, after


def wot_train(net: Network, dataset, cfg: WotConfig, eval_set=None) -> WotResult:
    """Train ``net`` in place until the throttled int8 model reaches the target.

    ``eval_set`` defaults to the training set. The returned qnet always
    satisfies the block constraint; ``converged`` is False when the target was
    not reached within ``max_epochs`` (the best checkpoint is returned).

    The log holds one pre-throttle census per checkpoint and ends with the
    census of the returned model, whose large-value count is 0.
    """
    eval_set = dataset if eval_set is None else eval_set
    calibration = dataset.images[: cfg.calibration_samples]
    target = cfg.target_accuracy - cfg.tolerance
    opt = SGD(cfg.learning_rate, cfg.momentum)
    x_all = images_to_float(dataset.images)

    log: list[CensusRecord] = []
    best: tuple[float, Network, QuantizedNetwork] | None = None
    iteration = 0

    def checkpoint() -> bool:
        nonlocal best
        record, qnet = _checkpoint(net, iteration, calibration, eval_set, cfg.eval_samples)
        log.append(record)
        if best is None or record.acc_after > best[0]:
            best = (record.acc_after, net.copy(), qnet)
        return record.acc_after >= target

    done = checkpoint()
    for epoch in range(cfg.max_epochs):
        if done:
            break
        for idx in batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            loss, grads = net.forward_backward(x_all[idx], dataset.labels[idx], cfg.lam,
                                               quantize_weights=True)
            opt.step(net, grads)
            iteration += 1
            if iteration % cfg.eval_interval == 0 and checkpoint():
                done = True
                break
            changed = _throttle_float(net)
            logger.debug("iteration %d: loss %.4f, throttled %d values", iteration, loss, changed)
        else:
            if iteration % cfg.eval_interval:
                done = checkpoint()

    acc, best_net, best_qnet = best
    if not done:
        logger.warning(
            "WOT did not reach target accuracy %.4f within %d epochs; best %.4f",
            cfg.target_accuracy, cfg.max_epochs, acc,
        )
    qnet = hard_throttle(best_qnet)
    # closing record: the returned model after the final clamp
    log.append(replace(census(qnet, iteration), acc_before=acc, acc_after=acc))
    return WotResult(
        network=best_net,
        qnet=qnet,
        log=log,
        converged=done,
        iterations=iteration,
    )


CENSUS_HEADER = ("iteration", "large_count", "acc_before_throttle", "acc_after_throttle")


def write_census_csv(log: list[CensusRecord], path: Path | str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CENSUS_HEADER)
            for r in log:
                writer.writerow([
                    r.iteration,
                    r.large_count,
                    "" if r.acc_before is None else f"{r.acc_before:.6f}",
                    "" if r.acc_after is None else f"{r.acc_after:.6f}",
                ])
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    logger.info("wrote census log (%d rows) to %s", len(log), path)
    return path

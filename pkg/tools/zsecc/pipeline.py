"""End-to-end run: pre-train, quantize, WOT, fault sweep, reports.

Each step is a plain function so the Prefect flow can wrap them as tasks; the
artifacts of one run all land in ``cfg.output_dir``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import report, store
from .config import ExperimentConfig
from .datasets import Dataset, load_datasets
from .faults import ExperimentReport, run_experiment
from .nn import Network, QuantizedNetwork, TrainConfig, evaluate, quantize_network, reference_network, train
from .protect import ProtectionStrategy
from .wot import WotConfig, WotResult, wot_train, write_census_csv

logger = logging.getLogger(__name__)

CALIBRATION_SAMPLES = 500


@dataclass
class PipelineResult:
    baseline_accuracy: float
    wot: WotResult
    experiment: ExperimentReport
    artifacts: dict[str, Path]


def datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return load_datasets(cfg.data_dir, cfg.synthetic_seed, cfg.synthetic_train, cfg.synthetic_test)


def pretrain(cfg: ExperimentConfig, train_set: Dataset) -> Network:
    net = reference_network(cfg.base_seed, classes=train_set.classes,
                            input_shape=(1, *train_set.images.shape[1:]))
    tcfg = TrainConfig(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        seed=cfg.base_seed,
    )
    net, _ = train(net, train_set, tcfg)
    return net


def quantize_baseline(net: Network, train_set: Dataset, test_set: Dataset,
                      cfg: ExperimentConfig) -> tuple[QuantizedNetwork, float]:
    qnet = quantize_network(net, train_set.images[:CALIBRATION_SAMPLES])
    acc = evaluate(qnet, test_set, cfg.eval_samples)
    logger.info("8-bit baseline accuracy %.4f", acc)
    return qnet, acc


def wot_config(cfg: ExperimentConfig, target: float) -> WotConfig:
    return WotConfig(
        lam=cfg.lam,
        learning_rate=cfg.wot_learning_rate,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        target_accuracy=target,
        seed=cfg.base_seed,
        eval_interval=cfg.eval_interval,
        eval_samples=cfg.eval_samples,
        calibration_samples=CALIBRATION_SAMPLES,
    )


def regularize(net: Network, train_set: Dataset, test_set: Dataset, cfg: ExperimentConfig,
               target: float) -> WotResult:
    return wot_train(net.copy(), train_set, wot_config(cfg, target), eval_set=test_set)


def experiment(qnet: QuantizedNetwork, test_set: Dataset, cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(
        qnet, test_set,
        strategies=cfg.strategies,
        rates=cfg.rates,
        trials=cfg.trials,
        base_seed=cfg.base_seed,
        scope=cfg.scope,
        workers=cfg.workers,
        model_name=cfg.model_name,
    )


def write_reports(out: Path, baseline: QuantizedNetwork, wot: WotResult,
                  result: ExperimentReport) -> dict[str, Path]:
    return {
        "census": write_census_csv(wot.log, out / "census.csv"),
        "histogram": report.write_histogram_csv(baseline, out / "histogram.csv"),
        "histogram_wot": report.write_histogram_csv(wot.qnet, out / "histogram_wot.csv"),
        "trials": report.write_trials_csv(result.trials, out / "trials.csv"),
        "aggregate": report.write_aggregate_csv(result.aggregate, out / "aggregate.csv"),
    }


def run_pipeline(cfg: ExperimentConfig) -> PipelineResult:
    out = Path(cfg.output_dir)
    name = cfg.model_name
    train_set, test_set = datasets(cfg)

    net = pretrain(cfg, train_set)
    artifacts = {"float": store.save_float(net, out / f"{name}.float.zsec")}

    qnet, baseline = quantize_baseline(net, train_set, test_set, cfg)
    artifacts["quantized"] = store.save(qnet, ProtectionStrategy.FAULTY, out / f"{name}.q8.zsec")

    wot = regularize(net, train_set, test_set, cfg, baseline)
    artifacts["wot"] = store.save(wot.qnet, ProtectionStrategy.FAULTY, out / f"{name}.wot.zsec")
    artifacts["wot_float"] = store.save_float(wot.network, out / f"{name}.wot.float.zsec")
    if not wot.converged:
        logger.warning("continuing with the best WOT checkpoint")

    result = experiment(wot.qnet, test_set, cfg)
    artifacts.update(write_reports(out, qnet, wot, result))
    return PipelineResult(baseline, wot, result, artifacts)

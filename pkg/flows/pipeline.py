"""Train → quantize → WOT → fault sweep → reports, as a Prefect flow."""
from __future__ import annotations

from pathlib import Path

from prefect import flow, task

from tools.zsecc import pipeline, store
from tools.zsecc.config import ExperimentConfig, load_config
from tools.zsecc.datasets import Dataset
from tools.zsecc.faults import ExperimentReport
from tools.zsecc.nn import Network, QuantizedNetwork
from tools.zsecc.protect import ProtectionStrategy
from tools.zsecc.wot import WotResult


@task(name="train")
def train_task(cfg: ExperimentConfig, train_set: Dataset) -> Network:
    """Pre-train the reference CNN and checkpoint it."""
    net = pipeline.pretrain(cfg, train_set)
    store.save_float(net, Path(cfg.output_dir) / f"{cfg.model_name}.float.zsec")
    return net


@task(name="quantize")
def quantize_task(cfg: ExperimentConfig, net: Network, train_set: Dataset,
                  test_set: Dataset) -> tuple[QuantizedNetwork, float]:
    qnet, acc = pipeline.quantize_baseline(net, train_set, test_set, cfg)
    store.save(qnet, ProtectionStrategy.FAULTY, Path(cfg.output_dir) / f"{cfg.model_name}.q8.zsec")
    return qnet, acc


@task(name="wot")
def wot_task(cfg: ExperimentConfig, net: Network, train_set: Dataset, test_set: Dataset,
             target: float) -> WotResult:
    result = pipeline.regularize(net, train_set, test_set, cfg, target)
    out = Path(cfg.output_dir)
    store.save(result.qnet, ProtectionStrategy.FAULTY, out / f"{cfg.model_name}.wot.zsec")
    store.save_float(result.network, out / f"{cfg.model_name}.wot.float.zsec")
    return result


@task(name="experiment")
def experiment_task(cfg: ExperimentConfig, qnet: QuantizedNetwork, test_set: Dataset) -> ExperimentReport:
    return pipeline.experiment(qnet, test_set, cfg)


@task(name="report")
def report_task(cfg: ExperimentConfig, baseline: QuantizedNetwork, wot: WotResult,
                result: ExperimentReport) -> dict[str, Path]:
    return pipeline.write_reports(Path(cfg.output_dir), baseline, wot, result)


@flow(name="zsecc-pipeline", log_prints=True)
def pipeline_flow(config_path: str | None = None, output_dir: str | None = None) -> dict[str, str]:
    """Full desk-scale run; artifacts land in OUTPUT_DIR (or ``output_dir``)."""
    cfg = load_config(config_path, output_dir=Path(output_dir) if output_dir else None)
    train_set, test_set = pipeline.datasets(cfg)
    net = train_task(cfg, train_set)
    qnet, baseline = quantize_task(cfg, net, train_set, test_set)
    wot = wot_task(cfg, net, train_set, test_set, baseline)
    if not wot.converged:
        print("WOT did not reach the 8-bit baseline; continuing with the best checkpoint")
    result = experiment_task(cfg, wot.qnet, test_set)
    paths = report_task(cfg, qnet, wot, result)
    print(f"Pipeline complete: baseline {baseline:.4f}, reports in {cfg.output_dir}")
    return {name: str(p) for name, p in paths.items()}


if __name__ == "__main__":
    import sys

    pipeline_flow(config_path=sys.argv[1] if len(sys.argv) > 1 else None)

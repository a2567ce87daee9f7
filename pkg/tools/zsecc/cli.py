"""
CLI for zsecc: train, quantize, regularize, protect, inject and report.
"""
from __future__ import annotations

import enum
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional

import click
import typer

from . import config, datasets, pipeline, report, store
from .errors import ZseccError
from .faults import FaultModel, FaultScope, inject_store, run_experiment
from .nn import evaluate, evaluate_float
from .protect import ProtectionStrategy, apply_strategy_store
from .wot import census, write_census_csv

app = typer.Typer(help="zsecc: in-place zero-space ECC for int8 CNN weights", no_args_is_help=True)
flows_app = typer.Typer(help="Manage the Prefect pipeline deployment", no_args_is_help=True)
app.add_typer(flows_app, name="flows")

logger = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    faulty = "faulty"
    zero = "zero"
    ecc = "ecc"
    in_place = "in-place"


def setup_logging(verbose: bool = False, log_file: str | None = config.LOG_FILE) -> None:
    fmt = logging.Formatter("%(asctime)s [%(name)s] %(levelname)s: %(message)s")
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    for h in handlers:
        h.setFormatter(fmt)
    logging.basicConfig(level=logging.DEBUG if verbose else config.LOG_LEVEL, handlers=handlers)


@app.callback()
def _main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
    log_file: Optional[str] = typer.Option(config.LOG_FILE, help="Also log to this file"),
):
    setup_logging(verbose, log_file)


def _config(path: Optional[Path], **overrides) -> config.ExperimentConfig:
    return config.load_config(path, **overrides)


ConfigOpt = typer.Option(None, "--config", help="KEY=value experiment config file")
DataDirOpt = typer.Option(None, help="Directory with MNIST-style IDX files (default: synthetic data)")
SeedOpt = typer.Option(None, help="Seed (defaults to BASE_SEED / ZSECC_SEED)")


# --- Training ---

@app.command("train")
def train_cmd(
    out: Path = typer.Option(..., help="Float checkpoint to write"),
    epochs: Optional[int] = typer.Option(None, help="Training epochs"),
    config_file: Optional[Path] = ConfigOpt,
    data_dir: Optional[str] = DataDirOpt,
    seed: Optional[int] = SeedOpt,
):
    """Pre-train the reference CNN in float."""
    cfg = _config(config_file, epochs=epochs, data_dir=data_dir, base_seed=seed)
    train_set, test_set = pipeline.datasets(cfg)
    net = pipeline.pretrain(cfg, train_set)
    store.save_float(net, out)
    typer.echo(f"float accuracy: {evaluate_float(net, test_set):.4f}")
    typer.echo(f"wrote {out}")


@app.command("quantize")
def quantize_cmd(
    model: Path = typer.Argument(help="Float checkpoint"),
    out: Path = typer.Option(..., help="Quantized model file to write"),
    config_file: Optional[Path] = ConfigOpt,
    data_dir: Optional[str] = DataDirOpt,
):
    """Quantize a float checkpoint to int8 (stored unprotected)."""
    cfg = _config(config_file, data_dir=data_dir)
    net = store.load_float(model)
    train_set, test_set = pipeline.datasets(cfg)
    qnet, acc = pipeline.quantize_baseline(net, train_set, test_set, cfg)
    store.save(qnet, ProtectionStrategy.FAULTY, out)
    typer.echo(f"int8 accuracy: {acc:.4f}")
    typer.echo(f"wrote {out}")


@app.command("wot")
def wot_cmd(
    model: Path = typer.Argument(help="Float checkpoint (pre-trained)"),
    out: Path = typer.Option(..., help="WOT-regularized quantized model to write"),
    float_out: Optional[Path] = typer.Option(None, help="Also write the float shadow weights"),
    census_csv: Optional[Path] = typer.Option(None, help="Census log CSV"),
    target: Optional[float] = typer.Option(None, help="Target accuracy (default: 8-bit baseline)"),
    max_epochs: Optional[int] = typer.Option(None, help="Epoch limit"),
    lam: Optional[float] = typer.Option(None, "--lambda", help="Frobenius regularization weight"),
    strict: bool = typer.Option(False, help="Exit 2 when the target is not reached"),
    config_file: Optional[Path] = ConfigOpt,
    data_dir: Optional[str] = DataDirOpt,
):
    """Quantization-aware training with throttling."""
    cfg = _config(config_file, max_epochs=max_epochs, lam=lam, data_dir=data_dir)
    net = store.load_float(model)
    train_set, test_set = pipeline.datasets(cfg)
    if target is None:
        _, target = pipeline.quantize_baseline(net, train_set, test_set, cfg)
    result = pipeline.regularize(net, train_set, test_set, cfg, target)
    store.save(result.qnet, ProtectionStrategy.FAULTY, out)
    if float_out:
        store.save_float(result.network, float_out)
    if census_csv:
        write_census_csv(result.log, census_csv)
    last = result.log[-1]
    typer.echo(f"iterations: {result.iterations}  large values: {result.log[0].large_count} -> {last.large_count}  "
               f"accuracy after throttle: {last.acc_after:.4f} (target {target:.4f})")
    typer.echo(f"wrote {out}")
    if not result.converged:
        typer.echo(f"warning: target accuracy {target:.4f} not reached; wrote best checkpoint", err=True)
        if strict:
            raise typer.Exit(2)


@app.command("export-data")
def export_data_cmd(
    out_dir: Path = typer.Option(..., help="Directory for the IDX files"),
    limit: Optional[int] = typer.Option(None, help="Keep only the first N samples of each split"),
    config_file: Optional[Path] = ConfigOpt,
    data_dir: Optional[str] = DataDirOpt,
):
    """Write the configured train and test sets as MNIST-style IDX files."""
    cfg = _config(config_file, data_dir=data_dir)
    for ds in pipeline.datasets(cfg):
        if limit is not None:
            ds = ds.head(limit)
        images, _ = datasets.save_idx_dir(ds, out_dir)
        typer.echo(f"{ds.split}: {len(ds)} samples -> {images.name}")
    typer.echo(f"wrote {out_dir}")


# --- Protection and faults ---

@app.command("protect")
def protect_cmd(
    model: Path = typer.Argument(help="Quantized model file"),
    strategy: Strategy = typer.Option(..., help="Protection strategy"),
    out: Path = typer.Option(..., help="Protected model file to write"),
    protect_biases: bool = typer.Option(True, help="Protect bias records with (72,64,1)"),
):
    """Re-store a model under a protection strategy."""
    qnet, _ = store.load_network(model)
    pm = apply_strategy_store(qnet, strategy.value, protect_biases)
    store.write_store(pm, out)
    typer.echo(f"{strategy.value}: {pm.weight_bytes} weight bytes, {pm.overhead_bytes} redundancy bytes "
               f"({pm.space_overhead_pct:.1f}% overhead)")
    typer.echo(f"wrote {out}")


@app.command("inject")
def inject_cmd(
    model: Path = typer.Argument(help="Protected model file"),
    rate: float = typer.Option(..., help="Fault rate (flips per stored bit)"),
    seed: int = typer.Option(..., help="Injection seed"),
    scope: FaultScope = typer.Option(FaultScope.ALL, help="Bits exposed to faults"),
    out: Path = typer.Option(..., help="Faulty model file to write"),
):
    """Flip random bits in a stored model."""
    pm = store.load(model)
    faulty, positions = inject_store(pm, FaultModel(rate, seed, scope))
    store.write_store(faulty, out)
    typer.echo(f"flipped {positions.size} of {pm.stored_bits(scope.value)} bits")
    typer.echo(f"wrote {out}")


@app.command("eval")
def eval_cmd(
    model: Path = typer.Argument(help="Model file (any strategy, or a float checkpoint)"),
    limit: Optional[int] = typer.Option(None, help="Evaluate only the first N test samples"),
    config_file: Optional[Path] = ConfigOpt,
    data_dir: Optional[str] = DataDirOpt,
):
    """Recover a stored model and report its test accuracy."""
    cfg = _config(config_file, data_dir=data_dir)
    _, test_set = pipeline.datasets(cfg)
    if store.inspect(model).strategy_tag == store.FLOAT_TAG:
        typer.echo(f"accuracy: {evaluate_float(store.load_float(model), test_set, limit):.4f}")
        return
    qnet, counters = store.load_network(model)
    typer.echo(f"accuracy: {evaluate(qnet, test_set, limit):.4f}")
    typer.echo(f"corrected: {counters.corrected}  detected_double: {counters.detected_double}  "
               f"detected_uncorrectable: {counters.detected_uncorrectable}  "
               f"parity_zeroed: {counters.parity_zeroed}")


@app.command("census")
def census_cmd(
    model: Path = typer.Argument(help="Quantized model file"),
    histogram_csv: Optional[Path] = typer.Option(None, help="Per-layer position histogram CSV"),
):
    """Count large weights (outside [-64, 63]) by block position."""
    qnet, _ = store.load_network(model)
    c = census(qnet)
    typer.echo(f"large values (positions 0-6): {c.large_count}")
    typer.echo("histogram: " + " ".join(str(h) for h in c.histogram))
    typer.echo(f"blocks with several large values: {c.crowded_blocks}")
    typer.echo("magnitude bands: " + "  ".join(
        f"{label} {pct:.2f}%" for label, pct in zip(("[0,32)", "[32,64)", "[64,128]"), c.bands)
    ))
    if histogram_csv:
        report.write_histogram_csv(qnet, histogram_csv)


@app.command("report")
def report_cmd(
    model: Path = typer.Argument(help="WOT-regularized quantized model file"),
    baseline: Optional[Path] = typer.Option(None, help="Pre-WOT quantized model; adds histogram_baseline.csv"),
    out_dir: Optional[Path] = typer.Option(None, help="Report directory (default OUTPUT_DIR)"),
    rate: Optional[list[float]] = typer.Option(None, help="Fault rate (repeatable)"),
    strategy: Optional[list[Strategy]] = typer.Option(None, help="Strategy (repeatable)"),
    trials: Optional[int] = typer.Option(None, help="Trials per cell"),
    scope: Optional[FaultScope] = typer.Option(None, help="Bits exposed to faults"),
    base_seed: Optional[int] = typer.Option(None, help="Trial t uses base_seed + t"),
    workers: Optional[int] = typer.Option(None, help="Evaluation threads"),
    config_file: Optional[Path] = ConfigOpt,
    data_dir: Optional[str] = DataDirOpt,
):
    """Fault sweep: trial, aggregate and histogram CSVs."""
    cfg = _config(
        config_file,
        output_dir=out_dir,
        rates=tuple(rate) if rate else None,
        strategies=tuple(s.value for s in strategy) if strategy else None,
        trials=trials,
        scope=scope.value if scope else None,
        base_seed=base_seed,
        workers=workers,
        data_dir=data_dir,
    )
    qnet, _ = store.load_network(model)
    _, test_set = pipeline.datasets(cfg)
    result = run_experiment(qnet, test_set, cfg.strategies, cfg.rates, cfg.trials, cfg.base_seed,
                            cfg.scope, cfg.workers, model_name=model.name.split(".")[0])
    out = Path(cfg.output_dir)
    report.write_trials_csv(result.trials, out / "trials.csv")
    report.write_aggregate_csv(result.aggregate, out / "aggregate.csv")
    report.write_histogram_csv(qnet, out / "histogram.csv")
    if baseline:
        base_qnet, _ = store.load_network(baseline)
        report.write_histogram_csv(base_qnet, out / "histogram_baseline.csv")
    typer.echo(f"clean accuracy: {result.clean_accuracy:.4f}  (drops in percentage points, scope {cfg.scope})")
    typer.echo(report.format_aggregate(result.aggregate))
    typer.echo(f"wrote {out}")


@app.command("pipeline")
def pipeline_cmd(
    config_file: Optional[Path] = ConfigOpt,
    output_dir: Optional[Path] = typer.Option(None, help="Artifact directory"),
    data_dir: Optional[str] = DataDirOpt,
):
    """Train, quantize, regularize and run the fault sweep in one go."""
    cfg = _config(config_file, output_dir=output_dir, data_dir=data_dir)
    result = pipeline.run_pipeline(cfg)
    typer.echo(f"baseline int8 accuracy: {result.baseline_accuracy:.4f}")
    if not result.wot.converged:
        typer.echo("warning: WOT did not reach the baseline; used the best checkpoint", err=True)
    typer.echo(report.format_aggregate(result.experiment.aggregate))
    for name, path in result.artifacts.items():
        typer.echo(f"{name}: {path}")


@app.command("inspect")
def inspect_cmd(model: Path = typer.Argument(help="Model file")):
    """Show a model file's header and records."""
    s = store.inspect(model)
    typer.echo(f"version {s.version}  strategy {s.strategy_name}  records {len(s.records)}  crc {s.crc:#010x}")
    for r in s.records:
        dims = "x".join(str(d) for d in r.dims)
        typer.echo(f"  {r.kind.name:<9} {dims:<14} scale {r.scale:.6g}  pad {r.pad}  "
                   f"payload {r.payload_bytes}  redundancy {r.redundancy_bytes}")


# --- Flows ---

@flows_app.command("deploy")
def flows_deploy():
    """Deploy the pipeline flow defined in prefect.yaml."""
    result = subprocess.run(["prefect", "deploy", "--all"], check=False)
    raise typer.Exit(result.returncode)


@flows_app.command("run")
def flows_run(
    name: str = typer.Argument("zsecc-pipeline/zsecc-pipeline", help="flow-name/deployment-name"),
):
    """Trigger a deployment run."""
    result = subprocess.run(["prefect", "deployment", "run", name], check=False)
    raise typer.Exit(result.returncode)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI; 0 success, 1 usage error, 2 runtime error."""
    try:
        rv = app(args=argv, prog_name="zsecc", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        typer.echo("aborted", err=True)
        return 1
    except ZseccError as e:
        typer.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 2
    except OSError as e:
        typer.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


def run() -> None:
    sys.exit(main())

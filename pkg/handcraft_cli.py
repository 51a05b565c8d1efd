"""
Command-line entry point.

    python handcraft_cli.py preprocess --dataset raw/ --out clean/
    python handcraft_cli.py train-gen  --dataset clean/ --out runs/gen.hckp --config exp.json
    python handcraft_cli.py synth      --dataset clean/ --generator runs/gen.hckp --out synth/
    python handcraft_cli.py train-slr  --dataset clean/ --synthetic synth/ --out runs/slr.hckp
    python handcraft_cli.py eval       --dataset clean/ --model runs/slr.hckp
    python handcraft_cli.py gradcheck
    python handcraft_cli.py compare    --dataset clean/ --synthetic synth/ --seeds 5
"""

import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Annotated, Callable, Optional, Sequence

import typer

import settings
from cmlpe import GenerationPair, build_synthetic_dataset, train_generator
from harness import (
    ExperimentConfig,
    MetricsLog,
    compare_protocols,
    evaluate_accuracy,
    evaluate_generator,
    load_checkpoint,
    preset,
    run_gradcheck_suite,
    save_checkpoint,
    train_baseline,
    train_two_phase,
)
from numcore import ConfigError, HandcraftError
from posedata import SPLITS, Sample, clean_sequence, filter_dataset, load_dataset, save_dataset, split_validation
from recognizers import Classifier

app = typer.Typer(no_args_is_help=True, add_completion=False,
                  help="Sign-language pose toolkit: generator, synthetic data and classifiers.")

DatasetOpt = Annotated[Path, typer.Option("--dataset", help="Dataset directory (manifest.json + samples/)")]
OutOpt = Annotated[Path, typer.Option("--out", help="Output path")]
SeedOpt = Annotated[int, typer.Option("--seed", min=0, help="Master random seed")]
ConfigOpt = Annotated[Optional[Path], typer.Option("--config", help="Experiment config JSON")]
PresetOpt = Annotated[str, typer.Option("--preset", help="Built-in protocol when no --config is given")]
KindOpt = Annotated[str, typer.Option("--model-kind", help="transformer-sl or mamba-sl")]


def _experiment(config: Optional[Path], dataset: Path, seed: int,
                preset_name: str = "toy", model_kind: str = "transformer-sl") -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(config) if config else preset(preset_name, model_kind)
    return replace(cfg, dataset=str(dataset), seed=seed)


def _reports_errors(command: Callable) -> Callable:
    """Turn toolkit errors into a one-line diagnostic and exit code 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except HandcraftError as e:
            typer.echo(f"❌ {e}", err=True)
            raise typer.Exit(code=1) from e
        except KeyboardInterrupt:
            typer.echo("\n⚠️  Interrupted by user. Exiting.", err=True)
            raise typer.Exit(code=1) from None

    return wrapper


def _load_pair(path: Path) -> GenerationPair:
    model = load_checkpoint(path)
    if not isinstance(model, GenerationPair):
        raise ConfigError(f"{path} holds a classifier, not a generator pair")
    return model


@app.command()
@_reports_errors
def preprocess(
    dataset: DatasetOpt,
    out: OutOpt,
    seed: SeedOpt = settings.DEFAULT_SEED,
    window: int = 15,
    polyorder: int = 3,
    center_on_body: bool = False,
    val_fraction: float = 0.0,
    min_per_class: int = 1,
    max_frames: Optional[int] = None,
):
    """Fill missing values, smooth, and optionally filter / carve a validation split."""
    data = load_dataset(dataset)
    settings.log(f"🚀 Cleaning {len(data.samples)} clips from {dataset}")

    def clean(sample: Sample) -> Sample:
        seq = clean_sequence(sample.sequence, window=window, polyorder=polyorder, center_on_body=center_on_body)
        return replace(sample, sequence=seq)

    with ThreadPoolExecutor(max_workers=settings.THREADS) as pool:
        samples = list(settings.progress(pool.map(clean, data.samples), total=len(data.samples), desc="clean"))
    data = replace(data, samples=samples)
    if min_per_class > 1 or max_frames is not None:
        data = filter_dataset(data, min_per_class=min_per_class, max_frames=max_frames)
    if val_fraction > 0:
        data = split_validation(data, fraction=val_fraction, seed=seed)
    save_dataset(data, out)
    typer.echo(f"✅ Wrote {len(data.samples)} clips, {data.num_classes} classes to {out}")


@app.command("train-gen")
@_reports_errors
def train_gen(
    dataset: DatasetOpt,
    out: OutOpt,
    seed: SeedOpt = settings.DEFAULT_SEED,
    config: ConfigOpt = None,
    steps: Optional[int] = None,
    log: Optional[Path] = None,
):
    """Train the forward/reversed generator pair and save it as a checkpoint."""
    data = load_dataset(dataset)
    cfg = _experiment(config, dataset, seed)
    gen_cfg = cfg.generator_config(data.num_classes)
    if steps is not None:
        gen_cfg = replace(gen_cfg, train_steps=steps)
    pair = GenerationPair.init(gen_cfg, seed)
    pair, trace = train_generator(pair, data.split_samples("train"), gen_cfg, seed=seed)
    save_checkpoint(pair, out)
    if log:
        metrics = MetricsLog(log)
        for record in trace:
            metrics.append(record)
    typer.echo(f"✅ Generator saved to {out} (final forward loss {trace[-1]['forward_loss']:.4f})"
               if trace else f"✅ Untrained generator saved to {out}")


@app.command()
@_reports_errors
def synth(
    dataset: DatasetOpt,
    out: OutOpt,
    generator: Annotated[Path, typer.Option("--generator", help="Generator checkpoint")],
    seed: SeedOpt = settings.DEFAULT_SEED,
    config: ConfigOpt = None,
    n_per_class: Optional[int] = None,
):
    """Write a class-balanced synthetic dataset generated from the real train split."""
    data = load_dataset(dataset)
    if n_per_class is None and config:
        n_per_class = ExperimentConfig.from_json(config).n_per_class
    pair = _load_pair(generator)
    synthetic = build_synthetic_dataset(pair, data, n_per_class=n_per_class, seed=seed)
    save_dataset(synthetic, out)
    typer.echo(f"✅ Wrote {len(synthetic.samples)} synthetic clips to {out}")


@app.command("train-slr")
@_reports_errors
def train_slr(
    dataset: DatasetOpt,
    out: OutOpt,
    seed: SeedOpt = settings.DEFAULT_SEED,
    config: ConfigOpt = None,
    synthetic: Annotated[Optional[Path], typer.Option("--synthetic", help="Synthetic dataset for pretraining")] = None,
    preset_name: PresetOpt = "toy",
    model_kind: KindOpt = "transformer-sl",
    log: Optional[Path] = None,
):
    """Train a classifier: two-phase with --synthetic, real-data baseline without."""
    data = load_dataset(dataset)
    cfg = _experiment(config, dataset, seed, preset_name, model_kind)
    log_path = log or Path(settings.LOG_DIR) / f"{out.stem}.metrics.jsonl"
    if synthetic is None:
        if cfg.synthetic_pretrain_steps:
            settings.log("⚠️  No --synthetic dataset given, running the real-data baseline")
        model, metrics = train_baseline(cfg, data, log_path)
    else:
        model, metrics = train_two_phase(cfg, data, load_dataset(synthetic), log_path)
    save_checkpoint(model, out)
    validations = metrics.validations()
    summary = f", val accuracy {validations[-1]['val_accuracy']:.4f}" if validations else ""
    typer.echo(f"✅ Classifier saved to {out}{summary}; metrics in {log_path}")


@app.command("eval")
@_reports_errors
def evaluate(
    dataset: DatasetOpt,
    model: Annotated[Path, typer.Option("--model", help="Classifier or generator checkpoint")],
    split: str = "test",
    seed: Annotated[int, typer.Option("--seed", min=0, help="Unused, evaluation is deterministic")] = 0,
    out: Annotated[Optional[Path], typer.Option("--out", help="Optional JSON report")] = None,
):
    """Accuracy for a classifier checkpoint, MPJPE per direction for a generator."""
    if split not in SPLITS:
        raise typer.BadParameter(f"split must be one of {SPLITS}", param_hint="--split")
    data = load_dataset(dataset)
    loaded = load_checkpoint(model)
    samples = data.split_samples(split)
    if isinstance(loaded, Classifier):
        accuracy = evaluate_accuracy(loaded, samples)
        report = {"split": split, "accuracy": accuracy}
        typer.echo(f"{accuracy:.4f}")
    else:
        result = evaluate_generator(loaded, samples)
        report = {"split": split, **result.to_dict()}
        typer.echo(f"forward MPJPE {result.forward_mpjpe:.6f}  reversed MPJPE {result.reversed_mpjpe:.6f}")
    if out:
        out.write_text(json.dumps(report, ensure_ascii=False, indent=2), encoding="utf-8")


@app.command()
@_reports_errors
def gradcheck(
    seed: SeedOpt = settings.DEFAULT_SEED,
    samples_per_param: int = 6,
):
    """Compare reverse-mode gradients with finite differences; exit 1 on any failure."""
    results = run_gradcheck_suite(seed=seed, samples_per_param=samples_per_param)
    for r in results:
        typer.echo(f"{r['check']:<16} {r['max_rel_error']:.3e} {'ok' if r['ok'] else 'FAIL'}")
    failed = [r["check"] for r in results if not r["ok"]]
    if failed:
        typer.echo(f"❌ Gradient check failed: {', '.join(failed)}", err=True)
        raise typer.Exit(code=1)


@app.command()
@_reports_errors
def compare(
    dataset: DatasetOpt,
    synthetic: Annotated[Path, typer.Option("--synthetic", help="Synthetic dataset for pretraining")],
    seed: SeedOpt = settings.DEFAULT_SEED,
    config: ConfigOpt = None,
    seeds: int = 5,
    grid: bool = False,
    preset_name: PresetOpt = "toy",
    model_kind: KindOpt = "transformer-sl",
    out: Annotated[Optional[Path], typer.Option("--out", help="Optional JSON report")] = None,
):
    """Baseline vs two-phase test accuracy over consecutive seeds."""
    data = load_dataset(dataset)
    cfg = _experiment(config, dataset, seed, preset_name, model_kind)
    report = compare_protocols(cfg, data, load_dataset(synthetic), range(seed, seed + seeds), augment_grid=grid)
    for key, value in report["median"].items():
        typer.echo(f"{key:<20} median test accuracy {value:.4f}")
    if out:
        out.write_text(json.dumps(report, ensure_ascii=False, indent=2), encoding="utf-8")


def cli(argv: Sequence[str] | None = None) -> int:
    """Run the app and return its exit code: 1 for toolkit errors, 2 for usage errors."""
    command = typer.main.get_command(app)
    try:
        command.main(args=list(sys.argv[1:] if argv is None else argv), prog_name="handcraft", standalone_mode=True)
    except SystemExit as e:
        if e.code is None or isinstance(e.code, int):
            return e.code or 0
        typer.echo(e.code, err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(cli())

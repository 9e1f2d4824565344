from __future__ import annotations

import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import click
import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel

from viewcluster.config import (
    PipelineConfig,
    SynthConfig,
    default_out_dir,
    load_pipeline_config,
)
from viewcluster.core import Dataset
from viewcluster.evaluation import (
    EvaluationError,
    MetricsReport,
    RetrievalProtocol,
    ami,
    evaluate_retrieval,
)
from viewcluster.ingest import IngestError, load_dataset, read_labels, write_dataset, write_report
from viewcluster.pipeline import (
    run_ablation,
    run_baseline_global,
    run_pipeline,
    SWEEPABLE,
    sweep_parameter,
    sweep_viewpoint_error,
)
from viewcluster.report import show_ablation, show_manifest, show_metrics, show_sweep
from viewcluster.synth import SynthError, generate, inject_viewpoint_errors
from viewcluster.validator import DatasetError

console = Console()

EXIT_CODES = {"internal": 1, "config": 2, "ingest": 3, "validation": 4, "evaluation": 5}

OVERRIDE_FIELDS = {
    "k": "k",
    "k_tilde": "k_tilde",
    "ti": "ti",
    "ti_quantile": "ti_quantile",
    "beta": "beta",
    "eps": "eps",
    "eps_quantile": "eps_quantile",
    "min_pts": "min_pts",
    "epochs": "recognition_epochs",
    "recognition_rate": "recognition_rate",
    "iterations": "iterations",
    "refine_rate": "refine_rate",
    "refine_passes": "refine_passes",
    "seed": "seed",
}


def _category(exc: Exception) -> str:
    if isinstance(exc, (ValidationError, SynthError, json.JSONDecodeError)):
        return "config"
    if isinstance(exc, (IngestError, OSError)):
        return "ingest"
    if isinstance(exc, DatasetError):
        return "validation"
    if isinstance(exc, EvaluationError):
        return "evaluation"
    return "internal"


@contextmanager
def _reporting_errors() -> Iterator[None]:
    try:
        yield
    except (click.ClickException, click.exceptions.Exit):
        raise
    except Exception as e:
        category = _category(e)
        console.print(f"[bold red]Error ({category}): {e}[/bold red]")
        click.echo(json.dumps({"error": category, "message": str(e)}), err=True)
        sys.exit(EXIT_CODES[category])


def _parse_list(text: str, kind: type) -> list:
    try:
        return [kind(tok.strip()) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list, got {text!r}") from None


def dataset_options(required: bool = True):
    def decorate(f):
        options = [
            click.option(
                "--embeddings",
                type=click.Path(exists=True, dir_okay=False),
                required=required,
                help="Binary embedding file (VAPC format).",
            ),
            click.option(
                "--meta",
                type=click.Path(exists=True, dir_okay=False),
                required=required,
                help="JSON-lines metadata file.",
            ),
        ]
        for option in reversed(options):
            f = option(f)
        return f

    return decorate


def pipeline_options(f):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="JSON file with PipelineConfig fields."),
        click.option("--k", type=int, default=None, help="k for k-reciprocal neighbors (default 20)."),
        click.option("--k-tilde", type=int, default=None, help="Reciprocal depth for noise selection (default 2)."),
        click.option("--ti", type=int, default=None, help="Rank of the cross-viewpoint pair fixing tau (default 1200)."),
        click.option("--ti-quantile", type=float, default=None, help="Set tau rank as a fraction of cross-viewpoint pairs."),
        click.option("--beta", type=float, default=None, help="Memory softmax temperature (default 0.1)."),
        click.option("--eps", type=float, default=None, help="DBSCAN radius (default 0.5)."),
        click.option("--eps-quantile", type=float, default=None, help="Adaptive DBSCAN radius from the lowest distance fraction."),
        click.option("--min-pts", type=int, default=None, help="DBSCAN minimum neighborhood size (default 4)."),
        click.option("--epochs", type=int, default=None, help="Recognition-stage epochs (default 20)."),
        click.option("--recognition-rate", type=float, default=None, help="Recognition-stage step size (default 0.001)."),
        click.option("--iterations", type=int, default=None, help="Clustering iterations (default 10)."),
        click.option("--refine-rate", type=float, default=None, help="Refinement step size (default 0.5)."),
        click.option("--refine-passes", type=int, default=None, help="Refinement passes per iteration (default 1)."),
        click.option("--seed", type=int, default=None, help="Seed for viewpoint-error injection."),
        click.option("--no-kreciprocal", is_flag=True, default=False, help="Cluster on raw squared distances."),
        click.option("--no-noise-selection", is_flag=True, default=False, help="Turn DBSCAN noise into singletons."),
        click.option("--no-restrict-noise-merges", is_flag=True, default=False,
                     help="Let clusters made by noise selection merge with every cross-viewpoint candidate."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def build_config(
    config_path: str | None,
    no_kreciprocal: bool,
    no_noise_selection: bool,
    no_restrict_noise_merges: bool = False,
    **flags,
) -> PipelineConfig:
    base = load_pipeline_config(config_path) if config_path else PipelineConfig()
    data = base.model_dump()
    for flag, field_name in OVERRIDE_FIELDS.items():
        value = flags.get(flag)
        if value is not None:
            data[field_name] = value
    if no_kreciprocal:
        data["use_kreciprocal"] = False
    if no_noise_selection:
        data["use_noise_selection"] = False
    if no_restrict_noise_merges:
        data["restrict_noise_merges"] = False
    return PipelineConfig(**data)


def _synthetic_datasets(seeds: list[int], samples: int, noise: float, identities: int) -> list[Dataset]:
    datasets = []
    for seed in seeds:
        cfg = SynthConfig(
            seed=seed,
            samples_per_identity_viewpoint=samples,
            within_cluster_noise=noise,
            identities=identities,
        )
        embeddings, meta = generate(cfg)
        datasets.append(Dataset(embeddings, tuple(meta)))
    return datasets


def _resolve_datasets(embeddings, meta, seeds, samples, noise, identities) -> list[Dataset]:
    if embeddings and meta:
        return [load_dataset(embeddings, meta)]
    if embeddings or meta:
        raise click.UsageError("--embeddings and --meta must be given together.")
    console.print("[dim]No dataset given; generating synthetic datasets.[/dim]")
    return _synthetic_datasets(_parse_list(seeds, int), samples, noise, identities)


def synthetic_options(f):
    options = [
        click.option("--seeds", default="7", show_default=True, help="Synthetic dataset seeds (comma-separated)."),
        click.option("--samples", type=int, default=10, show_default=True, help="Synthetic samples per identity-viewpoint."),
        click.option("--noise", type=float, default=0.1, show_default=True, help="Synthetic within-cluster noise."),
        click.option("--identities", type=int, default=50, show_default=True, help="Synthetic identity count."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


@click.group()
def main():
    pass


def _run_command(mode: str, embeddings, meta, out_dir, **kwargs) -> None:
    label = "Progressive clustering" if mode == "progressive" else "Global baseline"
    console.print(Panel(f"[bold]viewcluster[/bold] - {label}", style="cyan"))
    with _reporting_errors():
        cfg = build_config(**kwargs)
        dataset = load_dataset(embeddings, meta)
        out = Path(out_dir) if out_dir else default_out_dir()
        runner = run_pipeline if mode == "progressive" else run_baseline_global
        result = runner(dataset, cfg, out_dir=out)
        show_manifest(result.manifest)


@main.command()
@dataset_options()
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Artifact directory.")
@pipeline_options
def run(embeddings, meta, out_dir, **kwargs) -> None:
    """Run viewpoint-aware progressive clustering."""
    _run_command("progressive", embeddings, meta, out_dir, **kwargs)


@main.command()
@dataset_options()
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Artifact directory.")
@pipeline_options
def baseline(embeddings, meta, out_dir, **kwargs) -> None:
    """Cluster all train samples together, without viewpoint periods."""
    _run_command("global", embeddings, meta, out_dir, **kwargs)


@main.command()
@dataset_options(required=False)
@synthetic_options
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Where to write ablation.json.")
@pipeline_options
def ablate(embeddings, meta, seeds, samples, noise, identities, out_dir, **kwargs) -> None:
    """Compare the full pipeline against its ablated arms."""
    with _reporting_errors():
        cfg = build_config(**kwargs)
        datasets = _resolve_datasets(embeddings, meta, seeds, samples, noise, identities)
        with console.status("Running ablation arms...", spinner="dots"):
            report = run_ablation(datasets, cfg)
        show_ablation(report)
        out = Path(out_dir) if out_dir else default_out_dir()
        write_report(out / "ablation.json", report)


@main.command("sweep-viewpoint-error")
@dataset_options(required=False)
@synthetic_options
@click.option("--rates", default="0,0.1,0.3,0.5", show_default=True, help="Error rates (comma-separated).")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Where to write sweep.json.")
@pipeline_options
def sweep(embeddings, meta, seeds, samples, noise, identities, rates, out_dir, **kwargs) -> None:
    """Measure final AMI as viewpoint labels get corrupted."""
    with _reporting_errors():
        cfg = build_config(**kwargs)
        rate_list = _parse_list(rates, float)
        datasets = _resolve_datasets(embeddings, meta, seeds, samples, noise, identities)
        with console.status("Sweeping viewpoint error rates...", spinner="dots"):
            report = sweep_viewpoint_error(datasets, cfg, rate_list)
        show_sweep(report)
        out = Path(out_dir) if out_dir else default_out_dir()
        write_report(out / "sweep.json", report)


@main.command("sweep-param")
@dataset_options(required=False)
@synthetic_options
@click.option("--name", "param_name", type=click.Choice(SWEEPABLE), required=True, help="PipelineConfig field to vary.")
@click.option("--values", required=True, help="Values to try (comma-separated).")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Where to write the sweep report.")
@pipeline_options
def sweep_param(embeddings, meta, seeds, samples, noise, identities, param_name, values, out_dir, **kwargs) -> None:
    """Measure final AMI while one pipeline parameter varies."""
    with _reporting_errors():
        cfg = build_config(**kwargs)
        value_list = _parse_list(values, float)
        datasets = _resolve_datasets(embeddings, meta, seeds, samples, noise, identities)
        with console.status(f"Sweeping {param_name}...", spinner="dots"):
            report = sweep_parameter(datasets, cfg, param_name, value_list)
        show_sweep(report)
        out = Path(out_dir) if out_dir else default_out_dir()
        write_report(out / f"sweep_{param_name}.json", report)


@main.command("eval")
@dataset_options()
@click.option("--protocol", type=click.Choice(["cross_camera", "all_gallery"]), default="cross_camera",
              show_default=True, help="Gallery filtering rule.")
@click.option("--ranks", default="1,5,20", show_default=True, help="CMC ranks (comma-separated).")
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Labels CSV to score against ground-truth ids (AMI).")
@click.option("--normalizer", type=click.Choice(["arithmetic", "max"]), default="arithmetic", show_default=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the metrics report JSON here.")
def evaluate(embeddings, meta, protocol, ranks, labels_path, normalizer, report_path) -> None:
    """Score retrieval (mAP, CMC) and optionally a labeling (AMI)."""
    with _reporting_errors():
        dataset = load_dataset(embeddings, meta)
        score = None
        iteration = None
        if labels_path:
            table = read_labels(labels_path)
            by_index = {m.index: m for m in dataset.meta}
            missing = [int(i) for i in table.index if int(i) not in by_index]
            if missing:
                raise EvaluationError(f"labels reference unknown indices {missing[:5]}")
            gt = [by_index[int(i)].gt_id for i in table.index]
            if any(g is None for g in gt):
                raise EvaluationError("AMI needs an id for every labeled sample")
            _, gt_codes = np.unique(np.asarray(gt, dtype=str), return_inverse=True)
            score = ami(gt_codes.reshape(-1), table.label, normalizer)
            iteration = table.iteration

        has_retrieval = any(m.split == "query" for m in dataset.meta)
        if has_retrieval:
            report = evaluate_retrieval(
                dataset.embeddings,
                dataset.meta,
                RetrievalProtocol(protocol),
                _parse_list(ranks, int),
                ami_value=score,
                iteration=iteration,
            )
        elif score is not None:
            report = MetricsReport(ami=score, iteration=iteration)
        else:
            raise EvaluationError("nothing to evaluate: no query samples and no --labels")
        show_metrics(report)
        if report_path:
            write_report(report_path, report)


@main.command()
@click.option("--out-dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--identities", type=int, default=50, show_default=True)
@click.option("--viewpoints", default="front,front_side,side,rear_side,rear", show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--samples", type=int, default=10, show_default=True, help="Samples per identity-viewpoint.")
@click.option("--cameras", type=int, default=4, show_default=True)
@click.option("--test-identities", type=int, default=0, show_default=True)
@click.option("--identity-spread", type=float, default=1.0, show_default=True)
@click.option("--viewpoint-offset", type=float, default=1.1, show_default=True)
@click.option("--noise", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--error-rate", type=float, default=0.0, show_default=True,
              help="Fraction of train viewpoints to corrupt.")
def gen(out_dir, identities, viewpoints, dim, samples, cameras, test_identities,
        identity_spread, viewpoint_offset, noise, seed, error_rate) -> None:
    """Generate a synthetic dataset with the viewpoint dilemma."""
    with _reporting_errors():
        cfg = SynthConfig(
            identities=identities,
            viewpoints=_parse_list(viewpoints, str),
            dim=dim,
            samples_per_identity_viewpoint=samples,
            cameras=cameras,
            test_identities=test_identities,
            identity_spread=identity_spread,
            viewpoint_offset_scale=viewpoint_offset,
            within_cluster_noise=noise,
            seed=seed,
        )
        embeddings, meta = generate(cfg)
        if error_rate > 0:
            meta = inject_viewpoint_errors(meta, error_rate, seed)
        emb_path, meta_path = write_dataset(out_dir, embeddings, meta)
        console.print(f"[green]Wrote {embeddings.n} samples to {emb_path} and {meta_path}[/green]")

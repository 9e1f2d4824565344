from __future__ import annotations

from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from viewcluster.evaluation import MetricsReport
from viewcluster.pipeline import AblationReport, RunManifest, SweepReport

console = Console()


def _fmt(value: float | None, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def manifest_table(manifest: RunManifest) -> Table:
    table = Table(title=f"{manifest.mode} run, {manifest.samples} samples", show_lines=False)
    table.add_column("iter", justify="right")
    table.add_column("clusters", justify="right")
    table.add_column("noise", justify="right")
    table.add_column("joined", justify="right")
    table.add_column("new", justify="right")
    table.add_column("single", justify="right")
    table.add_column("candidates", justify="right")
    table.add_column("merges", justify="right")
    table.add_column("held", justify="right")
    table.add_column("AMI", justify="right")
    for r in manifest.iterations:
        style = "bold green" if r.iteration == manifest.selected_iteration else None
        table.add_row(
            str(r.iteration),
            str(r.clusters),
            str(r.noise_before_selection),
            str(r.noise_joined),
            str(r.noise_new_clusters),
            str(r.noise_singletons),
            str(r.merge_candidates),
            str(r.merges),
            str(r.merges_held_back),
            _fmt(r.ami),
            style=style,
        )
    return table


def show_manifest(manifest: RunManifest) -> None:
    console.print(manifest_table(manifest))
    summary = Text()
    summary.append(f"tau: {_fmt(manifest.tau)}")
    if manifest.tau_rank is not None:
        summary.append(f" (rank {manifest.tau_rank} of {manifest.tau_pair_count})", style="dim")
    summary.append(f"\nselected iteration: {manifest.selected_iteration}")
    summary.append(f"\nfinal AMI: {_fmt(manifest.final_ami)}")
    console.print(Panel(summary, title="Summary", border_style="cyan", expand=False))
    for event in manifest.events:
        console.print(f"[yellow]! {event}[/yellow]")


def show_metrics(report: MetricsReport) -> None:
    table = Table(title="Retrieval metrics")
    table.add_column("metric")
    table.add_column("value", justify="right")
    if report.mean_ap is not None:
        table.add_row("mAP", _fmt(report.mean_ap))
    for rank, value in sorted(report.cmc.items()):
        table.add_row(f"Rank-{rank}", _fmt(value))
    if report.ami is not None:
        table.add_row("AMI", _fmt(report.ami))
    table.add_row("queries", str(report.queries))
    if report.excluded_queries:
        table.add_row("excluded", str(report.excluded_queries), style="yellow")
    console.print(table)


def show_ablation(report: AblationReport) -> None:
    table = Table(title="Ablation (final AMI)")
    table.add_column("arm")
    table.add_column("mode")
    table.add_column("mean", justify="right")
    table.add_column("per dataset")
    for arm in report.arms:
        table.add_row(
            arm.arm,
            arm.mode,
            _fmt(arm.mean_ami),
            " ".join(_fmt(v, 3) for v in arm.final_ami),
        )
    console.print(table)


def show_sweep(report: SweepReport) -> None:
    title = "Viewpoint-error sweep" if report.parameter == "error_rate" else f"{report.parameter} sweep"
    table = Table(title=f"{title} (final AMI)")
    table.add_column(report.parameter.replace("_", " "), justify="right")
    table.add_column("mean", justify="right")
    table.add_column("per dataset")
    for point in report.points:
        table.add_row(
            f"{point.value:g}",
            _fmt(point.mean_ami),
            " ".join(_fmt(v, 3) for v in point.final_ami),
        )
    console.print(table)

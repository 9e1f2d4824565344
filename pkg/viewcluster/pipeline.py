from __future__ import annotations

import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console

from viewcluster.cluster import (
    TauResult,
    compute_tau,
    first_period,
    group_metrics,
    noise_select,
    noise_to_singletons,
    second_period,
)
from viewcluster.config import PipelineConfig, console_quiet
from viewcluster.core import Dataset, EmbeddingSet, partition_by_viewpoint
from viewcluster.evaluation import EvaluationError, MetricsReport, ami
from viewcluster.ingest import write_embeddings, write_labels, write_report
from viewcluster.memory import build_class_memory, recognition_stage, refine_features
from viewcluster.synth import inject_viewpoint_errors
from viewcluster.validator import validate_dataset

console = Console(quiet=console_quiet())
_silent = Console(quiet=True)

RunMode = Literal["progressive", "global"]

GLOBAL_GROUP = "all"


class IterationRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    iteration: int
    clusters: int
    noise_before_selection: int
    noise_joined: int = 0
    noise_new_clusters: int = 0
    noise_singletons: int = 0
    merge_candidates: int = 0
    merges: int = 0
    merges_held_back: int = 0
    tau: float | None = None
    ami: float | None = None


class RunManifest(BaseModel):
    mode: RunMode
    config: PipelineConfig
    samples: int
    viewpoints: list[str]
    tau: float | None = None
    tau_rank: int | None = None
    tau_pair_count: int | None = None
    recognition_losses: list[float] = Field(default_factory=list)
    iterations: list[IterationRecord] = Field(default_factory=list)
    selected_iteration: int = 0
    metrics: MetricsReport | None = None
    events: list[str] = Field(default_factory=list)

    @property
    def final_ami(self) -> float | None:
        return self.metrics.ami if self.metrics is not None else None

    def taus(self) -> set[float]:
        values = {r.tau for r in self.iterations if r.tau is not None}
        if self.tau is not None:
            values.add(self.tau)
        return values


@dataclass
class RunResult:
    manifest: RunManifest
    labels: np.ndarray
    iteration_labels: list[np.ndarray]
    embeddings: EmbeddingSet
    source_index: tuple[int, ...]
    timings: dict[str, float] = field(default_factory=dict)


class ArmResult(BaseModel):
    arm: str
    mode: RunMode
    final_ami: list[float]

    @property
    def mean_ami(self) -> float:
        return float(np.mean(self.final_ami))


class AblationReport(BaseModel):
    arms: list[ArmResult]

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.arm == name:
                return a
        raise KeyError(name)


class SweepPoint(BaseModel):
    value: float
    final_ami: list[float]

    @property
    def mean_ami(self) -> float:
        return float(np.mean(self.final_ami))


class SweepReport(BaseModel):
    parameter: str
    points: list[SweepPoint]


class _Stopwatch:
    def __init__(self) -> None:
        self.totals: dict[str, float] = defaultdict(float)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - start


def _flag(out: Console, events: list[str], message: str) -> None:
    events.append(message)
    out.print(f"[yellow]{message}[/yellow]")


def _run(dataset: Dataset, cfg: PipelineConfig, mode: RunMode, quiet: bool) -> RunResult:
    out = _silent if quiet else console
    watch = _Stopwatch()
    events: list[str] = []

    with watch.stage("validate"):
        validate_dataset(dataset.embeddings, dataset.meta).raise_if_failed()
        view = dataset.train_view()
        partition = partition_by_viewpoint(view.meta)
    viewpoint_of = view.viewpoints
    groups = dict(partition) if mode == "progressive" else {GLOBAL_GROUP: list(range(view.embeddings.n))}
    out.print(
        f"[bold]{mode.capitalize()} run:[/bold] {view.embeddings.n} train samples, "
        f"{len(partition)} viewpoint(s)"
    )

    with watch.stage("recognition"):
        recognition = recognition_stage(
            view.embeddings, cfg.recognition_epochs, cfg.beta, cfg.recognition_rate, quiet=quiet
        )
    features = recognition.embeddings
    if recognition.floor_events:
        events.append(f"{recognition.floor_events} loss evaluations hit the probability floor")
    if recognition.memory.degenerate_updates:
        events.append(f"{recognition.memory.degenerate_updates} degenerate memory updates kept the old slot")

    tau: TauResult | None = None
    if mode == "progressive":
        if len(partition) >= 2:
            with watch.stage("tau"):
                tau = compute_tau(features, partition, cfg.ti, cfg.ti_quantile, quiet=quiet)
            out.print(
                f"[dim]tau = {tau.tau:.4f} (rank {tau.rank} of {tau.pair_count} cross-viewpoint pairs)[/dim]"
            )
            if tau.clamped:
                events.append(f"ti clamped to the largest of {tau.pair_count} cross-viewpoint pairs")
        else:
            _flag(out, events, "second period skipped: fewer than two viewpoints")

    gt = view.gt_labels()
    n = view.embeddings.n
    records: list[IterationRecord] = []
    labelings: list[np.ndarray] = []

    for it in range(1, cfg.iterations + 1):
        out.print(f"[bold]Iteration {it}/{cfg.iterations}[/bold]")
        with watch.stage("first_period"):
            metrics = group_metrics(features, groups, cfg)
            state = first_period(features, groups, cfg, metrics, viewpoint_of=viewpoint_of, quiet=quiet)
        noise_before = len(state.noise_indices())

        guarded: set[int] = set()
        with watch.stage("noise_selection"):
            if cfg.use_noise_selection:
                selection = noise_select(state, metrics, groups, cfg.k_tilde, quiet=quiet)
                state = selection.state.compact()
                if cfg.restrict_noise_merges:
                    guarded = {int(state.labels[i]) for i in selection.formed_members}
                counts = dict(
                    noise_joined=selection.joined,
                    noise_new_clusters=selection.formed,
                    noise_singletons=selection.singletons,
                )
            else:
                state = noise_to_singletons(state).compact()
                counts = dict(noise_singletons=noise_before)

        if tau is not None:
            with watch.stage("second_period"):
                merged = second_period(state, features, tau.tau, guarded=guarded, quiet=quiet)
                state = merged.state
            counts.update(
                merge_candidates=len(merged.candidates),
                merges=merged.merges,
                merges_held_back=merged.held_back,
            )

        with watch.stage("refine"):
            for _ in range(cfg.refine_passes):
                memory = build_class_memory(features, state, cfg.beta)
                features = refine_features(features, state, memory, cfg.refine_rate)

        score = None
        if gt is not None and n >= 2:
            with watch.stage("evaluate"):
                score = ami(gt, state.labels, cfg.ami_normalizer)
        record = IterationRecord(
            iteration=it,
            clusters=state.num_clusters,
            noise_before_selection=noise_before,
            tau=tau.tau if tau is not None else None,
            ami=score,
            **counts,
        )
        records.append(record)
        labelings.append(state.labels.copy())
        ami_text = f", AMI {score:.4f}" if score is not None else ""
        out.print(
            f"[dim]  {state.num_clusters} clusters, {noise_before} noise, "
            f"{record.merges} merges{ami_text}[/dim]"
        )

    selected = _select_iteration(records)
    if selected == 0:
        labels = np.arange(n, dtype=np.int64)
        final_ami = ami(gt, labels, cfg.ami_normalizer) if gt is not None and n >= 2 else None
    else:
        labels = labelings[selected - 1]
        final_ami = records[selected - 1].ami

    manifest = RunManifest(
        mode=mode,
        config=cfg,
        samples=n,
        viewpoints=[vp.value for vp in partition],
        tau=tau.tau if tau is not None else None,
        tau_rank=tau.rank if tau is not None else None,
        tau_pair_count=tau.pair_count if tau is not None else None,
        recognition_losses=recognition.epoch_losses,
        iterations=records,
        selected_iteration=selected,
        metrics=MetricsReport(ami=final_ami, iteration=selected),
        events=events,
    )
    return RunResult(
        manifest=manifest,
        labels=labels,
        iteration_labels=labelings,
        embeddings=features,
        source_index=view.source_index,
        timings={k: round(v, 6) for k, v in watch.totals.items()},
    )


def _select_iteration(records: Sequence[IterationRecord]) -> int:
    if not records:
        return 0
    scored = [r for r in records if r.ami is not None]
    if not scored:
        return records[-1].iteration
    best = scored[0]
    for r in scored[1:]:
        if r.ami > best.ami:
            best = r
    return best.iteration


def run_pipeline(
    dataset: Dataset, cfg: PipelineConfig, out_dir: str | Path | None = None, quiet: bool = False
) -> RunResult:
    result = _run(dataset, cfg, "progressive", quiet)
    if out_dir is not None:
        write_run(result, out_dir, quiet)
    return result


def run_baseline_global(
    dataset: Dataset, cfg: PipelineConfig, out_dir: str | Path | None = None, quiet: bool = False
) -> RunResult:
    result = _run(dataset, cfg, "global", quiet)
    if out_dir is not None:
        write_run(result, out_dir, quiet)
    return result


def write_run(result: RunResult, out_dir: str | Path, quiet: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for it, labels in enumerate(result.iteration_labels, start=1):
        write_labels(out / f"labels_iter{it:02d}.csv", labels, it, result.source_index)
    write_labels(
        out / "labels.csv", result.labels, result.manifest.selected_iteration, result.source_index
    )
    write_report(out / "manifest.json", result.manifest)
    write_report(out / "timings.json", result.timings)
    write_embeddings(out / "embeddings_refined.bin", result.embeddings.data)
    (_silent if quiet else console).print(f"[green]Wrote run artifacts to {out}[/green]")
    return out


def read_manifest(path: str | Path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest.model_validate(json.load(f))


ABLATION_ARMS: dict[str, tuple[RunMode, dict[str, bool]]] = {
    "full": ("progressive", {}),
    "no_two_period": ("global", {}),
    "no_kreciprocal": ("progressive", {"use_kreciprocal": False}),
    "no_noise_selection": ("progressive", {"use_noise_selection": False}),
    "none": ("global", {"use_kreciprocal": False, "use_noise_selection": False}),
}


def _final_ami(result: RunResult) -> float:
    value = result.manifest.final_ami
    if value is None:
        raise EvaluationError("final AMI needs ground-truth ids on every train sample")
    return value


def run_ablation(
    datasets: Sequence[Dataset],
    cfg: PipelineConfig,
    arms: Sequence[str] | None = None,
    quiet: bool = True,
) -> AblationReport:
    out = _silent if quiet else console
    names = list(ABLATION_ARMS) if arms is None else list(arms)
    results = []
    for name in names:
        mode, overrides = ABLATION_ARMS[name]
        arm_cfg = cfg.model_copy(update=overrides)
        scores = [_final_ami(_run(ds, arm_cfg, mode, quiet)) for ds in datasets]
        out.print(f"[dim]{name}: mean AMI {np.mean(scores):.4f}[/dim]")
        results.append(ArmResult(arm=name, mode=mode, final_ami=scores))
    return AblationReport(arms=results)


def sweep_viewpoint_error(
    datasets: Sequence[Dataset],
    cfg: PipelineConfig,
    rates: Sequence[float],
    quiet: bool = True,
) -> SweepReport:
    out = _silent if quiet else console
    points = []
    for rate in rates:
        scores = []
        for offset, ds in enumerate(datasets):
            noisy = ds.with_meta(inject_viewpoint_errors(ds.meta, rate, cfg.seed + offset))
            scores.append(_final_ami(_run(noisy, cfg, "progressive", quiet)))
        out.print(f"[dim]error rate {rate:.2f}: mean AMI {np.mean(scores):.4f}[/dim]")
        points.append(SweepPoint(value=rate, final_ami=scores))
    return SweepReport(parameter="error_rate", points=points)


SWEEPABLE = ("ti", "ti_quantile", "k", "k_tilde", "eps", "eps_quantile", "min_pts", "beta", "refine_rate")


def sweep_parameter(
    datasets: Sequence[Dataset],
    cfg: PipelineConfig,
    name: str,
    values: Sequence[float],
    quiet: bool = True,
) -> SweepReport:
    """Final AMI of the progressive pipeline for each value of one config field."""
    if name not in SWEEPABLE:
        raise ValueError(f"cannot sweep {name!r}; choose one of {', '.join(SWEEPABLE)}")
    out = _silent if quiet else console
    points = []
    for value in values:
        # pydantic rejects fractional values for integer fields
        point_cfg = PipelineConfig.model_validate({**cfg.model_dump(), name: value})
        setting = getattr(point_cfg, name)
        scores = [_final_ami(_run(ds, point_cfg, "progressive", quiet)) for ds in datasets]
        out.print(f"[dim]{name}={setting}: mean AMI {np.mean(scores):.4f}[/dim]")
        points.append(SweepPoint(value=setting, final_ami=scores))
    return SweepReport(parameter=name, points=points)

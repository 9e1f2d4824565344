from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from rich.console import Console

from viewcluster.config import console_quiet
from viewcluster.core import EmbeddingSet, SampleMeta

console = Console(quiet=console_quiet())

IssueKind = Literal[
    "count_mismatch",
    "duplicate_index",
    "non_contiguous_index",
    "missing_viewpoint",
    "non_finite",
    "zero_norm",
    "not_normalized",
    "no_train_samples",
]


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class ValidationIssue:
    kind: IssueKind
    detail: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> set[str]:
        return {issue.kind for issue in self.issues}

    def add(self, kind: IssueKind, detail: str) -> None:
        self.issues.append(ValidationIssue(kind, detail))

    def raise_if_failed(self) -> None:
        if self.issues:
            lines = "; ".join(f"{i.kind}: {i.detail}" for i in self.issues[:10])
            more = f" (+{len(self.issues) - 10} more)" if len(self.issues) > 10 else ""
            raise DatasetError(f"Dataset failed validation: {lines}{more}")


def validate_dataset(
    embeddings: EmbeddingSet, meta: Sequence[SampleMeta]
) -> ValidationReport:
    report = ValidationReport()
    n = embeddings.n

    if len(meta) != n:
        report.add(
            "count_mismatch",
            f"{n} embedding rows but {len(meta)} metadata records",
        )

    counts = Counter(m.index for m in meta)
    for idx, c in sorted(counts.items()):
        if c > 1:
            report.add("duplicate_index", f"index {idx} appears {c} times")

    expected = set(range(len(meta)))
    present = set(counts)
    if present != expected:
        missing = sorted(expected - present)[:5]
        extra = sorted(present - expected)[:5]
        report.add(
            "non_contiguous_index",
            f"indices must cover 0..{len(meta) - 1}; missing {missing}, unexpected {extra}",
        )

    for m in meta:
        if m.split == "train" and m.viewpoint is None:
            report.add("missing_viewpoint", f"train sample {m.index} has no viewpoint")

    if not any(m.split == "train" for m in meta):
        report.add("no_train_samples", "dataset has no train split samples")

    finite = np.isfinite(embeddings.data).all(axis=1)
    for row in np.flatnonzero(~finite).tolist():
        report.add("non_finite", f"row {row} contains NaN or Inf")

    norms = np.linalg.norm(np.where(np.isfinite(embeddings.data), embeddings.data, 0.0), axis=1)
    for row in np.flatnonzero(finite & (norms == 0)).tolist():
        report.add("zero_norm", f"row {row} is all zeros and cannot be normalized")

    off_sphere = finite & (norms > 0) & (np.abs(norms - 1.0) > 1e-6)
    for row in np.flatnonzero(off_sphere).tolist():
        report.add("not_normalized", f"row {row} has L2 norm {norms[row]:.6g}")

    if report.issues:
        console.print(
            f"[yellow]Dataset validation found {len(report.issues)} issue(s).[/yellow]"
        )
    return report

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ValidationError
from rich.console import Console

from viewcluster.config import console_quiet
from viewcluster.core import Dataset, EmbeddingSet, SampleMeta, Viewpoint

console = Console(quiet=console_quiet())

MAGIC = b"VAPC"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sBII")
LABELS_HEADER = ["index", "label", "iteration"]


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class LabelTable:
    index: np.ndarray
    label: np.ndarray
    iteration: int


def write_embeddings(path: str | Path, rows: np.ndarray) -> Path:
    path = Path(path)
    data = np.ascontiguousarray(rows, dtype="<f4")
    if data.ndim != 2:
        raise IngestError(f"embeddings must be 2-D, got shape {data.shape}")
    n, d = data.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, d))
        f.write(data.tobytes(order="C"))
    return path


def read_embeddings(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"Embedding file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise IngestError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, d = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise IngestError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise IngestError(f"{path}: unsupported format version {version}")
    expected = n * d * 4
    payload = len(raw) - HEADER.size
    if payload < expected:
        raise IngestError(
            f"{path}: truncated payload, header says {n}x{d} "
            f"({expected} bytes) but {payload} bytes follow"
        )
    if payload > expected:
        raise IngestError(f"{path}: {payload - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4", count=n * d, offset=HEADER.size).reshape(n, d).copy()


def read_meta(path: str | Path) -> list[SampleMeta]:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"Metadata file not found: {path}")
    records: list[SampleMeta] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise IngestError(f"{path}:{lineno}: expected a JSON object")
            vp = obj.get("viewpoint")
            if vp is not None:
                try:
                    obj["viewpoint"] = Viewpoint.parse(str(vp))
                except ValueError:
                    raise IngestError(f"{path}:{lineno}: unknown viewpoint {vp!r}") from None
            if obj.get("id") is not None:
                obj["id"] = str(obj["id"])
            if obj.get("camera") is not None:
                obj["camera"] = str(obj["camera"])
            try:
                records.append(SampleMeta.model_validate(obj))
            except ValidationError as e:
                raise IngestError(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
    return records


def meta_record(m: SampleMeta) -> dict:
    record = m.model_dump(mode="json", by_alias=True)
    return {k: v for k, v in record.items() if v is not None}


def write_meta(path: str | Path, meta: Sequence[SampleMeta]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for m in meta:
            f.write(json.dumps(meta_record(m)) + "\n")
    return path


def load_dataset(embeddings_path: str | Path, meta_path: str | Path) -> Dataset:
    rows = read_embeddings(embeddings_path)
    meta = read_meta(meta_path)
    if len(meta) != rows.shape[0]:
        raise IngestError(
            f"{rows.shape[0]} embedding rows but {len(meta)} metadata records"
        )
    console.print(f"[dim]Loaded {rows.shape[0]} samples of dimension {rows.shape[1]}.[/dim]")
    return Dataset(EmbeddingSet.from_array(rows), tuple(meta))


def write_dataset(
    out_dir: str | Path, embeddings: EmbeddingSet, meta: Sequence[SampleMeta]
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    return (
        write_embeddings(out_dir / "embeddings.bin", embeddings.data),
        write_meta(out_dir / "meta.jsonl", meta),
    )


def write_labels(
    path: str | Path,
    labels: np.ndarray,
    iteration: int,
    source_index: Sequence[int] | None = None,
) -> Path:
    path = Path(path)
    labels = np.asarray(labels, dtype=np.int64)
    index = range(labels.size) if source_index is None else source_index
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LABELS_HEADER)
        for idx, label in zip(index, labels.tolist()):
            writer.writerow([int(idx), label, iteration])
    return path


def read_labels(path: str | Path) -> LabelTable:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"Labels file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != LABELS_HEADER:
            raise IngestError(f"{path}: expected header {','.join(LABELS_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise IngestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                rows.append([int(v) for v in row])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: non-integer field in {row}") from None
    table = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    iterations = set(table[:, 2].tolist())
    if len(iterations) > 1:
        raise IngestError(f"{path}: rows mix iterations {sorted(iterations)}")
    return LabelTable(table[:, 0], table[:, 1], iterations.pop() if iterations else 0)


def write_report(path: str | Path, report: BaseModel | dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(report, BaseModel):
        text = report.model_dump_json(indent=2)
    else:
        text = json.dumps(report, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path

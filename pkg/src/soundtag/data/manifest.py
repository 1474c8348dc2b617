"""Dataset manifests.

A manifest is a CSV file with the header ``sample_id,path,fold,split,labels``
where ``labels`` are semicolon-joined class ids (fine ids when the dataset has
a taxonomy). Leading ``# key: value`` lines carry dataset metadata
(``task_mode``, ``n_classes``, ``taxonomy`` and, when entry paths are relative
to a directory other than the manifest's own, ``root``).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..metrics import MULTILABEL, SINGLE_LABEL
from .taxonomy import Taxonomy

HEADER = ("sample_id", "path", "fold", "split", "labels")
SPLITS = ("train", "validate")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    fold: int
    split: str
    labels: tuple[int, ...]

    def row(self) -> list[str]:
        return [self.sample_id, self.path, str(self.fold), self.split, ";".join(str(c) for c in self.labels)]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    n_classes: int
    task_mode: str = MULTILABEL
    taxonomy: Taxonomy | None = None
    taxonomy_path: str | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("sample ids must be unique")
        folds = sorted({e.fold for e in self.entries})
        if folds and folds != list(range(len(folds))):
            raise ManifestError(f"fold indices must be contiguous from 0, got {folds}")
        if self.task_mode not in (MULTILABEL, SINGLE_LABEL):
            raise ManifestError(f"unknown task mode {self.task_mode!r}")
        if self.taxonomy is not None and self.taxonomy.n_fine != self.n_classes:
            raise ManifestError("taxonomy fine-class count differs from n_classes")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"{e.sample_id}: unknown split {e.split!r}")
            if any(not 0 <= c < self.n_classes for c in e.labels):
                raise ManifestError(f"{e.sample_id}: class id out of range")
            if self.task_mode == SINGLE_LABEL and len(e.labels) != 1:
                raise ManifestError(f"{e.sample_id}: single-label entry needs exactly one class")

    # -- views ------------------------------------------------------------
    @property
    def n_folds(self) -> int:
        return len({e.fold for e in self.entries})

    def fold_ids(self) -> list[int]:
        return sorted({e.fold for e in self.entries})

    def select(self, *, split: str | None = None, folds=None, exclude_folds=None) -> list[ManifestEntry]:
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if folds is not None and e.fold not in folds:
                continue
            if exclude_folds is not None and e.fold in exclude_folds:
                continue
            out.append(e)
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def label_matrix(self, entries=None) -> np.ndarray:
        """Multi-hot [n, n_classes] (fine level)."""
        entries = self.entries if entries is None else entries
        y = np.zeros((len(entries), self.n_classes), dtype=np.int64)
        for i, e in enumerate(entries):
            y[i, list(e.labels)] = 1
        return y

    def with_labels(self, new_labels: dict[str, tuple[int, ...]]) -> "DatasetManifest":
        entries = [replace(e, labels=tuple(sorted(new_labels[e.sample_id]))) if e.sample_id in new_labels else e
                   for e in self.entries]
        return replace(self, entries=entries)

    # -- io -----------------------------------------------------------------
    def dumps(self, root: Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# task_mode: {self.task_mode}\n")
        buf.write(f"# n_classes: {self.n_classes}\n")
        if root is not None:
            buf.write(f"# root: {root}\n")
        if self.taxonomy_path:
            buf.write(f"# taxonomy: {self.taxonomy_path}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADER)
        for e in self.entries:
            writer.writerow(e.row())
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        here = path.parent.resolve()
        root = Path(self.root).resolve()
        path.write_text(self.dumps(None if root == here else root))


def parse_labels(field_: str) -> tuple[int, ...]:
    field_ = field_.strip()
    return tuple(sorted(int(c) for c in field_.split(";") if c != "")) if field_ else ()


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    meta, body = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.reader(body)
    header = tuple(next(reader, ()))
    if header != HEADER:
        raise ManifestError(f"bad manifest header {header}, expected {HEADER}")
    entries = []
    for row in reader:
        if len(row) != len(HEADER):
            raise ManifestError(f"malformed manifest row {row}")
        try:
            entries.append(ManifestEntry(row[0], row[1], int(row[2]), row[3], parse_labels(row[4])))
        except ValueError as exc:
            raise ManifestError(f"malformed manifest row {row}: {exc}") from exc
    root = Path(meta["root"]) if "root" in meta else path.parent
    taxonomy = None
    tax_path = meta.get("taxonomy")
    if tax_path:
        tp = Path(tax_path)
        taxonomy = Taxonomy.load(tp if tp.is_absolute() else root / tp)
    n_classes = int(meta["n_classes"]) if "n_classes" in meta else (
        taxonomy.n_fine if taxonomy else 1 + max((c for e in entries for c in e.labels), default=0))
    return DatasetManifest(entries, n_classes, meta.get("task_mode", MULTILABEL), taxonomy, tax_path, root)

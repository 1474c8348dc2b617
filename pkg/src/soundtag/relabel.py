"""Crowdsourced-label handling: vote aggregation, best-checkpoint selection and
model-based relabeling that leaves expert-annotated clips untouched."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.taxonomy import Taxonomy

EXPERT = "expert"
ANNOTATION_HEADER = ("sample_id", "annotator_id", "class_id", "vote")


@dataclass
class SampleAnnotations:
    votes: dict[str, np.ndarray] = field(default_factory=dict)   # annotator id -> 0/1 per fine class
    expert_labels: np.ndarray | None = None

    @property
    def expert_flag(self) -> bool:
        return self.expert_labels is not None

    @property
    def n_annotators(self) -> int:
        return len(self.votes)


@dataclass
class AnnotationSet:
    n_fine: int
    samples: dict[str, SampleAnnotations] = field(default_factory=dict)

    def expert_ids(self) -> set[str]:
        return {sid for sid, a in self.samples.items() if a.expert_flag}

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ANNOTATION_HEADER)
            for sid, a in self.samples.items():
                for annotator, votes in a.votes.items():
                    for c, v in enumerate(votes):
                        w.writerow([sid, annotator, c, int(v)])
                if a.expert_labels is not None:
                    for c, v in enumerate(a.expert_labels):
                        w.writerow([sid, EXPERT, c, int(v)])


def load_annotations(path, n_fine: int) -> AnnotationSet:
    out = AnnotationSet(n_fine)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != ANNOTATION_HEADER:
            raise ValueError(f"bad annotation header {header}")
        for sid, annotator, cls, vote in reader:
            a = out.samples.setdefault(sid, SampleAnnotations())
            c = int(cls)
            if not 0 <= c < n_fine:
                raise ValueError(f"{sid}: class id {c} out of range")
            if annotator == EXPERT:
                if a.expert_labels is None:
                    a.expert_labels = np.zeros(n_fine, dtype=np.int64)
                a.expert_labels[c] = int(vote)
            else:
                a.votes.setdefault(annotator, np.zeros(n_fine, dtype=np.int64))[c] = int(vote)
    return out


@dataclass(frozen=True)
class RelabelConfig:
    aggregation_threshold: float = 0.5
    relabel_threshold: float = 0.5
    checkpoint_metric: str = "coarse/auprc_macro"

    def __post_init__(self):
        for t in (self.aggregation_threshold, self.relabel_threshold):
            if not 0.0 < t < 1.0:
                raise ValueError("thresholds must lie in (0, 1)")


@dataclass
class ClipLabel:
    fine: np.ndarray
    coarse: np.ndarray | None = None

    def ids(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.flatnonzero(self.fine))


def _with_coarse(fine: np.ndarray, taxonomy: Taxonomy | None) -> ClipLabel:
    fine = np.asarray(fine, dtype=np.int64)
    return ClipLabel(fine, taxonomy.coarse_from_fine(fine) if taxonomy is not None else None)


def aggregate_annotations(a: SampleAnnotations, cfg: RelabelConfig = RelabelConfig(),
                          taxonomy: Taxonomy | None = None) -> ClipLabel:
    """Expert labels win; otherwise a class is positive when the mean vote reaches the threshold."""
    if a.expert_labels is not None:
        return _with_coarse(a.expert_labels.copy(), taxonomy)
    if not a.votes:
        raise ValueError("sample has neither annotator votes nor expert labels")
    if a.n_annotators > 3:
        raise ValueError(f"expected at most 3 annotators, got {a.n_annotators}")
    mean_vote = np.mean(np.stack(list(a.votes.values())), axis=0)
    return _with_coarse((mean_vote >= cfg.aggregation_threshold).astype(np.int64), taxonomy)


def select_best_checkpoint(history: Sequence[tuple[int, float]]) -> int:
    """Earliest step reaching the highest score."""
    if not history:
        raise ValueError("empty history")
    best_step, best = history[0]
    for step, value in history[1:]:
        if value > best:
            best_step, best = step, value
    return best_step


@dataclass
class RelabelOutcome:
    labels: dict[str, ClipLabel]
    flips_per_class: np.ndarray
    changed_samples: list[str]

    @property
    def total_flips(self) -> int:
        return int(self.flips_per_class.sum())


def relabel_dataset(predict_fine: Callable[[np.ndarray], np.ndarray],
                    features: Mapping[str, np.ndarray | None],
                    labels: Mapping[str, ClipLabel],
                    expert_ids: set[str],
                    cfg: RelabelConfig = RelabelConfig(),
                    taxonomy: Taxonomy | None = None,
                    batch_size: int = 32) -> RelabelOutcome:
    """Replace non-expert fine labels with thresholded model probabilities.

    ``predict_fine`` maps a [batch, frames, mels] array to [batch, n_fine]
    clip probabilities. Expert samples are returned as the same objects.
    """
    for sid in labels:
        if sid not in expert_ids and features.get(sid) is None:
            raise ValueError(f"missing features for sample '{sid}'")
    n_fine = len(next(iter(labels.values())).fine) if labels else 0
    out: dict[str, ClipLabel] = {}
    flips = np.zeros(n_fine, dtype=np.int64)
    changed: list[str] = []
    todo = [sid for sid in labels if sid not in expert_ids]
    probs: dict[str, np.ndarray] = {}
    for start in range(0, len(todo), batch_size):
        chunk = todo[start:start + batch_size]
        batch = np.stack([np.asarray(features[sid], dtype=np.float64) for sid in chunk])
        for sid, p in zip(chunk, np.asarray(predict_fine(batch))):
            probs[sid] = p
    for sid, old in labels.items():
        if sid in expert_ids:
            out[sid] = old
            continue
        new = _with_coarse((probs[sid] >= cfg.relabel_threshold).astype(np.int64), taxonomy)
        diff = new.fine != np.asarray(old.fine)
        if diff.any():
            changed.append(sid)
            flips += diff
        out[sid] = new
    return RelabelOutcome(out, flips, changed)

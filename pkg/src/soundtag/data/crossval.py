"""Cross-validation over a manifest's predefined folds.

Folds are used exactly as shipped; there is no reshuffling. For each held-out
fold the best value of every metric over training epochs is kept, and the
summary is the population mean and standard deviation across folds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .manifest import DatasetManifest, ManifestEntry, ManifestError

FitAndScore = Callable[[list[ManifestEntry], list[ManifestEntry], int], Sequence[dict[str, float]]]


@dataclass
class FoldResult:
    fold: int
    best: dict[str, float]
    best_epoch: dict[str, int]


@dataclass
class CrossValidationResult:
    folds: list[FoldResult]
    summary: dict[str, tuple[float, float]]


def fold_partitions(manifest: DatasetManifest) -> list[tuple[int, list[ManifestEntry], list[ManifestEntry]]]:
    folds = manifest.fold_ids()
    if len(folds) < 2:
        raise ManifestError("cross-validation needs at least two folds")
    parts = []
    seen: set[str] = set()
    for k in folds:
        held = manifest.select(folds={k})
        rest = manifest.select(exclude_folds={k})
        if not held:
            raise ManifestError(f"fold {k} is empty")
        held_ids = {e.sample_id for e in held}
        if held_ids & {e.sample_id for e in rest}:
            raise ManifestError(f"fold {k} overlaps its training set")
        if held_ids & seen:
            raise ManifestError("a sample appears in more than one fold")
        seen |= held_ids
        if not manifest.label_matrix(held).any():
            raise ManifestError(f"fold {k} has no positive labels")
        parts.append((k, rest, held))
    if seen != {e.sample_id for e in manifest.entries}:
        raise ManifestError("folds do not cover the manifest")
    return parts


def best_per_metric(history: Sequence[dict[str, float]]) -> tuple[dict[str, float], dict[str, int]]:
    """Highest value of each metric over epochs, with the earliest epoch reaching it."""
    best: dict[str, float] = {}
    when: dict[str, int] = {}
    for epoch, row in enumerate(history):
        for name, value in row.items():
            if name not in best or value > best[name]:
                best[name], when[name] = float(value), epoch
    return best, when


def summarize(results: Sequence[FoldResult]) -> dict[str, tuple[float, float]]:
    names = sorted(set().union(*(r.best for r in results))) if results else []
    out = {}
    for name in names:
        vals = np.array([r.best[name] for r in results if name in r.best])
        out[name] = (float(vals.mean()), float(vals.std(ddof=0)))
    return out


def cross_validate(manifest: DatasetManifest, fit_and_score: FitAndScore) -> CrossValidationResult:
    """``fit_and_score(train_entries, eval_entries, fold)`` trains on the
    training folds and returns one metric dict per epoch on the held-out fold."""
    results = []
    for k, train, held in fold_partitions(manifest):
        history = fit_and_score(train, held, k)
        best, when = best_per_metric(history)
        results.append(FoldResult(k, best, when))
    return CrossValidationResult(results, summarize(results))

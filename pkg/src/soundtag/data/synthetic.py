"""Synthetic tagging datasets for desk-scale runs.

Each class has a fixed spectral signature (a tone plus harmonic at a
mel-spaced frequency; odd classes are amplitude modulated). Multi-label clips
superpose one to three signatures over faint noise, so labels are exact by
construction. Optional crowd annotations flip each true vote with a given
probability.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dsp import Waveform, hz_to_mel, mel_to_hz
from ..metrics import MULTILABEL, SINGLE_LABEL
from ..relabel import AnnotationSet, RelabelConfig, SampleAnnotations, aggregate_annotations
from .audio import write_wav
from .manifest import DatasetManifest, ManifestEntry
from .taxonomy import Taxonomy, grouped_taxonomy


def class_frequencies(n_classes: int, low: float = 300.0, high: float = 6000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), n_classes))


def class_signature(c: int, n_classes: int, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    f = class_frequencies(n_classes)[c]
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    sig = np.sin(2 * np.pi * f * t + phase)
    if 2 * f < 8000:
        sig += 0.5 * np.sin(4 * np.pi * f * t + phase)
    if c % 2:
        sig *= 0.5 * (1.0 + np.sin(2 * np.pi * 4.0 * t))
    return sig


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    truth: np.ndarray                     # [n, n_classes] exact labels
    annotations: AnnotationSet | None
    root: Path

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.csv"


def generate_synthetic_dataset(out_dir, n_samples: int, n_classes: int, clip_seconds: float, seed: int, *,
                               sample_rate: int = 44100, task_mode: str = MULTILABEL, n_folds: int = 1,
                               n_validate: int = 0, n_expert: int = 0, flip_prob: float = 0.0,
                               n_annotators: int = 3, n_coarse: int | None = None,
                               max_active: int = 3, annotate: bool | None = None) -> SyntheticDataset:
    """Write WAV clips, ``manifest.csv``, ``ground_truth.csv`` and (if annotated)
    ``annotations.csv`` plus ``taxonomy.json`` under ``out_dir``.

    The last ``n_validate`` clips form the validation split; validation clips and
    ``n_expert`` randomly chosen training clips carry expert labels. Folds are
    assigned round-robin (class-stratified for single-label data).
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    root = Path(out_dir)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(round(clip_seconds * sample_rate))
    taxonomy: Taxonomy | None = grouped_taxonomy(n_classes, n_coarse) if n_coarse else None

    truth = np.zeros((n_samples, n_classes), dtype=np.int64)
    folds = np.zeros(n_samples, dtype=np.int64)
    for i in range(n_samples):
        if task_mode == SINGLE_LABEL:
            active = [i % n_classes]
            folds[i] = (i // n_classes) % n_folds
        else:
            k = int(rng.integers(1, min(max_active, n_classes) + 1))
            active = sorted(rng.choice(n_classes, size=k, replace=False).tolist())
            folds[i] = i % n_folds
        truth[i, active] = 1
        mix = np.zeros(n)
        for c in active:
            mix += rng.uniform(0.5, 1.0) * class_signature(c, n_classes, n, sample_rate, rng)
        mix += 0.01 * rng.standard_normal(n)
        mix *= 0.9 / np.abs(mix).max()
        write_wav(root / "audio" / f"clip{i:05d}.wav", Waveform(mix, sample_rate))

    is_validate = np.zeros(n_samples, dtype=bool)
    if n_validate:
        is_validate[n_samples - n_validate:] = True
    train_idx = np.flatnonzero(~is_validate)
    experts = set(is_validate.nonzero()[0].tolist())
    if n_expert:
        experts.update(rng.choice(train_idx, size=min(n_expert, train_idx.size), replace=False).tolist())

    annotations = None
    labels = truth.copy()
    annotated = annotate if annotate is not None else (flip_prob > 0 or n_expert > 0 or n_validate > 0)
    if annotated:
        annotations = AnnotationSet(n_classes)
        cfg = RelabelConfig()
        for i in range(n_samples):
            sid = f"clip{i:05d}"
            a = SampleAnnotations()
            if i in experts:
                a.expert_labels = truth[i].copy()
            if not is_validate[i]:
                for j in range(n_annotators):
                    flips = rng.random(n_classes) < flip_prob
                    a.votes[f"volunteer{j}"] = np.where(flips, 1 - truth[i], truth[i])
            annotations.samples[sid] = a
            labels[i] = aggregate_annotations(a, cfg).fine

    def entries(label_matrix):
        return [ManifestEntry(f"clip{i:05d}", f"audio/clip{i:05d}.wav", int(folds[i]),
                              "validate" if is_validate[i] else "train",
                              tuple(int(c) for c in np.flatnonzero(label_matrix[i])))
                for i in range(n_samples)]

    tax_name = None
    if taxonomy is not None:
        tax_name = "taxonomy.json"
        taxonomy.save(root / tax_name)
    manifest = DatasetManifest(entries(labels), n_classes, task_mode, taxonomy, tax_name, root)
    manifest.save(root / "manifest.csv")
    DatasetManifest(entries(truth), n_classes, task_mode, taxonomy, tax_name, root).save(root / "ground_truth.csv")
    if annotations is not None:
        annotations.save(root / "annotations.csv")
    return SyntheticDataset(manifest, truth, annotations, root)

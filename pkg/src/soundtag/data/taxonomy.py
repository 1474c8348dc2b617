"""Two-level class taxonomy (fine classes nested under coarse classes)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Taxonomy:
    coarse: tuple[str, ...]
    fine: tuple[str, ...]
    parent: tuple[int, ...]      # parent[f] = coarse index of fine class f

    def __post_init__(self):
        if len(self.parent) != len(self.fine):
            raise ValueError("every fine class needs exactly one coarse parent")
        if any(not 0 <= p < len(self.coarse) for p in self.parent):
            raise ValueError("parent index out of range")

    @property
    def n_coarse(self) -> int:
        return len(self.coarse)

    @property
    def n_fine(self) -> int:
        return len(self.fine)

    @property
    def n_targets(self) -> int:
        return self.n_coarse + self.n_fine

    def membership(self) -> np.ndarray:
        """[n_fine, n_coarse] 0/1 matrix."""
        m = np.zeros((self.n_fine, self.n_coarse))
        m[np.arange(self.n_fine), self.parent] = 1.0
        return m

    def coarse_from_fine(self, fine: np.ndarray) -> np.ndarray:
        """Coarse label = OR over its fine children. Works on [..., n_fine]."""
        return (np.asarray(fine) @ self.membership() > 0).astype(np.int64)

    def to_json(self) -> str:
        return json.dumps({"coarse": list(self.coarse), "fine": list(self.fine), "parent": list(self.parent)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Taxonomy":
        d = json.loads(text)
        return cls(tuple(d["coarse"]), tuple(d["fine"]), tuple(int(p) for p in d["parent"]))

    @classmethod
    def load(cls, path) -> "Taxonomy":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def sonyc_ust_taxonomy() -> Taxonomy:
    groups = {
        "engine": ["small-sounding-engine", "medium-sounding-engine", "large-sounding-engine"],
        "machinery-impact": ["rock-drill", "jackhammer", "hoe-ram", "pile-driver"],
        "non-machinery-impact": ["non-machinery-impact"],
        "powered-saw": ["chainsaw", "small-medium-rotating-saw", "large-rotating-saw"],
        "alert-signal": ["car-horn", "car-alarm", "siren", "reverse-beeper"],
        "music": ["stationary-music", "mobile-music", "ice-cream-truck"],
        "human-voice": ["person-or-small-group-talking", "person-or-small-group-shouting",
                        "large-crowd", "amplified-speech"],
        "dog": ["dog-barking-whining"],
    }
    coarse = tuple(groups)
    fine, parent = [], []
    for ci, name in enumerate(coarse):
        fine.extend(groups[name])
        parent.extend([ci] * len(groups[name]))
    return Taxonomy(coarse, tuple(fine), tuple(parent))


def grouped_taxonomy(n_fine: int, n_coarse: int) -> Taxonomy:
    """Synthetic taxonomy: fine classes dealt to coarse groups in contiguous blocks."""
    if not 1 <= n_coarse <= n_fine:
        raise ValueError("need 1 <= n_coarse <= n_fine")
    parent = tuple(int(f * n_coarse // n_fine) for f in range(n_fine))
    return Taxonomy(tuple(f"coarse-{c}" for c in range(n_coarse)),
                    tuple(f"fine-{f}" for f in range(n_fine)), parent)

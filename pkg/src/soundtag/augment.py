"""Spectrogram augmentation: SpecAugment (time warp, frequency and time masks),
Cutout and Mixup.

All functions take an explicit ``numpy.random.Generator`` and return new
arrays; spectrograms are ``[frames, mels]``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dsp import LogMelSpectrogram, SpectrogramConfig

SILENCE = float(np.log(SpectrogramConfig().log_floor))


@dataclass(frozen=True)
class AugmentPolicy:
    n_freq_masks: int = 2
    max_freq_width: int = 8
    n_time_masks: int = 2
    max_time_width: int = 30
    time_warp_W: int = 0
    mixup_enabled: bool = False
    mixup_alpha: float = 1.0
    cutout_max_h: int = 0
    cutout_max_w: int = 0
    fill: str = "silence"        # silence | mean | <float>
    rng_seed: int = 0

    def __post_init__(self):
        widths = (self.n_freq_masks, self.max_freq_width, self.n_time_masks, self.max_time_width,
                  self.time_warp_W, self.cutout_max_h, self.cutout_max_w)
        if any(v < 0 for v in widths):
            raise ValueError("augmentation counts and widths must be non-negative")
        if self.mixup_enabled and self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")

    def fill_value(self, data: np.ndarray) -> float:
        if self.fill == "silence":
            return SILENCE
        if self.fill == "mean":
            return float(data.mean())
        return float(self.fill)


def _unwrap(s):
    if isinstance(s, LogMelSpectrogram):
        return s.data, lambda d: replace(s, data=d)
    return np.asarray(s, dtype=np.float64), lambda d: d


# -- masks ------------------------------------------------------------------

def apply_freq_mask(data: np.ndarray, start: int, width: int, fill: float) -> np.ndarray:
    out = data.copy()
    out[:, start:start + width] = fill
    return out


def apply_time_mask(data: np.ndarray, start: int, width: int, fill: float) -> np.ndarray:
    out = data.copy()
    out[start:start + width, :] = fill
    return out


def freq_mask(s, policy: AugmentPolicy, rng: np.random.Generator):
    data, wrap = _unwrap(s)
    n_mels = data.shape[1]
    if policy.max_freq_width > n_mels:
        raise ValueError("max_freq_width exceeds the number of mel bins")
    fill = policy.fill_value(data)
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(0, policy.max_freq_width + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        data = apply_freq_mask(data, start, width, fill)
    return wrap(data)


def time_mask(s, policy: AugmentPolicy, rng: np.random.Generator):
    data, wrap = _unwrap(s)
    frames = data.shape[0]
    if policy.max_time_width > frames:
        raise ValueError("max_time_width exceeds the number of frames")
    fill = policy.fill_value(data)
    for _ in range(policy.n_time_masks):
        width = int(rng.integers(0, policy.max_time_width + 1))
        start = int(rng.integers(0, frames - width + 1))
        data = apply_time_mask(data, start, width, fill)
    return wrap(data)


# -- time warp --------------------------------------------------------------

def warp_source_positions(frames: int, anchor: int, shift: int) -> np.ndarray:
    """Source frame position for every output frame.

    The anchor frame moves to ``anchor + shift``; both sides of it are
    stretched linearly, the first and last frames stay fixed.
    """
    dest = anchor + shift
    i = np.arange(frames, dtype=np.float64)
    src = np.empty(frames)
    left = i <= dest
    src[left] = i[left] * (anchor / dest) if dest > 0 else 0.0
    right_len = frames - 1 - dest
    src[~left] = anchor + (i[~left] - dest) * ((frames - 1 - anchor) / right_len if right_len > 0 else 0.0)
    return src


def apply_time_warp(data: np.ndarray, anchor: int, shift: int) -> np.ndarray:
    if shift == 0:
        return data.copy()
    src = warp_source_positions(data.shape[0], anchor, shift)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, data.shape[0] - 1)
    frac = (src - lo)[:, None]
    return (1.0 - frac) * data[lo] + frac * data[hi]


def time_warp(s, W: int, rng: np.random.Generator):
    data, wrap = _unwrap(s)
    if W == 0:
        return wrap(data.copy())
    frames = data.shape[0]
    if W >= frames / 2:
        raise ValueError(f"warp parameter {W} too large for {frames} frames")
    anchor = int(rng.integers(W, frames - W))
    shift = int(rng.integers(-W, W + 1))
    return wrap(apply_time_warp(data, anchor, shift))


# -- cutout -----------------------------------------------------------------

def apply_cutout(data: np.ndarray, top: int, left: int, height: int, width: int, fill: float) -> np.ndarray:
    """Fill a [height (mels) x width (frames)] rectangle; parts outside the array are dropped."""
    out = data.copy()
    t0, t1 = max(left, 0), min(left + width, data.shape[0])
    f0, f1 = max(top, 0), min(top + height, data.shape[1])
    if t1 > t0 and f1 > f0:
        out[t0:t1, f0:f1] = fill
    return out


def cutout(s, policy: AugmentPolicy, rng: np.random.Generator):
    data, wrap = _unwrap(s)
    frames, mels = data.shape
    if policy.cutout_max_h > mels or policy.cutout_max_w > frames:
        raise ValueError("cutout rectangle larger than the spectrogram")
    height = int(rng.integers(0, policy.cutout_max_h + 1))
    width = int(rng.integers(0, policy.cutout_max_w + 1))
    top = int(rng.integers(0, mels))
    left = int(rng.integers(0, frames))
    return wrap(apply_cutout(data, top, left, height, width, policy.fill_value(data)))


# -- mixup ------------------------------------------------------------------

def mix(x1, y1, x2, y2, lam: float):
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError("mixup operands must have matching shapes")
    if lam == 1.0:
        return x1.copy(), y1.copy()
    if lam == 0.0:
        return x2.copy(), y2.copy()
    # written as x2 + lam*(x1 - x2) so that mixing an example with itself is exact
    return x2 + lam * (x1 - x2), y2 + lam * (y1 - y2)


def mixup(x1, y1, x2, y2, alpha: float, rng: np.random.Generator):
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = float(rng.beta(alpha, alpha))
    x, y = mix(x1, y1, x2, y2, lam)
    return x, y, lam


def specaugment(s, policy: AugmentPolicy, rng: np.random.Generator):
    """Time warp, then frequency masks, time masks and cutout as configured."""
    if policy.time_warp_W:
        s = time_warp(s, policy.time_warp_W, rng)
    s = freq_mask(s, policy, rng)
    s = time_mask(s, policy, rng)
    if policy.cutout_max_h and policy.cutout_max_w:
        s = cutout(s, policy, rng)
    return s

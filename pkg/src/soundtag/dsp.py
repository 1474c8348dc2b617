"""Audio to log-mel spectrogram.

Defaults: n_fft 2822, Hann window, hop 1103, 64 mel bands over 0-8000 Hz at
44.1 kHz. At these settings a 10 s clip gives 400 frames and a 5 s clip 200.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray     # [channels, n]
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ValueError(f"expected 1 or 2 channels, got array of shape {s.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if s.size and np.abs(s).max() > 1.0 + 1e-6:
            raise ValueError("samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    n_fft: int = 2822
    hop_length: int = 1103
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    target_sample_rate: int = 44100
    log_floor: float = 1e-10
    mel_scale: str = "slaney"     # slaney | htk
    mel_norm: str | None = "slaney"

    def __post_init__(self):
        if not (0 <= self.f_min < self.f_max <= self.target_sample_rate / 2):
            raise ValueError(f"need 0 <= f_min < f_max <= Nyquist, got {self.f_min}, {self.f_max}")
        if not 0 < self.hop_length <= self.n_fft:
            raise ValueError("hop_length must be in (0, n_fft]")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.mel_scale not in ("slaney", "htk"):
            raise ValueError(f"unknown mel scale {self.mel_scale!r}")

    def digest(self) -> bytes:
        """16-byte hash identifying these settings."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=16).digest()


@dataclass
class LogMelSpectrogram:
    data: np.ndarray                # [frames, n_mels]
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    source_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------

def _kaiser_sinc(offsets: np.ndarray, cutoff: float, half_width: int) -> np.ndarray:
    # continuous Kaiser window evaluated at fractional offsets
    pos = np.clip(offsets / half_width, -1.0, 1.0)
    win = np.i0(KAISER_BETA * np.sqrt(1.0 - pos * pos)) / np.i0(KAISER_BETA)
    return cutoff * np.sinc(cutoff * offsets) * win


def resample(w: Waveform, target_sr: int, chunk: int = 65536) -> Waveform:
    """Band-limited resampling with a 64-tap Kaiser-windowed sinc kernel.

    Each output sample is a normalized weighted sum of its 64 nearest input
    samples, so constant signals are reproduced exactly. Output positions are
    computed in integer arithmetic and the kernel is tabulated per phase.
    """
    if target_sr <= 0:
        raise ValueError("target sample rate must be positive")
    if w.n_samples == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_sr == w.sample_rate:
        return w
    n_in = w.n_samples
    n_out = int(round(n_in * target_sr / w.sample_rate))
    g = math.gcd(w.sample_rate, target_sr)
    up, down = target_sr // g, w.sample_rate // g   # output m sits at input m*down/up
    cutoff = min(1.0, up / down)
    half = RESAMPLE_TAPS // 2
    taps = np.arange(-half + 1, half + 1)
    table = None
    if up <= max(n_out, 1):
        table = _kaiser_sinc(np.arange(up)[:, None] / up - taps[None, :], cutoff, half)
    out = np.empty((w.channels, n_out))
    for start in range(0, n_out, chunk):
        m = np.arange(start, min(n_out, start + chunk), dtype=np.int64)
        base, phase = np.divmod(m * down, up)
        idx = base[:, None] + taps[None, :]
        if table is not None:
            weights = table[phase]
        else:
            weights = _kaiser_sinc(phase[:, None] / up - taps[None, :], cutoff, half)
        valid = (idx >= 0) & (idx < n_in)
        weights = np.where(valid, weights, 0.0)
        weights /= weights.sum(axis=1, keepdims=True)
        gathered = w.samples[:, np.clip(idx, 0, n_in - 1)]
        out[:, start:start + len(m)] = np.einsum("cij,ij->ci", gathered, weights)
    return Waveform(np.clip(out, -1.0, 1.0), target_sr)


def to_mono(w: Waveform) -> Waveform:
    if w.channels == 1:
        return w
    return Waveform(w.samples.mean(axis=0, keepdims=True), w.sample_rate)


def frame_count(n_samples: int, hop_length: int) -> int:
    """Frames produced by a centered STFT."""
    return 1 + n_samples // hop_length


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: Waveform, cfg: SpectrogramConfig) -> np.ndarray:
    """Complex STFT, [frames, n_fft//2 + 1], centered with reflect padding."""
    if w.channels != 1:
        raise ValueError("stft expects a mono waveform")
    if w.sample_rate != cfg.target_sample_rate:
        raise ValueError(f"expected {cfg.target_sample_rate} Hz, got {w.sample_rate} Hz")
    x = w.samples[0]
    if x.size == 0:
        raise ValueError("stft of empty input")
    half = cfg.n_fft // 2
    x = np.pad(x, half, mode="reflect" if x.size > 1 else "constant")
    n_frames = 1 + (x.size - cfg.n_fft) // cfg.hop_length
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop_length][:n_frames]
    return np.fft.rfft(frames * hann_periodic(cfg.n_fft), axis=1)


def hz_to_mel(f, scale: str = "slaney"):
    f = np.asarray(f, dtype=np.float64)
    if scale == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    # linear (200/3 Hz per mel) below 1 kHz, logarithmic above
    logstep = np.log(6.4) / 27.0
    return np.where(f >= 1000.0,
                    15.0 + np.log(np.maximum(f, 1000.0) / 1000.0) / logstep,
                    3.0 * f / 200.0)


def mel_to_hz(m, scale: str = "slaney"):
    m = np.asarray(m, dtype=np.float64)
    if scale == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    logstep = np.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), 200.0 * m / 3.0)


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular mel filters, [n_mels, n_fft//2 + 1]."""
    sr = cfg.target_sample_rate
    if cfg.f_max > sr / 2:
        raise ValueError("f_max above Nyquist")
    fft_freqs = np.linspace(0.0, sr / 2, cfg.n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(cfg.f_min, cfg.mel_scale), hz_to_mel(cfg.f_max, cfg.mel_scale), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts, cfg.mel_scale)
    widths = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    if cfg.mel_norm == "slaney":
        weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    return weights


def log_mel(w: Waveform, cfg: SpectrogramConfig | None = None, source_id: str = "") -> LogMelSpectrogram:
    cfg = cfg or SpectrogramConfig()
    power = np.abs(stft(w, cfg)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return LogMelSpectrogram(np.log(np.maximum(cfg.log_floor, mel)), cfg, source_id)


def waveform_to_logmel(w: Waveform, cfg: SpectrogramConfig | None = None, source_id: str = "",
                       target_samples: int | None = None) -> LogMelSpectrogram:
    """Full front-end: mono, resample, optional fixed length, log-mel."""
    cfg = cfg or SpectrogramConfig()
    w = resample(to_mono(w), cfg.target_sample_rate)
    if target_samples is not None:
        from .data.audio import pad_or_trim
        w = pad_or_trim(w, target_samples)
    return log_mel(w, cfg, source_id)

"""PCM WAV reading/writing and fixed-length padding."""
from __future__ import annotations

import io
import wave
from pathlib import Path

import numpy as np

from ..dsp import Waveform


def decode_wav(raw: bytes) -> Waveform:
    """Decode 16- or 24-bit little-endian PCM, mono or stereo."""
    try:
        with wave.open(io.BytesIO(raw), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"malformed WAV: {exc}") from None
    if channels not in (1, 2):
        raise ValueError(f"unsupported channel count {channels}")
    if width == 2:
        ints = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(frames, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        ints = v.astype(np.float64) / float(1 << 23)
    else:
        raise ValueError(f"unsupported sample width {8 * width} bits")
    return Waveform(ints.reshape(-1, channels).T, rate)


def read_wav(path) -> Waveform:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM."""
    # same scale as decode_wav; +1.0 saturates one step below full scale
    pcm = np.clip(np.round(w.samples.T * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(w.channels)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def pad_or_trim(w: Waveform, target_samples: int) -> Waveform:
    """Zero-pad or cut at the tail to exactly ``target_samples``."""
    if target_samples <= 0:
        raise ValueError("target length must be positive")
    n = w.n_samples
    if n == target_samples:
        return w
    if n > target_samples:
        return Waveform(w.samples[:, :target_samples], w.sample_rate)
    pad = np.zeros((w.channels, target_samples - n))
    return Waveform(np.concatenate([w.samples, pad], axis=1), w.sample_rate)


def samples_for_frames(frames: int, hop_length: int) -> int:
    """Shortest clip length giving ``frames`` centered STFT frames."""
    return hop_length * (frames - 1)

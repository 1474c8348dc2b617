"""On-disk log-mel cache.

Entry layout (all little-endian): magic ``LMSP``, version byte, frame count
(u32), mel count (u32), 16-byte config hash, float32 row-major payload, and a
u64 checksum (blake2b-64 over everything before it).
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dsp import LogMelSpectrogram, SpectrogramConfig, waveform_to_logmel
from .audio import decode_wav

log = logging.getLogger(__name__)

MAGIC = b"LMSP"
VERSION = 1
_HEAD = struct.Struct("<4sBII16s")
SUFFIX = ".lmsp"


class CorruptEntry(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode_entry(data: np.ndarray, cfg: SpectrogramConfig) -> bytes:
    frames, mels = data.shape
    body = _HEAD.pack(MAGIC, VERSION, frames, mels, cfg.digest()) + np.ascontiguousarray(data, dtype="<f4").tobytes()
    return body + _checksum(body)


def decode_entry(raw: bytes, cfg: SpectrogramConfig | None = None) -> np.ndarray:
    if len(raw) < _HEAD.size + 8:
        raise CorruptEntry("entry too short")
    body, check = raw[:-8], raw[-8:]
    if _checksum(body) != check:
        raise CorruptEntry("checksum mismatch")
    magic, version, frames, mels, digest = _HEAD.unpack_from(body)
    if magic != MAGIC or version != VERSION:
        raise CorruptEntry("bad magic or version")
    if cfg is not None and digest != cfg.digest():
        raise CorruptEntry("config hash differs")
    payload = body[_HEAD.size:]
    if len(payload) != 4 * frames * mels:
        raise CorruptEntry("payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(frames, mels)


def quantize(data: np.ndarray) -> np.ndarray:
    """Round to the float32 grid used on disk, so fresh and cached results agree bit for bit."""
    return data.astype(np.float32).astype(np.float64)


@dataclass
class CacheStats:
    hits: int = 0
    computed: int = 0
    repaired: int = 0


class FeatureCache:
    def __init__(self, root, cfg: SpectrogramConfig | None = None, target_samples: int | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg or SpectrogramConfig()
        self.target_samples = target_samples
        self.stats = CacheStats()

    def key(self, audio: bytes) -> str:
        h = hashlib.blake2b(digest_size=20)
        h.update(self.cfg.digest())
        h.update(str(self.target_samples).encode())
        h.update(audio)
        return h.hexdigest()

    def path_for(self, key: str) -> Path:
        return self.root / f"{key}{SUFFIX}"

    def get_or_compute(self, audio_path, source_id: str = "") -> LogMelSpectrogram:
        audio = Path(audio_path).read_bytes()
        return self.get_or_compute_bytes(audio, source_id or Path(audio_path).stem)

    def get_or_compute_bytes(self, audio: bytes, source_id: str = "") -> LogMelSpectrogram:
        entry = self.path_for(self.key(audio))
        if entry.exists():
            try:
                data = decode_entry(entry.read_bytes(), self.cfg)
                self.stats.hits += 1
                return LogMelSpectrogram(data, self.cfg, source_id)
            except CorruptEntry as exc:
                log.warning("cache entry %s unusable (%s); recomputing", entry.name, exc)
                self.stats.repaired += 1
        spec = waveform_to_logmel(decode_wav(audio), self.cfg, source_id, self.target_samples)
        data = quantize(spec.data)
        self._write(entry, encode_entry(data, self.cfg))
        self.stats.computed += 1
        return LogMelSpectrogram(data, self.cfg, source_id)

    def _write(self, target: Path, payload: bytes) -> None:
        # temp file + rename: readers never see a partial entry
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=SUFFIX)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def entries(self) -> list[Path]:
        return sorted(self.root.glob(f"*{SUFFIX}"))


def cache_get_or_compute(audio_path, cfg: SpectrogramConfig, cache_dir, target_samples: int | None = None) -> LogMelSpectrogram:
    return FeatureCache(cache_dir, cfg, target_samples).get_or_compute(audio_path)

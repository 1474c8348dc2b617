"""Dual-backbone CRNN: a TALNet-style global extractor (BN, ReLU, BiGRU) next to a
specific extractor (GN, Mish, multi-head self-attention), a shared sigmoid
frame classifier and class-wise attention pooling over time.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .layers import (Activation, BatchNorm, BiGRU, Conv2d, GroupNorm, Linear, Module,
                     MultiHeadSelfAttention)
from .tensor import Tensor

N_MELS = 64
FULL_WIDTHS = (32, 64, 128, 256, 512)
TOY_WIDTHS = (4, 8, 16, 32, 64)
POOL_SCHEDULE = (F.PoolSpec(2, 2), F.PoolSpec(2, 2), F.PoolSpec(1, 2), F.PoolSpec(1, 2), F.PoolSpec(1, 2))


@dataclass
class ExtractorConfig:
    conv_widths: tuple[int, ...] = TOY_WIDTHS
    normalizer: str = "batch"          # batch | group
    activation: str = "relu"           # relu | mish
    temporal_head: str = "bigru"       # bigru | mhsa
    gru_hidden: int = 32
    n_heads: int = 4
    n_groups: int = 4
    pool_schedule: tuple[F.PoolSpec, ...] = POOL_SCHEDULE

    def __post_init__(self):
        self.conv_widths = tuple(int(w) for w in self.conv_widths)
        if len(self.conv_widths) != 5:
            raise ValueError("an extractor has exactly 5 conv stages (10 conv layers)")
        if len(self.pool_schedule) != 5:
            raise ValueError("an extractor has exactly 5 pooling layers")
        if [p.pool_time for p in self.pool_schedule] != [2, 2, 1, 1, 1]:
            raise ValueError("only the first two pools reduce the frame rate")
        if self.normalizer not in ("batch", "group"):
            raise ValueError(f"unknown normalizer {self.normalizer!r}")
        if self.temporal_head not in ("bigru", "mhsa"):
            raise ValueError(f"unknown temporal head {self.temporal_head!r}")


def global_extractor_config(widths: Sequence[int] = TOY_WIDTHS, gru_hidden: int = 32) -> ExtractorConfig:
    return ExtractorConfig(tuple(widths), "batch", "relu", "bigru", gru_hidden=gru_hidden)


def specific_extractor_config(widths: Sequence[int] = TOY_WIDTHS, n_heads: int = 4,
                              n_groups: int = 4) -> ExtractorConfig:
    return ExtractorConfig(tuple(widths), "group", "mish", "mhsa", n_heads=n_heads, n_groups=n_groups)


@dataclass
class DualBackboneConfig:
    n_classes: int = 8
    global_: ExtractorConfig = field(default_factory=global_extractor_config)
    specific: ExtractorConfig = field(default_factory=specific_extractor_config)
    freeze_global: bool = False

    def __post_init__(self):
        if self.global_.temporal_head != "bigru":
            raise ValueError("the global extractor uses a BiGRU temporal head")
        if self.specific.temporal_head != "mhsa":
            raise ValueError("the specific extractor uses a self-attention temporal head")

    @classmethod
    def toy(cls, n_classes: int = 8, widths: Sequence[int] = TOY_WIDTHS, n_heads: int = 4,
            gru_hidden: int = 32, n_groups: int = 4, freeze_global: bool = False) -> "DualBackboneConfig":
        return cls(n_classes, global_extractor_config(widths, gru_hidden),
                   specific_extractor_config(widths, n_heads, n_groups), freeze_global)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("global_", "specific"):
            d[key].pop("pool_schedule")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DualBackboneConfig":
        return cls(int(d["n_classes"]), ExtractorConfig(**d["global_"]), ExtractorConfig(**d["specific"]),
                   bool(d.get("freeze_global", False)))


@dataclass
class ClipPrediction:
    frame_probs: np.ndarray   # [batch, time, classes]
    clip_probs: np.ndarray    # [batch, classes]


def _groups_for(width: int, n_groups: int) -> int:
    # narrow layers fall back to a single group
    return n_groups if width >= 8 and width % n_groups == 0 else 1


def _as_array(s) -> np.ndarray:
    if isinstance(s, np.ndarray):
        return s.astype(np.float64, copy=False)
    if isinstance(s, Tensor):
        return s.data
    return np.asarray(s.data, dtype=np.float64)  # LogMelSpectrogram


class Extractor(Module):
    """Ten 3x3 convolutions in five stages, each stage followed by max pooling,
    then a temporal head over the flattened (channel x freq) frame features."""

    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator):
        self.cfg = cfg
        convs, norms, acts = [], [], []
        in_ch = 1
        for width in cfg.conv_widths:
            for _ in range(2):
                convs.append(Conv2d(in_ch, width, rng))
                if cfg.normalizer == "batch":
                    norms.append(BatchNorm(width))
                else:
                    norms.append(GroupNorm(_groups_for(width, cfg.n_groups), width))
                acts.append(Activation(cfg.activation))
                in_ch = width
        self.convs, self.norms, self.acts = convs, norms, acts
        feat = cfg.conv_widths[-1] * (N_MELS // 32)
        self.feature_dim = feat
        if cfg.temporal_head == "bigru":
            self.head = BiGRU(feat, cfg.gru_hidden, rng)
        else:
            self.head = MultiHeadSelfAttention(feat, cfg.n_heads, rng)

    @property
    def out_features(self) -> int:
        return self.head.out_features

    def features(self, x: Tensor) -> Tensor:
        """Conv stack only: [batch, frames, mels] -> [batch, frames/4, channels*2]."""
        if x.shape[-1] != N_MELS:
            raise ValueError(f"expected {N_MELS} mel bins, got {x.shape[-1]}")
        if x.shape[1] % 4:
            raise ValueError(f"frame count {x.shape[1]} must be divisible by 4")
        B = x.shape[0]
        h = T.reshape(x, (B, 1) + x.shape[1:])
        for stage, pool in enumerate(self.cfg.pool_schedule):
            for k in (2 * stage, 2 * stage + 1):
                h = self.acts[k](self.norms[k](self.convs[k](h)))
            h = F.maxpool2d(h, pool)
        _, C, steps, freq = h.shape
        return T.reshape(T.transpose(h, (0, 2, 1, 3)), (B, steps, C * freq))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


class DualBackboneModel(Module):
    def __init__(self, cfg: DualBackboneConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.global_extractor = Extractor(cfg.global_, rng)
        self.specific_extractor = Extractor(cfg.specific, rng)
        joint = self.global_extractor.out_features + self.specific_extractor.out_features
        self.classifier = Linear(joint, cfg.n_classes, rng)
        self.pool_logits = Linear(joint, cfg.n_classes, rng)
        if cfg.freeze_global:
            self.set_global_frozen(True)

    def set_global_frozen(self, frozen: bool) -> None:
        self.cfg.freeze_global = frozen
        for p in self.global_extractor.parameters():
            p.requires_grad = not frozen
        self.train(self.training)

    def train(self, mode: bool = True) -> "DualBackboneModel":
        super().train(mode)
        if self.cfg.freeze_global:
            # a frozen extractor also keeps its normalization statistics fixed
            self.global_extractor.train(False)
        return self

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Return (frame_probs [B, T/4, C], clip_probs [B, C]) for x [B, T, 64]."""
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        g = self.global_extractor(x)
        s = self.specific_extractor(x)
        if g.shape[1] != s.shape[1]:
            raise ValueError(f"temporal extents differ: {g.shape[1]} vs {s.shape[1]}")
        feats = T.concat([g, s], axis=2)
        frame_probs = F.frame_classifier(feats, self.classifier.weight, self.classifier.bias)
        clip_probs = F.attention_pool(frame_probs, self.pool_logits(feats))
        return frame_probs, clip_probs

    def predict(self, x, batch_size: int = 32) -> ClipPrediction:
        """Inference without taping, in evaluation mode."""
        x = _as_array(x)
        if x.ndim == 2:
            x = x[None]
        was_training = self.training
        self.eval()
        frames, clips = [], []
        try:
            with T.no_grad():
                for start in range(0, len(x), batch_size):
                    fp, cp = self(Tensor(x[start:start + batch_size]))
                    frames.append(fp.data)
                    clips.append(cp.data)
        finally:
            self.train(was_training)
        return ClipPrediction(np.concatenate(frames), np.concatenate(clips))


def extractor_forward(spec, cfg: ExtractorConfig, seed: int = 0) -> Tensor:
    """Run a freshly initialised extractor over one spectrogram (frames x 64)."""
    data = _as_array(spec)
    ex = Extractor(cfg, np.random.default_rng(seed))
    return ex(Tensor(data[None] if data.ndim == 2 else data))


def model_forward(spec, model: DualBackboneModel) -> ClipPrediction:
    data = _as_array(spec)
    pred = model.predict(data)
    return ClipPrediction(pred.frame_probs[0], pred.clip_probs[0]) if data.ndim == 2 else pred


def load_pretrained_global(model: DualBackboneModel, checkpoint, freeze: bool | None = None) -> DualBackboneModel:
    """Replace the global extractor's weights with those stored in ``checkpoint``.

    ``checkpoint`` is a path or a name->array mapping; names may carry a
    ``global_extractor.`` prefix (full-model checkpoints) or not.
    """
    from .checkpoint import load_checkpoint

    state = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    prefix = "global_extractor."
    if any(k.startswith(prefix) for k in state):
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    target = model.global_extractor
    expected = list(target.named_parameters()) + list(target.named_buffers())
    for name, value in expected:
        current = value.data if hasattr(value, "role") else value
        if name not in state:
            raise ValueError(f"checkpoint lacks tensor '{prefix}{name}'")
        if tuple(np.shape(state[name])) != current.shape:
            raise ValueError(f"shape mismatch for '{prefix}{name}': model {current.shape}, "
                             f"checkpoint {tuple(np.shape(state[name]))}")
    target.load_state_dict(state)
    if freeze is not None:
        model.set_global_frozen(freeze)
    elif model.cfg.freeze_global:
        model.set_global_frozen(True)
    return model


def save_model(model: DualBackboneModel, path, meta: dict | None = None):
    from .checkpoint import save_checkpoint

    return save_checkpoint(path, model.state_dict(), {"model_config": model.cfg.to_dict(), **(meta or {})})


def load_model(path) -> DualBackboneModel:
    from .checkpoint import load_checkpoint, read_manifest

    meta = read_manifest(path)["meta"]
    if "model_config" not in meta:
        raise ValueError(f"{path} holds no model configuration")
    model = DualBackboneModel(DualBackboneConfig.from_dict(meta["model_config"]))
    model.load_state_dict(load_checkpoint(path))
    return model

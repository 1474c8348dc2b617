"""Experiment configuration: INI-style sections of ``key = value`` lines.

Every setting can be overridden with a dotted ``section.key=value`` string.
Relative paths resolve against the directory of the configuration file.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPolicy
from .dsp import SpectrogramConfig
from .model import TOY_WIDTHS, DualBackboneConfig
from .optim import OptimizerConfig
from .relabel import RelabelConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _optional(conv):
    return lambda text: None if text.strip().lower() in ("", "none") else conv(text)


def _fill(text: str) -> str:
    if text not in ("silence", "mean"):
        float(text)
    return text


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "manifest": (str, ""),
        "cache_dir": (str, "cache"),
        "annotations": (_optional(str), None),
        "target_seconds": (_optional(float), None),
    },
    "spectrogram": {
        "n_fft": (int, 2822),
        "hop_length": (int, 1103),
        "n_mels": (int, 64),
        "f_min": (float, 0.0),
        "f_max": (float, 8000.0),
        "target_sample_rate": (int, 44100),
        "log_floor": (float, 1e-10),
        "mel_scale": (str, "slaney"),
        "mel_norm": (_optional(str), "slaney"),
    },
    "augment": {
        "enabled": (_bool, False),
        "n_freq_masks": (int, 2),
        "max_freq_width": (int, 8),
        "n_time_masks": (int, 2),
        "max_time_width": (int, 30),
        "time_warp_W": (int, 0),
        "mixup_enabled": (_bool, False),
        "mixup_alpha": (float, 1.0),
        "cutout_max_h": (int, 0),
        "cutout_max_w": (int, 0),
        "fill": (_fill, "silence"),
    },
    "model": {
        "widths": (_ints, TOY_WIDTHS),
        "gru_hidden": (int, 32),
        "n_heads": (int, 4),
        "n_groups": (int, 4),
        "freeze_global": (_bool, False),
        "pretrained_global": (_optional(str), None),
    },
    "optimizer": {
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 0.0),
        "gc_enabled": (_bool, True),
        "grad_clip": (_optional(float), None),
    },
    "relabel": {
        "aggregation_threshold": (float, 0.5),
        "relabel_threshold": (float, 0.5),
        "checkpoint_metric": (str, "coarse/auprc_macro"),
    },
    "train": {
        "epochs": (int, 10),
        "batch_size": (int, 16),
        "seed": (int, 0),
        "max_steps": (_optional(int), None),
        "best_metric": (_optional(str), None),
        "eval_every": (int, 1),
        "eval_train": (_bool, False),
    },
}

PATH_KEYS = {("data", "manifest"), ("data", "cache_dir"), ("data", "annotations"), ("model", "pretrained_global")}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=lambda: {
        s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})
    source: Path | None = None

    def __getitem__(self, dotted: str):
        section, key = _split(dotted)
        return self.values[section][key]

    def set(self, dotted: str, text: str) -> None:
        section, key = _split(dotted)
        parser = SCHEMA[section][key][0]
        try:
            value = parser(text)
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
        if (section, key) in PATH_KEYS and value:
            base = self.source.parent if self.source is not None else Path.cwd()
            value = str((base / value).resolve()) if not Path(value).is_absolute() else value
        self.values[section][key] = value

    @property
    def manifest_path(self) -> Path:
        return Path(self.values["data"]["manifest"])

    @property
    def seed(self) -> int:
        return int(self.values["train"]["seed"])

    def spectrogram(self) -> SpectrogramConfig:
        try:
            return SpectrogramConfig(**self.values["spectrogram"])
        except ValueError as exc:
            raise ConfigError(f"spectrogram: {exc}") from None

    def target_samples(self) -> int | None:
        secs = self.values["data"]["target_seconds"]
        if secs is None:
            return None
        return int(round(secs * self.values["spectrogram"]["target_sample_rate"]))

    def augment_policy(self) -> AugmentPolicy:
        v = {k: x for k, x in self.values["augment"].items() if k != "enabled"}
        try:
            return AugmentPolicy(**v, rng_seed=self.seed)
        except ValueError as exc:
            raise ConfigError(f"augment: {exc}") from None

    def model_config(self, n_classes: int) -> DualBackboneConfig:
        m = self.values["model"]
        try:
            return DualBackboneConfig.toy(n_classes, m["widths"], m["n_heads"], m["gru_hidden"],
                                          m["n_groups"], m["freeze_global"])
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def optimizer(self) -> OptimizerConfig:
        o = self.values["optimizer"]
        try:
            return OptimizerConfig(o["lr"], (o["beta1"], o["beta2"]), o["eps"], o["weight_decay"],
                                   o["gc_enabled"], grad_clip=o["grad_clip"])
        except ValueError as exc:
            raise ConfigError(f"optimizer: {exc}") from None

    def relabel(self) -> RelabelConfig:
        try:
            return RelabelConfig(**self.values["relabel"])
        except ValueError as exc:
            raise ConfigError(f"relabel: {exc}") from None

    def validate(self, need_manifest: bool = True) -> None:
        self.spectrogram()
        self.augment_policy()
        self.optimizer()
        self.relabel()
        t = self.values["train"]
        if t["epochs"] < 0 or t["batch_size"] < 1 or t["eval_every"] < 1:
            raise ConfigError("train: epochs must be >= 0, batch_size and eval_every >= 1")
        if need_manifest:
            if not self.values["data"]["manifest"]:
                raise ConfigError("data.manifest is not set")
            if not self.manifest_path.exists():
                raise ConfigError(f"manifest {self.manifest_path} does not exist")
        pre = self.values["model"]["pretrained_global"]
        if pre and not Path(pre).exists():
            raise ConfigError(f"pretrained checkpoint {pre} does not exist")

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, keys in self.values.items():
            cp[section] = {k: _format(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _split(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown setting '{dotted}'")
    return section, key


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    return key.strip(), value.strip()


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg.source = path.resolve()
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        cfg.set(*parse_override(item))
    return cfg

"""Urban sound tagging with a dual-backbone CRNN on log-mel spectrograms, built on
a small numpy autodiff core."""
from .dsp import LogMelSpectrogram, SpectrogramConfig, Waveform, log_mel, waveform_to_logmel
from .metrics import PredictionSet, metric_report
from .model import DualBackboneConfig, DualBackboneModel, load_model, save_model
from .optim import AdamWGC, OptimizerConfig
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "LogMelSpectrogram", "SpectrogramConfig", "Waveform", "log_mel", "waveform_to_logmel",
    "PredictionSet", "metric_report",
    "DualBackboneConfig", "DualBackboneModel", "load_model", "save_model",
    "AdamWGC", "OptimizerConfig",
    "Tensor", "backward", "grad_check",
]

"""AdamW with Gradient Centralization on convolution weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .layers import CONV_WEIGHT, Parameter
from .tensor import NonFiniteError, Tensor


MAX_PASSES = 8


def centralize_gradient(g: np.ndarray) -> np.ndarray:
    """Subtract from each output-channel slice (axis 0) its own mean.

    Gradients with fewer than two dimensions are returned unchanged. A slice
    whose computed mean is already within float64 rounding of zero (relative to
    its largest magnitude) is left untouched, which makes the map exactly
    idempotent.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if g.ndim < 2:
        return g
    axes = tuple(range(1, g.ndim))
    n = int(np.prod(g.shape[1:]))
    slack = 4.0 * (np.log2(max(n, 2)) + 2.0) * np.finfo(np.float64).eps
    out = g
    for _ in range(MAX_PASSES):
        mean = out.mean(axis=axes, keepdims=True)
        scale = np.abs(out).max(axis=axes, keepdims=True)
        off = np.abs(mean) > slack * scale
        if not off.any():
            break
        out = np.where(off, out - mean, out)
    return out


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    gc_enabled: bool = True
    gc_scope: frozenset[str] = field(default_factory=lambda: frozenset({CONV_WEIGHT}))
    grad_clip: float | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.gc_scope = frozenset(self.gc_scope)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class AdamWGC:
    """Decoupled-weight-decay Adam; centralization precedes the moment update."""

    def __init__(self, named_params: Iterable[tuple[str, Parameter]], cfg: OptimizerConfig | None = None):
        self.params = list(named_params)
        self.cfg = cfg or OptimizerConfig()
        self.state = AdamState()

    def _prepared_grads(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        grads = {}
        for name, p in self.params:
            if not p.requires_grad:
                continue
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            if cfg.gc_enabled and getattr(p, "role", None) in cfg.gc_scope:
                g = centralize_gradient(g)
            grads[name] = g
        if cfg.grad_clip is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > cfg.grad_clip:
                scale = cfg.grad_clip / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        return grads

    def step(self) -> None:
        cfg, st = self.cfg, self.state
        grads = self._prepared_grads()
        st.step += 1
        b1, b2 = cfg.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params:
            if name not in grads:
                continue
            g = grads[name]
            m = st.exp_avg.setdefault(name, np.zeros_like(p.data))
            v = st.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay:
                p.data = p.data * (1.0 - cfg.lr * cfg.weight_decay)
            p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def step(params: Iterable[tuple[str, Parameter]], cfg: OptimizerConfig, state: AdamState | None = None) -> AdamState:
    """Functional form: update ``params`` in place from their ``.grad`` and return the state."""
    opt = AdamWGC(params, cfg)
    if state is not None:
        opt.state = state
    opt.step()
    return opt.state

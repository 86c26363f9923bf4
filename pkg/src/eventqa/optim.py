"""AdamW with decoupled weight decay and a cosine-with-restarts schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class LrSchedule:
    """Linear warmup to ``peak_lr`` then cosine decay with warm restarts.

    Cycle ``c`` has length ``cycle_length * restart_multiplier ** c``; within a
    cycle the rate follows min + 0.5*(peak-min)*(1+cos(pi*tau/T)) where tau is
    the offset since the last restart. restart_multiplier 1.0 gives
    fixed-length cycles.
    """

    peak_lr: float
    min_lr: float = 0.0
    warmup_steps: int = 0
    cycle_length: int = 1000
    restart_multiplier: float = 1.0

    def __post_init__(self):
        if self.min_lr < 0 or self.peak_lr < self.min_lr:
            raise ValueError("need peak_lr >= min_lr >= 0")
        if self.warmup_steps < 0 or self.cycle_length < 1:
            raise ValueError("warmup_steps >= 0 and cycle_length >= 1 required")
        if self.restart_multiplier < 1.0:
            raise ValueError("restart_multiplier must be >= 1.0")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * (step / self.warmup_steps)
        tau = step - self.warmup_steps
        length = float(self.cycle_length)
        while tau >= length:
            tau -= length
            length *= self.restart_multiplier
        return self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (
            1.0 + math.cos(math.pi * tau / length)
        )

    def to_json(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "min_lr": self.min_lr,
            "warmup_steps": self.warmup_steps,
            "cycle_length": self.cycle_length,
            "restart_multiplier": self.restart_multiplier,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LrSchedule":
        return cls(**d)


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled weight decay Adam over a fixed list of named parameters.

    The decay term is applied to the parameter directly, scaled by the step's
    learning rate, and is independent of the gradient moments. Parameters
    absent from the computation graph (grad None) get a zero gradient, not an
    error.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps,
                                    weight_decay=weight_decay)
        for i, p in enumerate(self.params.values()):
            self.state.m[i] = np.zeros_like(p.data)
            self.state.v[i] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, lr: float) -> None:
        s = self.state
        s.t += 1
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for i, p in enumerate(self.params.values()):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"shape {p.data.shape}")
            s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g
            s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * (g * g)
            m_hat = s.m[i] / bc1
            v_hat = s.v[i] / bc2
            if s.weight_decay != 0.0:
                p.data -= lr * s.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + s.eps)

    def hyperparams(self) -> dict:
        s = self.state
        return {"beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
                "weight_decay": s.weight_decay, "t": s.t}

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment arrays keyed for checkpointing (resume support)."""
        out = {}
        for i, name in enumerate(self.params):
            out[f"opt.m.{name}"] = self.state.m[i]
            out[f"opt.v.{name}"] = self.state.v[i]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for i, name in enumerate(self.params):
            m = tensors.get(f"opt.m.{name}")
            v = tensors.get(f"opt.v.{name}")
            if m is None or v is None:
                raise ValueError(f"optimizer state missing for {name}")
            if m.shape != self.state.m[i].shape:
                raise ValueError(f"optimizer state shape mismatch for {name}")
            self.state.m[i] = m.copy()
            self.state.v[i] = v.copy()
        self.state.t = t

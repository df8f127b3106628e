"""Loss, AdamW and the cosine learning-rate schedule used for calibration."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_store import Tensor, load_tensors, save_tensors


class ParamKind(str, enum.Enum):
    ANGLES = "angles"
    ALPHA = "alpha"
    WEIGHTS = "weights"
    SCALES = "scales"
    ZERO_POINTS = "zeros"
    SKEW_U = "skew_u"


DEFAULT_LR = {
    ParamKind.ANGLES: 0.05,
    ParamKind.ALPHA: 0.05,
    ParamKind.WEIGHTS: 1e-5,
    ParamKind.SCALES: 1e-6,
    ParamKind.ZERO_POINTS: 1e-6,
    ParamKind.SKEW_U: 1e-3,
}


@dataclass
class ParamGroup:
    kind: ParamKind
    values: np.ndarray
    lr: float = 0.0

    def __post_init__(self):
        if not self.lr:
            self.lr = DEFAULT_LR[self.kind]
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def huber_loss(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean smooth-L1 loss and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) - target
    ad = np.abs(d)
    quad = ad < beta
    n = d.size
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / n
    grad = np.where(quad, d / beta, np.sign(d)) / n
    return float(loss), grad.astype(pred.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    d = pred.astype(np.float64) - target
    return float(np.mean(d * d)), (2.0 * d / d.size).astype(pred.dtype)


@dataclass
class AdamW:
    """AdamW with decoupled weight decay, one state slot per named parameter."""

    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    eps: float = 1e-10
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def step(self, name: str, p: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """Update ``p`` in place."""
        b1, b2 = self.betas
        if name not in self.m:
            self.m[name] = np.zeros(p.shape, np.float64)
            self.v[name] = np.zeros(p.shape, np.float64)
            self.steps[name] = 0
        m, v = self.m[name], self.v[name]
        if m.shape != p.shape:
            raise ValueError(f"state shape {m.shape} does not match parameter {p.shape}")
        self.steps[name] += 1
        t = self.steps[name]
        g = np.asarray(grad, np.float64)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        upd = p.astype(np.float64) * (1 - lr * self.weight_decay)
        upd -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        p[...] = upd

    def save(self, path) -> None:
        tensors = []
        for name in self.m:
            tensors.append(Tensor(f"{name}/m", self.m[name].astype(np.float32), "adam_m"))
            tensors.append(Tensor(f"{name}/v", self.v[name].astype(np.float32), "adam_v"))
        save_tensors(path, tensors, {"steps": self.steps, "betas": list(self.betas),
                                     "weight_decay": self.weight_decay, "eps": self.eps})

    @classmethod
    def load(cls, path) -> "AdamW":
        tensors, meta = load_tensors(path)
        opt = cls(tuple(meta["betas"]), meta["weight_decay"], meta["eps"])
        for name, step in meta["steps"].items():
            opt.m[name] = tensors[f"{name}/m"].data.astype(np.float64)
            opt.v[name] = tensors[f"{name}/v"].data.astype(np.float64)
            opt.steps[name] = int(step)
        return opt


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    floor_fraction: float = 1 / 20

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    floor = sched.base_lr / (1 / sched.floor_fraction)
    if step >= sched.total_steps:
        return floor
    if step <= 0:
        return sched.base_lr
    return floor + (sched.base_lr - floor) * 0.5 * (1 + math.cos(math.pi * step / sched.total_steps))

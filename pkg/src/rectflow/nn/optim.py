"""AdamW with decoupled weight decay, plus an exponential moving average."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, TrainingError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    ema_ratio: float = 0.999
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    shadow: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.ema_ratio < 1.0:
            raise InputError(f"EMA ratio must lie in [0, 1), got {self.ema_ratio}")
        if self.lr <= 0:
            raise InputError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def for_params(cls, params, **kwargs):
        opt = cls(**kwargs)
        opt.m = np.zeros(params.count)
        opt.v = np.zeros(params.count)
        opt.shadow = params.flat.copy()
        return opt


def adamw_step(opt, params, grads):
    """One AdamW update, in place on ``params.flat``. Returns ``params``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape or opt.m.shape != params.flat.shape:
        raise InputError("gradient / moment arrays must match the parameter count")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise TrainingError(
            f"non-finite gradient at parameter index {bad[0]} (step {opt.step + 1})",
            index=int(bad[0]), step=opt.step + 1,
        )
    b1, b2 = opt.betas
    opt.step += 1
    opt.m *= b1
    opt.m += (1.0 - b1) * grads
    opt.v *= b2
    opt.v += (1.0 - b2) * grads * grads
    m_hat = opt.m / (1.0 - b1**opt.step)
    v_hat = opt.v / (1.0 - b2**opt.step)
    theta = params.flat
    if opt.weight_decay:
        theta *= 1.0 - opt.lr * opt.weight_decay
    theta -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    bad = np.flatnonzero(~np.isfinite(theta))
    if bad.size:
        raise TrainingError(f"parameter {bad[0]} became non-finite", index=int(bad[0]), step=opt.step)
    return params


def ema_update(opt, params):
    """shadow <- ratio * shadow + (1 - ratio) * params."""
    r = opt.ema_ratio
    opt.shadow *= r
    opt.shadow += (1.0 - r) * params.flat
    return opt.shadow

"""Shared optimisation loop for base training, reflow and distillation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .datagen import make_training_batch
from .errors import InputError, TrainingError
from .flow import FlowStage, flow_loss
from .nn.mlp import MlpVelocityNet
from .nn.optim import OptimizerState, adamw_step, ema_update

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_ratio: float = 0.999
    null_dropout: float = 0.1
    # fraction of the final steps over which lr decays linearly to 10%
    decay_frac: float = 0.0
    seed: int = 0
    log_every: int = 100

    def validate(self):
        problems = []
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0.0 <= self.ema_ratio < 1.0:
            problems.append("ema_ratio must lie in [0, 1)")
        if not 0.0 <= self.null_dropout < 1.0:
            problems.append("null_dropout must lie in [0, 1)")
        if not 0.0 <= self.decay_frac <= 1.0:
            problems.append("decay_frac must lie in [0, 1]")
        return problems

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: np.ndarray
    ema: np.ndarray
    losses: np.ndarray
    opt: OptimizerState


def lr_at(cfg, step):
    """Constant rate, then a linear ramp down to 10% over the last ``decay_frac`` of steps."""
    if cfg.decay_frac <= 0:
        return cfg.lr
    start = cfg.steps * (1.0 - cfg.decay_frac)
    if step < start:
        return cfg.lr
    frac = (step - start) / max(cfg.steps - start, 1)
    return cfg.lr * (1.0 - 0.9 * frac)


def train(net, batch_loss, cfg, opt=None):
    """Minimise ``batch_loss(rng)`` over ``net``'s parameters with AdamW + EMA.

    ``batch_loss`` draws its own minibatch from the generator it is given and
    returns a scalar graph Tensor built from ``net.forward``. The network's
    parameters are updated in place; the EMA shadow starts at the initial
    parameters.
    """
    problems = cfg.validate()
    if problems:
        raise InputError("; ".join(problems))
    rng = np.random.default_rng(cfg.seed)
    if opt is None:
        opt = OptimizerState.for_params(
            net.params, lr=cfg.lr, weight_decay=cfg.weight_decay, ema_ratio=cfg.ema_ratio
        )
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        loss = batch_loss(rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss became {value} at step {step + 1}", step=step + 1)
        losses[step] = value
        grads = net.backward(loss)
        opt.lr = lr_at(cfg, step)
        adamw_step(opt, net.params, grads)
        ema_update(opt, net.params)
        if cfg.log_every and (step + 1) % (cfg.log_every * 20) == 0:
            log.info("step %d/%d loss %.5f", step + 1, cfg.steps, losses[step + 1 - cfg.log_every : step + 1].mean())
    return TrainResult(net.params.flat.copy(), opt.shadow.copy(), losses, opt)


def write_loss_log(path, losses, every=100, phase=None):
    """Window-averaged loss curve: one row per ``every`` steps."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"] + (["phase"] if phase is not None else []))
        phases = phase if phase is not None else [None] * len(losses)
        for end in range(every, len(losses) + every, every):
            end = min(end, len(losses))
            window = losses[end - every if end >= every else 0 : end]
            row = [end, repr(float(window.mean()))]
            if phase is not None:
                row.append(phases[end - 1])
            w.writerow(row)
            if end == len(losses):
                break


def train_base(spec, cfg, hidden=(64, 64, 64), cond_dim=8, time_freqs=8, alpha=1.0, init_seed=None):
    """Train ``v_1`` on the independent coupling of the prior and ``spec``.

    Returns ``(stage, losses)``. ``alpha`` is the guidance scale the stage
    will sample with by default (used for pair generation).
    """
    net = MlpVelocityNet(spec.dim, hidden, spec.vocab, cond_dim, time_freqs)
    net.init_params(np.random.default_rng(cfg.seed if init_seed is None else init_seed))

    def batch_loss(rng):
        return flow_loss(net, make_training_batch(spec, cfg.batch_size, cfg.null_dropout, rng), rng)

    result = train(net, batch_loss, cfg)
    stage = FlowStage(net, ema=result.ema, k=1, alpha=alpha, provenance={"train": cfg.to_dict()})
    return stage, result.losses

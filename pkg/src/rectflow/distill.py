"""One-step distillation: fit ``x0 + v(x0, 0 | c)`` to a teacher's endpoints."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, UsageError
from .flow import FLOW, ONE_STEP, FlowStage, stage_fingerprint
from .nn.autodiff import Tensor
from .nn.mlp import MlpVelocityNet, ParamStore
from .reflow import check_lineage
from .training import train

L2 = "l2"
PATCH = "patch"


def pooling_matrix(grid, p):
    """``(h*w, (h/p)*(w/p))`` matrix averaging non-overlapping ``p x p`` patches."""
    h, w = grid
    if h % p or w % p:
        raise InputError(f"patch size {p} does not tile a {h}x{w} grid")
    rows = np.arange(h * w) // w
    cols = np.arange(h * w) % w
    patch = (rows // p) * (w // p) + cols // p
    m = np.zeros((h * w, (h // p) * (w // p)))
    m[np.arange(h * w), patch] = 1.0 / (p * p)
    return m


@dataclass
class SimilarityLoss:
    """Per-sample distance between two batches of states.

    ``l2`` is the squared Euclidean distance. ``patch`` is the multiscale
    surrogate ``sum_p w_p * p^2 * ||P_p (a - b)||^2`` where ``P_p`` averages
    ``p x p`` patches of the ``grid``-shaped state; scale 1 is plain L2, so the
    value is 0 only for identical inputs. Without a grid, ``patch`` reduces to
    ``l2``.
    """

    variant: str = L2
    grid: tuple = None
    scales: tuple = (1, 2, 4)
    weights: tuple = None

    def __post_init__(self):
        if self.variant not in (L2, PATCH):
            raise InputError(f"unknown similarity loss {self.variant!r}")
        self._mats = None
        if self.variant == PATCH and self.grid is not None:
            scales = [p for p in self.scales if self.grid[0] % p == 0 and self.grid[1] % p == 0]
            if 1 not in scales:
                raise InputError("the patch loss needs scale 1 to stay positive definite")
            w = np.ones(len(scales)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
            if len(w) != len(scales) or np.any(w <= 0):
                raise InputError("one positive weight per usable scale is required")
            w = w / w.sum()
            self._mats = [(float(wi * p * p), None if p == 1 else pooling_matrix(self.grid, p))
                          for wi, p in zip(w, scales)]

    @property
    def name(self):
        return PATCH if self._mats is not None else L2

    def per_sample(self, a, b):
        diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        diff = np.atleast_2d(diff)
        if self._mats is None:
            return np.einsum("ij,ij->i", diff, diff)
        out = np.zeros(len(diff))
        for scale, m in self._mats:
            pooled = diff if m is None else diff @ m
            out += scale * np.einsum("ij,ij->i", pooled, pooled)
        return out

    def __call__(self, a, b):
        return float(self.per_sample(a, b).mean())

    def tensor(self, pred, target):
        """Batch mean as a graph Tensor (``pred`` a Tensor, ``target`` an array)."""
        diff = pred - target
        if self._mats is None:
            return diff.square().sum(axis=1).mean()
        total = None
        for scale, m in self._mats:
            pooled = diff if m is None else diff @ m
            term = pooled.square().sum(axis=1).mean() * scale
            total = term if total is None else total + term
        return total

    def describe(self):
        return {"variant": self.name, "grid": None if self.grid is None else list(self.grid),
                "scales": list(self.scales)}


def distill_loss(student, x0, x1, cond, loss):
    """Mean ``D(x1, x0 + v(x0, 0 | c))``; the student runs at t = 0."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 2 or x0.shape[1] != student.dim:
        raise InputError(f"x0 {x0.shape}, x1 {x1.shape} do not fit a student of dimension {student.dim}")
    pred = student.forward(x0, np.zeros(len(x0)), cond) + x0
    return loss.tensor(pred, x1)


def widen_params(net, hidden, rng, scale=1e-2):
    """Copy ``net`` into wider hidden layers without changing its function.

    New units get small random input weights and zero output weights, so the
    output is unchanged and the new weights still receive gradient.
    """
    hidden = tuple(int(h) for h in hidden)
    if len(hidden) != len(net.hidden) or any(a < b for a, b in zip(hidden, net.hidden)):
        raise InputError("a student may only widen the teacher's hidden layers")
    wide = MlpVelocityNet(net.dim, hidden, net.vocab, net.cond_dim, net.time_freqs)
    src, dst = net.params.views(), wide.params.views()
    dst["cond_emb"][...] = src["cond_emb"]
    for name, arr in dst.items():
        if name == "cond_emb":
            continue
        old = src[name]
        if name.startswith("W"):
            arr[...] = scale * rng.normal(size=arr.shape) / np.sqrt(arr.shape[0])
            arr[old.shape[0]:, :] = 0.0  # inputs from new units: zero
            arr[: old.shape[0], : old.shape[1]] = old
        else:
            arr[: old.shape[0]] = old
    return wide


def default_schedule(steps, grid=None, l2_fraction=0.5):
    """L2 first, then the patch surrogate (plain L2 again for non-grid data)."""
    first = int(round(steps * l2_fraction))
    return [(SimilarityLoss(L2), first), (SimilarityLoss(PATCH, grid=grid), steps - first)]


def distill(teacher, pairs, schedule, cfg, widen=None):
    """Train a one-step student ``v~_k`` on the teacher's coupling pairs.

    ``schedule`` is a list of ``(SimilarityLoss, steps)`` phases run back to
    back with one optimizer; the student starts from the teacher's EMA weights
    and always sees t = 0. Returns ``(stage, losses, phase_labels)``.
    """
    if teacher.role != FLOW:
        raise UsageError("the teacher must be a continuous flow")
    if len(pairs) == 0:
        raise InputError("distillation needs at least one coupling pair")
    if pairs.dim != teacher.dim:
        raise InputError(f"pairs have dimension {pairs.dim}, teacher {teacher.dim}")
    check_lineage(teacher, pairs)
    net = teacher.net.with_params(teacher.ema)
    if widen:
        net = widen_params(net, widen, np.random.default_rng(cfg.seed))

    opt = None
    losses, labels = [], []
    for phase, (loss, steps) in enumerate(schedule):
        if steps <= 0:
            continue
        phase_cfg = replace(cfg, steps=steps, seed=cfg.seed + 1000 * phase)

        def batch_loss(rng, loss=loss):
            idx = rng.integers(0, len(pairs), size=cfg.batch_size)
            return distill_loss(net, pairs.x0[idx], pairs.x1[idx], pairs.cond[idx], loss)

        result = train(net, batch_loss, phase_cfg, opt=opt)
        opt = result.opt
        losses.append(result.losses)
        labels += [f"{phase + 1}:{loss.name}"] * steps
    ema = net.params.flat.copy() if opt is None else opt.shadow.copy()
    stage = FlowStage(
        net, ema=ema, k=teacher.k, role=ONE_STEP, alpha=1.0, teacher_k=teacher.k,
        provenance={
            "train": cfg.to_dict(),
            "teacher": teacher.stage_id,
            "teacher_fingerprint": stage_fingerprint(teacher),
            "schedule": [[loss.describe(), int(steps)] for loss, steps in schedule],
            "widen": list(widen) if widen else None,
        },
    )
    all_losses = np.concatenate(losses) if losses else np.zeros(0)
    return stage, all_losses, labels


def one_step_generate(stage, z0, c):
    """``z0 + v~(z0, 0 | c)``; no integration and no guidance."""
    if stage.role != ONE_STEP:
        raise UsageError(f"stage {stage.stage_id} is a continuous flow; simulate it with euler_simulate")
    z0 = np.asarray(z0, dtype=np.float64)
    z = np.atleast_2d(z0)
    cond = np.broadcast_to(np.asarray(c), (len(z),)).copy()
    out = z + 1.0 * stage.velocity(z, 0.0, cond)
    return out[0] if z0.ndim == 1 else out

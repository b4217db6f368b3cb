"""Reflow: simulate a stage to build a deterministic coupling, then train the
next stage on it with the same straight-line regression loss.

Pair file layout (little-endian)::

    4 bytes   magic b"RFPR"
    uint32    format version
    uint64    metadata length
    ...       metadata, UTF-8 JSON (sorted keys; includes ``count`` and ``dim``)
    float64   count x 2d records, each ``[x0 | x1]``
    int64     count condition indices
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import TrainingBatch
from .errors import FormatError, InputError, LineageError, RectFlowError, SimulationError, UsageError
from .flow import FLOW, FlowStage, euler_simulate, flow_loss, stage_fingerprint
from .nn.checkpoint import read_container, write_container
from .nn.mlp import NULL
from .training import TrainConfig, train

log = logging.getLogger(__name__)

PAIR_MAGIC = b"RFPR"
PAIR_VERSION = 1
BLOCK = 1024


@dataclass(frozen=True)
class CouplingPair:
    x0: np.ndarray
    x1: np.ndarray
    cond: int
    k: int
    alpha: float


@dataclass
class PairDataset:
    """Columnar store of coupling pairs plus the metadata of their generation."""

    x0: np.ndarray
    x1: np.ndarray
    cond: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.int64)
        if self.x0.ndim != 2 or self.x0.shape != self.x1.shape or len(self.cond) != len(self.x0):
            raise InputError(
                f"pair arrays disagree: x0 {self.x0.shape}, x1 {self.x1.shape}, cond {self.cond.shape}"
            )

    def __len__(self):
        return len(self.x0)

    @property
    def dim(self):
        return self.x0.shape[1]

    def __getitem__(self, i):
        return CouplingPair(self.x0[i], self.x1[i], int(self.cond[i]),
                            self.meta.get("k"), self.meta.get("alpha"))

    def subset(self, idx):
        return PairDataset(self.x0[idx], self.x1[idx], self.cond[idx], dict(self.meta))


def block_seed(seed, block):
    """Independent stream for one block of pairs; order-stable across workers."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))


def _pair_block(stage, probs, seed, block, lo, hi, n_steps, alpha):
    rng = block_seed(seed, block)
    m = hi - lo
    x0 = rng.normal(size=(m, stage.dim))
    cond = 1 + rng.choice(len(probs), size=m, p=probs)
    try:
        traj = euler_simulate(stage, x0, cond, n_steps, alpha, keep_path=False)
    except SimulationError as exc:
        raise SimulationError(
            f"pair {lo + exc.index}: non-finite state at Euler step {exc.step}",
            step=exc.step, index=lo + exc.index,
        ) from exc
    return x0, traj.z1, cond


def generate_pairs(stage, label_probs, count, n_steps=25, alpha=None, seed=0, threads=1):
    """Pairs ``(x0, T(x0 | c))`` with ``T`` the ``n_steps`` Euler map of ``stage``.

    Noise and labels come in blocks of 1024 pairs, each block drawing from its
    own seed stream, so the dataset does not depend on ``threads``.
    """
    if count < 1:
        raise InputError("pair count must be >= 1")
    if stage.role != FLOW:
        raise UsageError("pairs must be generated from a continuous flow, not a one-step model")
    alpha = stage.alpha if alpha is None else float(alpha)
    probs = np.asarray(label_probs, dtype=np.float64)
    if len(probs) != stage.vocab - 1 or np.any(probs < 0) or probs.sum() <= 0:
        raise InputError(f"label_probs must hold {stage.vocab - 1} non-negative weights")
    probs = probs / probs.sum()
    getattr(stage, "model", None)  # build the frozen EMA network before any worker touches it
    bounds = [(b, lo, min(lo + BLOCK, count)) for b, lo in enumerate(range(0, count, BLOCK))]

    def work(item):
        b, lo, hi = item
        return _pair_block(stage, probs, seed, b, lo, hi, n_steps, alpha)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(item) for item in bounds]
    meta = {
        "stage_id": stage.stage_id,
        "k": stage.k,
        "stage_fingerprint": stage_fingerprint(stage),
        "n_steps": int(n_steps),
        "alpha": float(alpha),
        "seed": int(seed),
        "count": int(count),
        "dim": int(stage.dim),
        "label_probs": [float(p) for p in probs],
    }
    return PairDataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        meta,
    )


def save_pairs(path, pairs, **extra):
    meta = dict(pairs.meta, count=len(pairs), dim=pairs.dim, **extra)
    records = np.concatenate([pairs.x0, pairs.x1], axis=1)
    write_container(path, PAIR_MAGIC, PAIR_VERSION, meta, [(records, "<f8"), (pairs.cond, "<i8")])


def read_pair_meta(path):
    return read_container(path, PAIR_MAGIC, PAIR_VERSION)[0]


def load_pairs(path):
    meta, payload = read_container(path, PAIR_MAGIC, PAIR_VERSION)
    n, d = meta["count"], meta["dim"]
    if len(payload) != n * (2 * d * 8 + 8):
        raise FormatError(f"{path}: payload size does not match {n} pairs of dimension {d}")
    records = np.frombuffer(payload, dtype="<f8", count=n * 2 * d).reshape(n, 2 * d)
    cond = np.frombuffer(payload, dtype="<i8", count=n, offset=n * 2 * d * 8)
    return PairDataset(records[:, :d].copy(), records[:, d:].copy(), cond.astype(np.int64), meta)


def check_lineage(stage, pairs):
    """Raise :class:`LineageError` unless ``pairs`` were simulated from ``stage``."""
    claimed = pairs.meta.get("stage_fingerprint")
    if claimed is not None and claimed != stage_fingerprint(stage):
        raise LineageError(
            f"pairs claim stage {pairs.meta.get('stage_id')} ({claimed}) "
            f"but the given teacher is {stage.stage_id} ({stage_fingerprint(stage)})"
        )


def pair_sampler(pairs, batch_size, null_dropout):
    """``rng -> TrainingBatch`` drawing pairs with replacement, with NULL dropout."""

    def draw(rng):
        idx = rng.integers(0, len(pairs), size=batch_size)
        cond = pairs.cond[idx]
        if null_dropout > 0:
            cond = np.where(rng.random(batch_size) < null_dropout, NULL, cond)
        return TrainingBatch(pairs.x0[idx], pairs.x1[idx], cond, pairs.cond[idx])

    return draw


def reflow_step(teacher, pairs, cfg, alpha=1.0):
    """Train ``v_{k+1}`` on the teacher's deterministic coupling.

    The student starts from the teacher's EMA weights; pairs are resampled with
    replacement and conditions dropped to NULL at ``cfg.null_dropout``.
    """
    if len(pairs) == 0:
        raise InputError("reflow needs at least one coupling pair")
    if teacher.role != FLOW:
        raise UsageError("only a continuous flow can be reflowed")
    if pairs.dim != teacher.dim:
        raise InputError(f"pairs have dimension {pairs.dim}, teacher {teacher.dim}")
    check_lineage(teacher, pairs)
    net = teacher.net.with_params(teacher.ema)
    draw = pair_sampler(pairs, cfg.batch_size, cfg.null_dropout)

    def batch_loss(rng):
        return flow_loss(net, draw(rng), rng)

    result = train(net, batch_loss, cfg)
    stage = FlowStage(
        net, ema=result.ema, k=teacher.k + 1, alpha=alpha,
        provenance={
            "train": cfg.to_dict(),
            "teacher": teacher.stage_id,
            "teacher_fingerprint": stage_fingerprint(teacher),
            "pairs": {k: pairs.meta.get(k) for k in ("count", "n_steps", "alpha", "seed")},
        },
    )
    return stage, result.losses


def stage_configs(base_cfg, k_max, decay=0.1):
    """Per-stage configs for ``v_2 .. v_kmax``; the rate drops by ``decay`` from k=3 on."""
    out = []
    for k in range(2, k_max + 1):
        lr = base_cfg.lr * (decay if k >= 3 else 1.0)
        out.append(replace(base_cfg, lr=lr, seed=base_cfg.seed + k))
    return out


def run_reflow_chain(base, k_max, configs, label_probs, pair_count, n_steps=25,
                     pair_seed=0, threads=1, save=None):
    """Stages ``v_2 .. v_kmax`` from ``base``; each trained on pairs of its predecessor.

    ``configs`` is a list of :class:`TrainConfig` (one per new stage) or a single
    config expanded by :func:`stage_configs`. ``save(stage, pairs, losses)``,
    when given, persists each stage as soon as it exists.
    """
    if k_max < 2:
        raise InputError("k_max must be >= 2")
    if isinstance(configs, TrainConfig):
        configs = stage_configs(configs, k_max)
    if len(configs) != k_max - 1:
        raise InputError(f"need {k_max - 1} stage configs, got {len(configs)}")
    stages = []
    teacher = base
    for cfg in configs:
        k = teacher.k + 1
        try:
            pairs = generate_pairs(teacher, label_probs, pair_count, n_steps, None, pair_seed + k, threads)
            student, losses = reflow_step(teacher, pairs, cfg)
        except RectFlowError as exc:
            exc.stage = k
            exc.args = (f"reflow stage v{k}: {exc}",)
            raise
        if save is not None:
            save(student, pairs, losses)
        stages.append(student)
        teacher = student
    return stages

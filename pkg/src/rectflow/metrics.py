"""Straightness, transport cost, two-sample distances and coupling fidelity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InputError, UsageError
from .flow import FLOW, ONE_STEP, euler_simulate

BLOCK = 1024
MEDIAN_MAX_POINTS = 4000


def _conditions(stage, n, rng, conditions):
    """Label array of length ``n`` from an explicit array or label weights."""
    if conditions is None:
        conditions = np.full(stage.vocab - 1, 1.0 / (stage.vocab - 1))
    conditions = np.asarray(conditions)
    if np.issubdtype(conditions.dtype, np.integer):
        if len(conditions) != n:
            raise InputError(f"need {n} condition labels, got {len(conditions)}")
        return conditions
    p = conditions / conditions.sum()
    return 1 + rng.choice(len(p), size=n, p=p)


def shared_inputs(stage, n, seed, conditions=None):
    """Noise and labels used by the evaluation routines (seeded, reproducible)."""
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(n, stage.dim))
    return z0, _conditions(stage, n, rng, conditions)


def straightness(stage, n_traj=1000, n_steps=100, conditions=None, alpha=None, seed=0,
                 per_trajectory=False):
    """``S(Z)``: mean over trajectories and Euler grid times of ``||(z1 - z0) - v_i||^2``.

    ``v_i`` is the (guided) velocity actually used at step ``i``, i.e. a left
    endpoint Riemann sum of the time integral. With ``per_trajectory=True`` the
    per-trajectory values are returned instead of their mean.
    """
    if getattr(stage, "role", FLOW) == ONE_STEP:
        raise UsageError("straightness is undefined for a distilled one-step stage")
    if n_steps < 2:
        raise InputError("straightness needs n_steps >= 2")
    alpha = getattr(stage, "alpha", 1.0) if alpha is None else alpha
    z0, cond = shared_inputs(stage, n_traj, seed, conditions)
    traj = euler_simulate(stage, z0, cond, n_steps, alpha)
    disp = traj.z1 - traj.z0
    dev = ((disp[None] - traj.velocities) ** 2).sum(axis=2)
    per = dev.mean(axis=0)
    return per if per_trajectory else float(per.mean())


def transport_cost(x0, x1, cost="l2sq"):
    """Mean of ``c(x1 - x0)`` with ``c = ||.||^2`` (``l2sq``) or ``||.||`` (``l2``)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape or len(x0) == 0:
        raise InputError("transport cost needs two non-empty arrays of equal shape")
    sq = np.einsum("ij,ij->i", x1 - x0, x1 - x0)
    if cost == "l2sq":
        return float(sq.mean())
    if cost == "l2":
        return float(np.sqrt(sq).mean())
    raise InputError(f"unknown cost {cost!r}")


def _check_pair(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise InputError(f"sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise InputError("both sample sets must be non-empty")
    return a, b


def _block_sum(a, b, fn):
    """``sum_ij fn(||a_i - b_j||)`` accumulated block by block in a fixed order."""
    total = 0.0
    for i in range(0, len(a), BLOCK):
        for j in range(0, len(b), BLOCK):
            total += float(fn(cdist(a[i : i + BLOCK], b[j : j + BLOCK])).sum())
    return total


def _within_mean(a, fn):
    """U-statistic mean of ``fn(distance)`` over ordered pairs ``i != j``."""
    n = len(a)
    if n < 2:
        return 0.0
    diag = n * float(fn(np.zeros(1))[0])
    return (_block_sum(a, a, fn) - diag) / (n * (n - 1))


def energy_distance(a, b, clip=True):
    """``2 E||a - b|| - E||a - a'|| - E||b - b'||`` (U-statistics), clipped at 0.

    ``clip=False`` returns the raw estimate, which fluctuates around 0 when
    both sets come from one distribution.
    """
    a, b = _check_pair(a, b)
    ident = lambda d: d  # noqa: E731
    cross = _block_sum(a, b, ident) / (len(a) * len(b))
    value = 2.0 * cross - _within_mean(a, ident) - _within_mean(b, ident)
    return max(value, 0.0) if clip else value


def median_bandwidth(a, b, max_points=MEDIAN_MAX_POINTS, seed=0):
    """Median pairwise distance of the pooled sample (subsampled above ``max_points``)."""
    pooled = np.concatenate(_check_pair(a, b))
    if len(pooled) > max_points:
        idx = np.random.default_rng(seed).choice(len(pooled), size=max_points, replace=False)
        pooled = pooled[np.sort(idx)]
    return float(np.median(pdist(pooled)))


def mmd_gaussian(a, b, bandwidth="median", biased=False):
    """Squared MMD with kernel ``exp(-||x - y||^2 / (2 h^2))``.

    Unbiased by default (within-set sums skip the diagonal), so the value can
    be slightly negative and is reported raw. ``biased=True`` keeps the
    diagonal and is exactly 0 for identical sets.
    """
    a, b = _check_pair(a, b)
    if len(a) < 2 or len(b) < 2:
        raise InputError("MMD needs at least two samples per set")
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if not h > 0:
        raise InputError("bandwidth must be positive")
    kern = lambda d: np.exp(-(d * d) / (2.0 * h * h))  # noqa: E731
    cross = _block_sum(a, b, kern) / (len(a) * len(b))
    if biased:
        within_a = _block_sum(a, a, kern) / len(a) ** 2
        within_b = _block_sum(b, b, kern) / len(b) ** 2
    else:
        within_a = _within_mean(a, kern)
        within_b = _within_mean(b, kern)
    return within_a + within_b - 2.0 * cross


def stage_samples(stage, z0, cond, n_steps=None, alpha=None):
    """Endpoints of ``stage`` from the given noise (one step for distilled stages)."""
    if stage.role == ONE_STEP:
        n_steps, alpha = 1, 1.0
    alpha = stage.alpha if alpha is None else alpha
    return euler_simulate(stage, z0, cond, n_steps, alpha, keep_path=False).z1


def coupling_fidelity(teacher, student, loss, n=2000, seed=0, conditions=None, n_steps=25, alpha=None):
    """Mean ``D(teacher endpoint, student one-step output)`` on shared noise and labels."""
    if teacher.role != FLOW:
        raise UsageError("coupling fidelity needs a continuous-flow teacher")
    if student.role != ONE_STEP:
        raise UsageError("coupling fidelity needs a distilled one-step student")
    z0, cond = shared_inputs(teacher, n, seed, conditions)
    target = stage_samples(teacher, z0, cond, n_steps, alpha)
    return loss(target, stage_samples(student, z0, cond))


@dataclass
class MetricsRecord:
    """One evaluation row. Fields that do not apply to a stage are ``None``
    (straightness of a one-step model, fidelity of a flow)."""

    stage_id: str
    k: int
    role: str
    alpha: float
    n_steps: int
    straightness: float = None
    cost_l2sq: float = None
    cost_l2: float = None
    energy_distance: float = None
    mmd: float = None
    mmd_bandwidth: float = None
    coupling_fidelity: float = None
    n_samples: int = 0
    n_traj: int = 0
    seed: int = 0
    noise: str = "standard-gaussian"
    conditions: str = ""

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def validate(self):
        for name in ("straightness", "cost_l2sq", "cost_l2", "energy_distance", "coupling_fidelity"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise InputError(f"{name} must be finite and non-negative, got {v}")
        if self.mmd is not None and not math.isfinite(self.mmd):
            raise InputError("mmd must be finite")
        return self

    def to_dict(self):
        return asdict(self)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.columns())
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in MetricsRecord.columns()])


def write_metrics_json(path, records):
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_metrics_csv(path):
    types = {f.name: f.type for f in fields(MetricsRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                if types[k] in ("str", str):
                    vals[k] = v
                elif v == "":
                    vals[k] = None
                elif types[k] in ("int", int):
                    vals[k] = int(v)
                elif types[k] in ("float", float):
                    vals[k] = float(v)
                else:
                    vals[k] = v
            out.append(MetricsRecord(**vals))
    return out

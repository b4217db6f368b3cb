"""Rectified-flow mathematics: straight interpolation, the velocity regression
loss, forward-Euler simulation and the classifier-free-guidance velocity."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, SimulationError, UsageError
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.mlp import NULL, MlpVelocityNet

FLOW = "flow"
ONE_STEP = "one-step"


@dataclass
class FlowStage:
    """A trained velocity field plus its place in the reflow chain.

    ``net`` holds the raw (training) weights, ``ema`` the shadow weights used
    for every evaluation.  ``alpha`` is the guidance scale this stage samples
    with by default (pair generation, evaluation).
    """

    net: MlpVelocityNet
    ema: np.ndarray = None
    k: int = 1
    role: str = FLOW
    alpha: float = 1.0
    stage_id: str = ""
    teacher_k: int = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"reflow index must be >= 1, got {self.k}")
        if self.role not in (FLOW, ONE_STEP):
            raise InputError(f"unknown stage role {self.role!r}")
        if self.role == ONE_STEP and self.teacher_k is None:
            raise InputError("a distilled stage must record the k of its teacher")
        if self.ema is None:
            self.ema = self.net.params.flat.copy()
        if not self.stage_id:
            self.stage_id = f"v{self.k}" + ("+distill" if self.role == ONE_STEP else "")
        self._model = None

    @property
    def dim(self):
        return self.net.dim

    @property
    def vocab(self):
        return self.net.vocab

    @property
    def model(self):
        """Network carrying the EMA weights (built once, read-only afterwards)."""
        if self._model is None:
            self._model = self.net.with_params(self.ema)
        return self._model

    def refresh(self):
        self._model = None

    def velocity(self, x, t, c):
        return self.model(x, t, c)


class AnalyticField:
    """Velocity field given by a Python callable ``fn(x, t, c) -> array``.

    Useful for closed-form checks (constant, linear or time-only fields).
    """

    def __init__(self, fn, dim, k=1, role=FLOW, alpha=1.0, vocab=4):
        self.fn = fn
        self.dim = dim
        self.k = k
        self.role = role
        self.alpha = alpha
        self.vocab = vocab
        self.stage_id = f"analytic-v{k}"

    def velocity(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(self.fn(x, t, c), dtype=np.float64)
        return np.broadcast_to(v, x.shape).copy()


@dataclass
class Trajectory:
    """Euler states ``Z_{i/N}``, shape ``(N + 1, B, d)``."""

    states: np.ndarray
    times: np.ndarray
    cond: np.ndarray
    alpha: float
    velocities: np.ndarray = None

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def z0(self):
        return self.states[0]

    @property
    def z1(self):
        return self.states[-1]

    def __len__(self):
        return len(self.times)


def interpolate(x0, x1, t):
    """Straight-line interpolation; returns ``(x_t, dx_t/dt)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise InputError(f"x0 {x0.shape} and x1 {x1.shape} differ in shape")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1, x1 - x0


def flow_loss(net, batch, rng, t=None):
    """Mean over the batch of ``||(x1 - x0) - v(x_t, t | c)||^2``.

    One uniform time per pair unless ``t`` is given. Returns a graph-recording
    :class:`~rectflow.nn.Tensor`.
    """
    x0, x1, cond = np.asarray(batch.x0), np.asarray(batch.x1), np.asarray(batch.cond)
    if len(x0) == 0:
        raise InputError("flow_loss needs a non-empty batch")
    if t is None:
        t = rng.random(len(x0))
    xt, target = interpolate(x0, x1, t)
    pred = net.forward(xt, t, cond)
    return (pred - target).square().sum(axis=1).mean()


def guided_velocity(stage, x, t, c, alpha):
    """``alpha * v(x, t | c) + (1 - alpha) * v(x, t | NULL)``."""
    if alpha == 1.0:
        return stage.velocity(x, t, c)
    null = np.full(np.shape(c), NULL) if np.ndim(c) else NULL
    v_null = stage.velocity(x, t, null)
    if alpha == 0.0:
        return v_null
    return alpha * stage.velocity(x, t, c) + (1.0 - alpha) * v_null


def _as_batch(z0, c):
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    cond = np.broadcast_to(np.asarray(c), (len(z),)).copy()
    return z, cond


def euler_simulate(stage, z0, c, n_steps, alpha=1.0, keep_path=True):
    """Forward Euler with step ``1/N`` under the guided velocity.

    ``z0`` may be one state ``(d,)`` or a batch ``(B, d)``; the trajectory
    always stores a batch axis.  With ``keep_path=False`` only the two
    endpoints are kept (``states`` has length 2 then, ``times`` still spans
    the full grid).
    """
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    if alpha < 0:
        raise InputError("guidance scale must be >= 0")
    # a one-step model *is* a single unguided Euler step; nothing else is defined for it
    if getattr(stage, "role", FLOW) == ONE_STEP and (n_steps != 1 or alpha != 1.0):
        raise UsageError("a distilled one-step stage only supports N=1, alpha=1; use one_step_generate")
    z, cond = _as_batch(z0, c)
    times = np.arange(n_steps + 1) / n_steps
    dt = 1.0 / n_steps
    states = [z.copy()]
    velocities = [] if keep_path else None
    for i in range(n_steps):
        v = guided_velocity(stage, z, times[i], cond, alpha)
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            row = int(np.flatnonzero(~np.all(np.isfinite(z), axis=1))[0])
            raise SimulationError(f"non-finite state at Euler step {i + 1} (row {row})", step=i + 1, index=row)
        if keep_path:
            states.append(z.copy())
            velocities.append(v)
    if not keep_path:
        states.append(z)
    return Trajectory(
        states=np.stack(states),
        times=times,
        cond=cond,
        alpha=float(alpha),
        velocities=np.stack(velocities) if keep_path else None,
    )


def euler_endpoint(stage, z0, c, n_steps, alpha=1.0):
    """Final state of :func:`euler_simulate`; a 1-D ``z0`` gives a 1-D result."""
    z0 = np.asarray(z0, dtype=np.float64)
    out = euler_simulate(stage, z0, c, n_steps, alpha, keep_path=False).z1
    return out[0] if z0.ndim == 1 else out


def write_trajectories_csv(path, traj, ids=None, coords=None):
    """One row per (trajectory, step): ``traj_id, step, t, x_0.., condition, alpha``.

    ``coords`` restricts the exported state coordinates (for high-dimensional
    data, e.g. a few pixels).
    """
    states = traj.states
    n_traj, d = states.shape[1], states.shape[2]
    coords = list(range(d)) if coords is None else list(coords)
    ids = list(range(n_traj)) if ids is None else list(ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "step", "t"] + [f"x_{j}" for j in coords] + ["condition", "alpha"])
        for b in range(n_traj):
            for i, t in enumerate(traj.times):
                w.writerow([ids[b], i, repr(float(t))]
                           + [repr(float(states[i, b, j])) for j in coords]
                           + [int(traj.cond[b]), repr(traj.alpha)])


def constant_stage(u, vocab=4, hidden=(8,), k=1, **kwargs):
    """A network stage whose velocity is exactly ``u`` everywhere.

    Built by zeroing the last weight matrix and putting ``u`` in the last bias.
    """
    u = np.asarray(u, dtype=np.float64)
    net = MlpVelocityNet(len(u), hidden=hidden, vocab=vocab, cond_dim=2, time_freqs=2)
    net.init_params(np.random.default_rng(0))
    last = net.n_layers - 1
    net.params.views()[f"b{last}"][...] = u
    return FlowStage(net, k=k, **kwargs)


def stage_fingerprint(stage):
    """Short content hash of a stage's evaluation weights and identity."""
    h = hashlib.sha256()
    h.update(json.dumps([stage.stage_id, stage.k, stage.role, float(stage.alpha)]).encode())
    ema = getattr(stage, "ema", None)
    if ema is not None:
        h.update(np.ascontiguousarray(ema, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_stage(path, stage, **extra):
    """Write ``stage`` to a checkpoint; ``extra`` lands in the header metadata."""
    meta = {
        "stage_id": stage.stage_id,
        "k": stage.k,
        "role": stage.role,
        "alpha": float(stage.alpha),
        "teacher_k": stage.teacher_k,
        "provenance": stage.provenance,
        "fingerprint": stage_fingerprint(stage),
    }
    meta.update(extra)
    save_checkpoint(path, stage.net, stage.ema, meta)


def load_stage(path):
    """Inverse of :func:`save_stage`; returns ``(stage, meta)``."""
    net, ema, meta = load_checkpoint(path)
    try:
        stage = FlowStage(
            net, ema=ema, k=meta["k"], role=meta["role"], alpha=meta["alpha"],
            stage_id=meta["stage_id"], teacher_k=meta.get("teacher_k"),
            provenance=meta.get("provenance", {}),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint header lacks stage field {exc}") from exc
    return stage, meta

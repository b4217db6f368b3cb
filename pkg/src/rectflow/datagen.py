"""Synthetic conditional targets, the Gaussian noise prior, and training batches.

Label 0 is always the NULL token; real labels are ``1 .. vocab - 1``.  A
:class:`TargetSpec` maps every real label to the subset of components it
selects, so pooling the conditionals with :meth:`TargetSpec.label_probs`
recovers the unconditional mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UsageError
from .nn.mlp import NULL

FAMILIES = ("gaussian-mixture", "two-moons", "checkerboard", "grid-image")


@dataclass
class TargetSpec:
    family: str = "gaussian-mixture"
    # gaussian-mixture
    centers: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    stds: list = field(default_factory=list)
    # label (1-based) -> component indices; components are modes, moons, cells or blob sites
    labels: list = field(default_factory=list)
    # two-moons
    moon_width: float = 0.2
    # checkerboard
    board_cells: int = 4
    board_extent: float = 4.0
    # grid-image
    grid: tuple = (8, 8)
    blob_sigma: float = 1.2
    blob_jitter: float = 0.5
    pixel_noise: float = 0.05

    def __post_init__(self):
        self.validate()

    @property
    def vocab(self):
        return len(self.labels) + 1

    @property
    def dim(self):
        if self.family == "grid-image":
            return int(self.grid[0] * self.grid[1])
        if self.family == "gaussian-mixture":
            return len(self.centers[0])
        return 2

    @property
    def is_grid(self):
        return self.family == "grid-image"

    def n_components(self):
        if self.family == "gaussian-mixture":
            return len(self.centers)
        if self.family == "two-moons":
            return 2
        if self.family == "checkerboard":
            return len(self.board_permitted())
        return len(self.blob_sites())

    def component_weights(self):
        if self.family == "gaussian-mixture":
            return np.asarray(self.weights, dtype=np.float64)
        n = self.n_components()
        return np.full(n, 1.0 / n)

    def validate(self):
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}, got {self.family!r}")
            raise InputError("; ".join(problems))
        if self.family == "gaussian-mixture":
            if not self.centers:
                problems.append("gaussian-mixture needs at least one center")
            else:
                dims = {len(c) for c in self.centers}
                if len(dims) != 1:
                    problems.append("all centers must share a dimension")
                if len(self.weights) != len(self.centers) or len(self.stds) != len(self.centers):
                    problems.append("weights and stds must match the number of centers")
                elif np.any(np.asarray(self.weights) <= 0) or not math.isclose(sum(self.weights), 1.0, rel_tol=1e-9):
                    problems.append("mixture weights must be positive and sum to 1")
                elif np.any(np.asarray(self.stds) <= 0):
                    problems.append("stds must be positive")
        if not self.labels:
            problems.append("at least one condition label is required")
        if not problems:
            n = self.n_components()
            for i, comps in enumerate(self.labels, start=1):
                if not comps:
                    problems.append(f"label {i} selects no components")
                elif any(not 0 <= k < n for k in comps):
                    problems.append(f"label {i} references a component outside [0, {n})")
        if problems:
            raise InputError("; ".join(problems))

    def label_probs(self):
        """Probability of each real label so that pooling reproduces the mixture.

        Label ``l`` gets the total weight of its components; components shared
        by several labels split their weight evenly between them.
        """
        w = self.component_weights()
        share = np.zeros(len(w))
        for comps in self.labels:
            share[list(comps)] += 1
        p = np.array([sum(w[k] / share[k] for k in comps) for comps in self.labels])
        return p / p.sum()

    # -- family internals -------------------------------------------------------

    def board_permitted(self):
        """Permitted (col, row) cells of the checkerboard: even parity."""
        n = self.board_cells
        return [(i, j) for j in range(n) for i in range(n) if (i + j) % 2 == 0]

    def blob_sites(self):
        """Blob centres (row, col) on the pixel grid: four quadrants."""
        h, w = self.grid
        return [(h * 0.25, w * 0.25), (h * 0.25, w * 0.75), (h * 0.75, w * 0.25), (h * 0.75, w * 0.75)]

    def in_support(self, x, component=None):
        """Exact membership predicate for the families with bounded support."""
        x = np.atleast_2d(x)
        if self.family == "checkerboard":
            cells = self.board_permitted() if component is None else [self.board_permitted()[component]]
            ij = self._cell_index(x)
            ok = np.zeros(len(x), dtype=bool)
            for i, j in cells:
                ok |= (ij[:, 0] == i) & (ij[:, 1] == j)
            inside = np.all(np.abs(x) <= self.board_extent, axis=1)
            return ok & inside
        if self.family == "two-moons":
            ok = np.zeros(len(x), dtype=bool)
            comps = range(2) if component is None else [component]
            for k in comps:
                ok |= self._moon_member(x, k)
            return ok
        raise InputError(f"no membership predicate for family {self.family!r}")

    def _cell_index(self, x):
        n, e = self.board_cells, self.board_extent
        return np.clip(np.floor((x + e) / (2 * e / n)), 0, n - 1).astype(int)

    def _moon_member(self, x, k):
        centre = np.array([0.0, 0.0]) if k == 0 else np.array([1.0, 0.5])
        rel = x - centre
        r = np.hypot(rel[:, 0], rel[:, 1])
        half = rel[:, 1] >= -1e-12 if k == 0 else rel[:, 1] <= 1e-12
        return half & (np.abs(r - 1.0) <= self.moon_width + 1e-12)

    def sample_component(self, k, n, rng):
        if self.family == "gaussian-mixture":
            c = np.asarray(self.centers[k], dtype=np.float64)
            return c + self.stds[k] * rng.normal(size=(n, len(c)))
        if self.family == "two-moons":
            centre = np.array([0.0, 0.0]) if k == 0 else np.array([1.0, 0.5])
            theta = rng.uniform(0.0, math.pi, size=n) + (0.0 if k == 0 else math.pi)
            r = 1.0 + rng.uniform(-self.moon_width, self.moon_width, size=n)
            return centre + r[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        if self.family == "checkerboard":
            i, j = self.board_permitted()[k]
            side = 2 * self.board_extent / self.board_cells
            lo = np.array([i, j]) * side - self.board_extent
            return lo + side * rng.random(size=(n, 2))
        return self._sample_blobs(k, n, rng)

    def _sample_blobs(self, k, n, rng):
        h, w = self.grid
        rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        site = np.asarray(self.blob_sites()[k])
        centre = site + self.blob_jitter * rng.normal(size=(n, 2))
        amp = rng.uniform(0.8, 1.2, size=n)
        d2 = (rows[None] - centre[:, 0, None, None]) ** 2 + (cols[None] - centre[:, 1, None, None]) ** 2
        img = amp[:, None, None] * np.exp(-d2 / (2 * self.blob_sigma**2))
        img = img.reshape(n, h * w) + self.pixel_noise * rng.normal(size=(n, h * w))
        # map [0, 1] intensities to roughly zero-centred values
        return 2.0 * img - 0.5


def default_target():
    """Six Gaussian modes on a circle of radius 4; label l selects modes l-1 and l+2."""
    angles = np.arange(6) * (2 * math.pi / 6)
    centers = [[round(4 * math.cos(a), 12), round(4 * math.sin(a), 12)] for a in angles]
    return TargetSpec(
        family="gaussian-mixture",
        centers=centers,
        weights=[1.0 / 6] * 6,
        stds=[0.3] * 6,
        labels=[[0, 3], [1, 4], [2, 5]],
    )


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_prior(d, n, seed):
    """``n`` i.i.d. standard Gaussian vectors in ``R^d``."""
    if d < 1 or n < 1:
        raise InputError("d and n must be at least 1")
    return _rng(seed).normal(size=(n, d))


def _check_label(spec, c):
    c = int(c)
    if c == NULL:
        raise UsageError("the NULL condition has no target distribution")
    if not 1 <= c < spec.vocab:
        raise InputError(f"condition {c} outside [1, {spec.vocab})")
    return c


def sample_target(spec, c, n, seed, return_components=False):
    """``n`` draws from the conditional target selected by label ``c``."""
    c = _check_label(spec, c)
    rng = _rng(seed)
    comps = np.asarray(spec.labels[c - 1])
    w = spec.component_weights()[comps]
    which = comps[rng.choice(len(comps), size=n, p=w / w.sum())]
    out = np.empty((n, spec.dim))
    for k in comps:
        idx = np.flatnonzero(which == k)
        if idx.size:
            out[idx] = spec.sample_component(int(k), idx.size, rng)
    return (out, which) if return_components else out


def sample_conditions(spec, n, seed, probs=None):
    """Real labels drawn with ``probs`` (default: :meth:`TargetSpec.label_probs`)."""
    p = spec.label_probs() if probs is None else np.asarray(probs, dtype=np.float64)
    return 1 + _rng(seed).choice(len(p), size=n, p=p / p.sum())


def sample_targets_for(spec, conditions, seed):
    """One target draw per entry of ``conditions`` (row order preserved)."""
    rng = _rng(seed)
    conditions = np.asarray(conditions)
    out = np.empty((len(conditions), spec.dim))
    for c in np.unique(conditions):
        idx = np.flatnonzero(conditions == c)
        out[idx] = sample_target(spec, int(c), idx.size, rng)
    return out


@dataclass
class TrainingBatch:
    """Independent-coupling batch: ``x0`` from the prior, ``x1`` from the target."""

    x0: np.ndarray
    x1: np.ndarray
    cond: np.ndarray
    true_cond: np.ndarray

    def __len__(self):
        return len(self.x0)


def make_training_batch(spec, batch, null_dropout_p, seed):
    if not 0.0 <= null_dropout_p < 1.0:
        raise InputError("null_dropout_p must lie in [0, 1)")
    rng = _rng(seed)
    true_cond = sample_conditions(spec, batch, rng)
    x1 = sample_targets_for(spec, true_cond, rng)
    x0 = rng.normal(size=(batch, spec.dim))
    cond = np.where(rng.random(batch) < null_dropout_p, NULL, true_cond)
    return TrainingBatch(x0, x1, cond, true_cond)


def target_spec_to_dict(spec):
    d = {"family": spec.family, "labels": [list(map(int, l)) for l in spec.labels]}
    if spec.family == "gaussian-mixture":
        d.update(centers=[list(map(float, c)) for c in spec.centers], weights=list(map(float, spec.weights)),
                 stds=list(map(float, spec.stds)))
    elif spec.family == "two-moons":
        d["moon_width"] = spec.moon_width
    elif spec.family == "checkerboard":
        d.update(board_cells=spec.board_cells, board_extent=spec.board_extent)
    else:
        d.update(grid=list(spec.grid), blob_sigma=spec.blob_sigma, blob_jitter=spec.blob_jitter,
                 pixel_noise=spec.pixel_noise)
    return d


def target_spec_from_dict(d):
    d = dict(d)
    if "grid" in d:
        d["grid"] = tuple(d["grid"])
    try:
        return TargetSpec(**d)
    except TypeError as exc:
        raise InputError(f"bad target section: {exc}") from exc

"""Parameter storage and the conditional MLP velocity network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, StateError
from .autodiff import Tensor, concat

NULL = 0


class ParamStore:
    """Flat float64 parameter vector with a named layout.

    ``layout`` is a list of ``(name, shape)``; each named block is exposed as a
    reshaped view into ``flat`` so in-place updates of the flat array are seen
    by every view (and vice versa).
    """

    def __init__(self, layout, flat=None):
        self.layout = [(str(name), tuple(int(s) for s in shape)) for name, shape in layout]
        self.sizes = [int(np.prod(shape)) for _, shape in self.layout]
        total = sum(self.sizes)
        if flat is None:
            flat = np.zeros(total)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise InputError(f"layout needs {total} parameters, got array of shape {flat.shape}")
        self.flat = flat
        self.grad = np.zeros(total)

    @property
    def count(self):
        return self.flat.size

    def _views(self, buf):
        out = {}
        offset = 0
        for (name, shape), size in zip(self.layout, self.sizes):
            out[name] = buf[offset : offset + size].reshape(shape)
            offset += size
        return out

    def views(self):
        return self._views(self.flat)

    def grad_views(self):
        return self._views(self.grad)

    def offsets(self):
        """Map name -> (start, stop) into the flat array."""
        out = {}
        offset = 0
        for (name, _), size in zip(self.layout, self.sizes):
            out[name] = (offset, offset + size)
            offset += size
        return out

    def copy(self):
        return ParamStore(self.layout, self.flat.copy())


def time_frequencies(n_freqs):
    """Angular frequencies for the sinusoidal time features, geometric in [1, 32]."""
    if n_freqs == 0:
        return np.zeros(0)
    return np.geomspace(1.0, 32.0, n_freqs)


def time_features(t, freqs):
    """``[sin(w t), cos(w t)]`` features, shape ``(B, 2 * len(freqs))``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    arg = t * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class MlpVelocityNet:
    """Conditional velocity field ``v(x, t | c)`` as an MLP.

    The input row is ``[x, sin/cos(w t), emb(c)]``; hidden layers use SiLU;
    the output has the state dimension. Condition index 0 is the NULL label.
    """

    dim: int
    hidden: tuple = (128, 128, 128)
    vocab: int = 4
    cond_dim: int = 8
    time_freqs: int = 8
    params: ParamStore = field(default=None, repr=False)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dim < 1 or self.vocab < 1:
            raise InputError("dim and vocab must be positive")
        self._freqs = time_frequencies(self.time_freqs)
        if self.params is None:
            self.params = ParamStore(self.layout())
        elif self.params.layout != self.layout():
            raise InputError("parameter layout does not match the architecture")
        self._recorded = False

    @property
    def in_dim(self):
        return self.dim + 2 * self.time_freqs + self.cond_dim

    def layout(self):
        widths = [self.in_dim, *self.hidden, self.dim]
        layout = [("cond_emb", (self.vocab, self.cond_dim))]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layout += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        return layout

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def architecture(self):
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "vocab": self.vocab,
            "cond_dim": self.cond_dim,
            "time_freqs": self.time_freqs,
        }

    def init_params(self, rng, zero_last=True):
        """Gaussian init with variance 1/fan_in; last layer zeroed by default."""
        views = self.params.views()
        views["cond_emb"][...] = rng.normal(size=views["cond_emb"].shape)
        for i in range(self.n_layers):
            w = views[f"W{i}"]
            w[...] = rng.normal(size=w.shape) / math.sqrt(w.shape[0])
            views[f"b{i}"][...] = 0.0
        last = self.n_layers - 1
        if zero_last:
            views[f"W{last}"][...] = 0.0
            views[f"b{last}"][...] = 0.0
        return self

    def with_params(self, flat):
        """Same architecture, different parameter vector (copied)."""
        return MlpVelocityNet(
            self.dim, self.hidden, self.vocab, self.cond_dim, self.time_freqs,
            ParamStore(self.layout(), np.array(flat, dtype=np.float64, copy=True)),
        )

    def _prepare(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise InputError(f"state has dimension {x.shape[1]}, network expects {self.dim}")
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        c = np.broadcast_to(np.asarray(c), (b,))
        if not np.issubdtype(c.dtype, np.integer):
            raise InputError("condition indices must be integers")
        if c.size and (c.min() < 0 or c.max() >= self.vocab):
            raise InputError(f"condition index out of range [0, {self.vocab})")
        return x, t, c, single

    def forward(self, x, t, c, record=True):
        """Evaluate the network on a batch and return a :class:`Tensor`.

        With ``record=True`` the parameter leaves track gradients and the call
        arms :meth:`backward`. ``record=False`` builds no graph and touches no
        shared state, so a frozen network can be evaluated from many threads.
        """
        x, t, c, _ = self._prepare(x, t, c)
        views = self.params.views()
        if record:
            gviews = self.params.grad_views()
            leaves = {}
            for name, v in views.items():
                leaf = Tensor(v, requires_grad=True)
                leaf.grad = gviews[name]
                leaves[name] = leaf
            self._recorded = True
        else:
            leaves = {name: Tensor(v) for name, v in views.items()}
        h = concat(
            [Tensor(x), Tensor(time_features(t, self._freqs)), leaves["cond_emb"].take_rows(c)],
            axis=1,
        )
        for i in range(self.n_layers):
            h = h @ leaves[f"W{i}"] + leaves[f"b{i}"]
            if i < self.n_layers - 1:
                h = h.silu()
        return h

    def __call__(self, x, t, c):
        """Plain numpy evaluation; a 1-D ``x`` gives a 1-D result."""
        x = np.asarray(x, dtype=np.float64)
        out = self.forward(x, t, c, record=False).data
        return out[0] if x.ndim == 1 else out

    def zero_grad(self):
        self.params.grad[...] = 0.0

    def backward(self, loss):
        """Backpropagate a scalar loss built from :meth:`forward` outputs.

        Returns a copy of the flat gradient, aligned with ``params.flat``.
        """
        if not self._recorded:
            raise StateError("backward() called without a recorded forward pass")
        self._recorded = False
        self.zero_grad()
        if isinstance(loss, Tensor) and loss.requires_grad:
            loss.backward()
        elif not isinstance(loss, Tensor):
            raise StateError("loss must be a Tensor produced from a forward pass")
        return self.params.grad.copy()

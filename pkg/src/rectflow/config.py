"""Experiment configuration: TOML under a single ``[experiment]`` table."""

from __future__ import annotations

import hashlib
import json
import math
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import tomli_w

from .datagen import TargetSpec, default_target, target_spec_from_dict, target_spec_to_dict
from .errors import ConfigError, InputError, MissingInputError
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class NetworkConfig:
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    cond_dim: int = 8
    time_freqs: int = 8


@dataclass
class StageTraining:
    steps: int = 10000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_ratio: float = 0.999
    null_dropout: float = 0.1
    decay_frac: float = 0.0

    def train_config(self, seed, **overrides):
        return replace(TrainConfig(**asdict(self), seed=int(seed)), **overrides)


@dataclass
class ReflowTraining(StageTraining):
    # learning-rate multiplier for stages k >= 3
    lr_decay: float = 0.1
    # guidance scale reflowed stages sample with (guidance is already in their pairs)
    alpha: float = 1.0


@dataclass
class DistillTraining(StageTraining):
    null_dropout: float = 0.0
    # share of the steps spent on the L2 phase before the patch surrogate
    l2_fraction: float = 0.5
    patch_scales: list = field(default_factory=lambda: [1, 2, 4])
    # optional wider hidden layers for the student; empty keeps the teacher's
    widen: list = field(default_factory=list)


@dataclass
class PairsConfig:
    count: int = 50000
    n_steps: int = 25
    # guidance used when the base stage generates pairs
    alpha: float = 2.0


@dataclass
class EvalConfig:
    n_traj: int = 1000
    straightness_steps: int = 100
    n_samples: int = 5000
    n_steps: int = 50
    fidelity_n: int = 2000
    few_steps: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    alphas: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 3.0, 4.0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    k_max: int = 2
    target: TargetSpec = field(default_factory=default_target)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    base: StageTraining = field(default_factory=lambda: StageTraining(steps=20000))
    reflow: ReflowTraining = field(default_factory=ReflowTraining)
    distill: DistillTraining = field(default_factory=DistillTraining)
    pairs: PairsConfig = field(default_factory=PairsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived values -----------------------------------------------------------

    def stage_seed(self, name):
        """Seed for one named stage, derived from the master seed."""
        ss = np.random.SeedSequence([int(self.seed), zlib.crc32(name.encode())])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def seed_table(self):
        names = ["base", "init"] + [f"pairs-v{k}" for k in range(1, self.k_max + 1)]
        names += [f"reflow-v{k}" for k in range(2, self.k_max + 1)]
        names += ["distill-v1", f"distill-v{self.k_max}", "eval"]
        return {n: self.stage_seed(n) for n in dict.fromkeys(names)}

    def base_train(self):
        return self.base.train_config(self.stage_seed("base"))

    def reflow_train(self, k):
        lr = self.reflow.lr * (self.reflow.lr_decay if k >= 3 else 1.0)
        fields_ = {f.name for f in fields(StageTraining)}
        kw = {n: v for n, v in asdict(self.reflow).items() if n in fields_}
        return StageTraining(**kw).train_config(self.stage_seed(f"reflow-v{k}"), lr=lr)

    def distill_train(self, k):
        fields_ = {f.name for f in fields(StageTraining)}
        kw = {n: v for n, v in asdict(self.distill).items() if n in fields_}
        return StageTraining(**kw).train_config(self.stage_seed(f"distill-v{k}"))

    def stage_alpha(self, k):
        return self.pairs.alpha if k == 1 else self.reflow.alpha

    # -- serialisation ------------------------------------------------------------

    def to_dict(self):
        d = {
            "seed": int(self.seed),
            "out_dir": self.out_dir,
            "k_max": int(self.k_max),
            "target": target_spec_to_dict(self.target),
        }
        for name in ("network", "base", "reflow", "distill", "pairs", "eval"):
            d[name] = asdict(getattr(self, name))
        return d

    def config_hash(self):
        """Hash of everything that influences results (the output path does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self):
        problems = []
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
        if self.k_max < 2:
            problems.append("k_max must be >= 2")
        net = self.network
        if not net.hidden or any(int(h) < 1 for h in net.hidden):
            problems.append("network.hidden must list positive widths")
        if net.cond_dim < 1:
            problems.append("network.cond_dim must be >= 1")
        if not 8 <= net.time_freqs <= 16:
            problems.append("network.time_freqs must lie in [8, 16]")
        for name in ("base", "reflow", "distill"):
            sec = getattr(self, name)
            cfg = TrainConfig(**{f.name: getattr(sec, f.name) for f in fields(StageTraining)})
            problems += [f"{name}.{p}" for p in cfg.validate()]
        if not 0.0 < self.reflow.lr_decay <= 1.0:
            problems.append("reflow.lr_decay must lie in (0, 1]")
        if self.reflow.alpha < 0:
            problems.append("reflow.alpha must be >= 0")
        if not 0.0 <= self.distill.l2_fraction <= 1.0:
            problems.append("distill.l2_fraction must lie in [0, 1]")
        if 1 not in self.distill.patch_scales:
            problems.append("distill.patch_scales must include 1")
        if self.distill.widen:
            if len(self.distill.widen) != len(net.hidden) or any(
                int(w) < int(h) for w, h in zip(self.distill.widen, net.hidden)
            ):
                problems.append("distill.widen must list one width >= the teacher's per hidden layer")
        if self.pairs.count < 1:
            problems.append("pairs.count must be >= 1")
        if self.pairs.n_steps < 1:
            problems.append("pairs.n_steps must be >= 1")
        if self.pairs.alpha < 0:
            problems.append("pairs.alpha must be >= 0")
        ev = self.eval
        if ev.n_traj < 1:
            problems.append("eval.n_traj must be >= 1")
        if ev.straightness_steps < 2:
            problems.append("eval.straightness_steps must be >= 2")
        if ev.n_samples < 2:
            problems.append("eval.n_samples must be >= 2")
        if ev.n_steps < 1:
            problems.append("eval.n_steps must be >= 1")
        if ev.fidelity_n < 1:
            problems.append("eval.fidelity_n must be >= 1")
        if any(int(n) < 1 for n in ev.few_steps):
            problems.append("eval.few_steps entries must be >= 1")
        if any(not (math.isfinite(a) and a >= 0) for a in ev.alphas):
            problems.append("eval.alphas entries must be finite and >= 0")
        if problems:
            raise ConfigError(problems)
        return self


_SECTIONS = {
    "network": NetworkConfig,
    "base": StageTraining,
    "reflow": ReflowTraining,
    "distill": DistillTraining,
    "pairs": PairsConfig,
    "eval": EvalConfig,
}


def config_from_dict(d):
    """Build and validate a config; every unknown key or bad value is reported."""
    d = dict(d)
    problems = []
    kwargs = {}
    for key in ("seed", "out_dir", "k_max"):
        if key in d:
            kwargs[key] = d.pop(key)
    if "target" in d:
        try:
            kwargs["target"] = target_spec_from_dict(d.pop("target"))
        except InputError as exc:
            problems.append(f"target: {exc}")
    defaults = ExperimentConfig()
    for name, cls in _SECTIONS.items():
        if name not in d:
            continue
        sec = d.pop(name)
        if not isinstance(sec, dict):
            problems.append(f"{name} must be a table")
            continue
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(sec) - known)
        problems += [f"{name}.{k}: unknown key" for k in unknown]
        kwargs[name] = replace(getattr(defaults, name), **{k: v for k, v in sec.items() if k in known})
    problems += [f"{k}: unknown key" for k in sorted(d)]
    cfg = None
    try:
        cfg = ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
    if cfg is not None:
        try:
            cfg.validate()
        except ConfigError as exc:
            problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise MissingInputError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    if set(raw) != {"experiment"}:
        raise ConfigError(["the config must hold exactly one [experiment] table"])
    return config_from_dict(raw["experiment"])


def dumps_config(cfg):
    return tomli_w.dumps({"experiment": cfg.to_dict()})

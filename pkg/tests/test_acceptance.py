"""End-to-end acceptance checks on the default six-mode benchmark.

Each test prints one PASS/FAIL line (repeated in the terminal summary). The
full default pipeline runs four times here (seeds 0, 1, 2 and a second seed-0
directory), so this module takes roughly a quarter of an hour on one core.
"""

import csv
import json
import os
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from rectflow.cli import main
from rectflow.config import ExperimentConfig
from rectflow.datagen import TargetSpec
from rectflow.flow import FlowStage, constant_stage, euler_endpoint, guided_velocity
from rectflow.metrics import energy_distance, shared_inputs, stage_samples, straightness
from rectflow.nn.mlp import NULL
from rectflow.pipeline import Workspace
from rectflow.reflow import load_pairs, reflow_step
from rectflow.training import TrainConfig, train_base

from conftest import record_verdict
from oracles import gaussian_velocity, gradient_error, random_batch, small_net

pytestmark = pytest.mark.slow

RUNTIME_BUDGET_S = 600.0


@pytest.fixture(scope="module", autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


class Runs:
    """Default pipelines, one per seed, run lazily and shared by the checks."""

    def __init__(self, root):
        self.root = root
        self.dirs = {}
        self.wall = {}

    def get(self, seed, tag=""):
        key = (seed, tag)
        if key not in self.dirs:
            out = os.path.join(self.root, f"seed{seed}{tag}")
            start = time.perf_counter()
            code = main(["pipeline", "--seed", str(seed), "--out", out])
            self.wall[key] = time.perf_counter() - start
            assert code == 0, f"pipeline for seed {seed} exited with {code}"
            self.dirs[key] = out
        return self.dirs[key]

    def workspace(self, seed):
        cfg = ExperimentConfig(seed=seed)
        return Workspace(cfg, self.get(seed), 1)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(str(tmp_path_factory.mktemp("acceptance")))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# 1 ----------------------------------------------------------------------------

def test_gradient_correctness():
    start = time.perf_counter()
    errors = []
    for seed in range(5):
        net = small_net(seed, hidden=(8,), vocab=3)
        assert net.params.count <= 200
        rng = np.random.default_rng(1000 + seed)
        errors.append(gradient_error(net, random_batch(rng), rng.random(16)))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 10.0
    record_verdict(1, "gradient correctness", ok,
                   f"max relative error {max(errors):.2e} (< 1e-4), {elapsed:.2f} s (< 10 s)")
    assert ok


# 2 ----------------------------------------------------------------------------

def test_analytic_velocity_recovery():
    spec = TargetSpec(centers=[[0.0]], weights=[1.0], stds=[1.0], labels=[[0]])
    cfg = TrainConfig(steps=8000, batch_size=512, lr=1e-3, ema_ratio=0.999, null_dropout=0.0,
                      decay_frac=0.5, seed=1)
    stage, _ = train_base(spec, cfg, hidden=(64, 64))
    t, x = np.meshgrid(np.arange(1, 10) / 10, np.linspace(-2, 2, 41), indexing="ij")
    v = stage.velocity(x.reshape(-1, 1), t.reshape(-1), 1).reshape(t.shape)
    mae = float(np.mean(np.abs(v - gaussian_velocity(x, t))))
    ok = mae < 0.05
    record_verdict(2, "analytic velocity recovery", ok, f"MAE {mae:.4f} (< 0.05) on 9 x 41 grid")
    assert ok


# 3 ----------------------------------------------------------------------------

def test_straight_flow_exactness():
    stage = constant_stage(np.array([1.25, -0.75]))
    z0, cond = shared_inputs(stage, 1000, 0)
    gap = float(np.max(np.abs(euler_endpoint(stage, z0, cond, 1) - euler_endpoint(stage, z0, cond, 100))))
    s = straightness(stage, n_traj=1000, n_steps=100)
    ok = gap <= 1e-12 and s <= 1e-12
    record_verdict(3, "straight-flow exactness", ok, f"|N=1 - N=100| {gap:.1e}, S {s:.1e} (both <= 1e-12)")
    assert ok


# 4 ----------------------------------------------------------------------------

def test_straightening(runs):
    ws = runs.workspace(0)
    cfg = ws.cfg
    v1, v2 = ws.load_stage("v1"), ws.load_stage("v2")
    # third stage from v2's pairs with the decayed rate used for k >= 3
    v3, _ = reflow_step(v2, ws.load_pairs_for(v2), cfg.reflow_train(3), alpha=cfg.stage_alpha(3))
    held_out = [cfg.seed, 777]
    probs = cfg.target.label_probs()
    s = [straightness(v, 1000, 100, probs, seed=held_out) for v in (v1, v2, v3)]
    ok = s[1] < 0.7 * s[0] and s[2] <= 1.05 * s[1]
    record_verdict(4, "straightening", ok,
                   f"S(v1) {s[0]:.4f}, S(v2) {s[1]:.4f} (< {0.7 * s[0]:.4f}), "
                   f"S(v3) {s[2]:.4f} (<= {1.05 * s[1]:.4f})")
    assert ok


# 5 ----------------------------------------------------------------------------

def test_marginal_preservation(runs):
    ws = runs.workspace(0)
    v1, v2 = ws.load_stage("v1"), ws.load_stage("v2")
    n, steps = 5000, 50
    _, cond = shared_inputs(v1, n, [0, 50], ws.cfg.target.label_probs())
    rng = np.random.default_rng([0, 51])

    def draw(stage):
        return stage_samples(stage, rng.normal(size=(n, stage.dim)), cond, steps)

    # clipped replicates are mostly 0, so the floor is the RMS of the raw estimates
    raw = [energy_distance(draw(v1), draw(v1), clip=False) for _ in range(5)]
    floor = float(np.sqrt(np.mean(np.square(raw))))
    a, b = draw(v1), draw(v2)
    ed, ed_raw = energy_distance(a, b), energy_distance(a, b, clip=False)
    ok = ed <= 3 * floor
    record_verdict(5, "marginal preservation", ok,
                   f"ED(v1, v2) {ed:.5f} (raw {ed_raw:.5f}) <= 3 x floor {3 * floor:.5f}")
    assert ok


# 6 ----------------------------------------------------------------------------

def test_transport_cost_reduction(runs):
    out = runs.get(0)
    p1 = load_pairs(os.path.join(out, "pairs_v1.rfpr"))
    p2 = load_pairs(os.path.join(out, "pairs_v2.rfpr"))
    rng = np.random.default_rng(6)
    parts, ok = [], True
    for name, fn in (("l2sq", lambda d: np.sum(d * d, axis=1)), ("l2", lambda d: np.sqrt(np.sum(d * d, axis=1)))):
        c1, c2 = fn(p1.x1 - p1.x0), fn(p2.x1 - p2.x0)
        boot = np.array([c1[rng.integers(0, len(c1), len(c1))].mean() for _ in range(2000)])
        upper = float(np.quantile(boot, 0.95))
        ok &= bool(c2.mean() <= upper)
        parts.append(f"{name}: v2 {c2.mean():.4f} <= v1 upper {upper:.4f} (mean {c1.mean():.4f})")
    record_verdict(6, "transport-cost reduction", ok, "; ".join(parts))
    assert ok


# 7 ----------------------------------------------------------------------------

def test_distillation_after_reflow(runs):
    ok, parts = True, []
    for seed in (0, 1, 2):
        rows = {r["stage_id"]: r for r in read_rows(os.path.join(runs.get(seed), "metrics.csv"))}
        f1, f2 = float(rows["v1+distill"]["coupling_fidelity"]), float(rows["v2+distill"]["coupling_fidelity"])
        e1, e2 = float(rows["v1+distill"]["energy_distance"]), float(rows["v2+distill"]["energy_distance"])
        ok &= f2 < f1 and e2 < e1
        parts.append(f"seed {seed}: fidelity {f2:.4f} < {f1:.4f}, ED {e2:.5f} < {e1:.5f}")
    record_verdict(7, "distillation after reflow", ok, "; ".join(parts))
    assert ok


# 8 ----------------------------------------------------------------------------

def test_few_step_advantage(runs):
    rows = read_rows(os.path.join(runs.get(0), "fewstep.csv"))
    ed = {(r["stage_id"], int(r["n_steps"])): float(r["energy_distance"]) for r in rows}
    wins = {n: ed[("v2", n)] < ed[("v1", n)] for n in (1, 2, 4)}
    ok = wins[1] and wins[2]
    detail = ", ".join(f"N={n}: v2 {ed[('v2', n)]:.4f} vs v1 {ed[('v1', n)]:.4f}" for n in (1, 2, 4))
    record_verdict(8, "few-step advantage", ok, detail + " (required at N=1, 2)")
    assert ok


# 9 ----------------------------------------------------------------------------

def test_cfg_contract(runs):
    ws = runs.workspace(0)
    stage = ws.load_stage("v1")
    rng = np.random.default_rng(9)
    x, t = rng.normal(size=(500, 2)), rng.random(500)
    c = rng.integers(1, stage.vocab, 500)
    vc = stage.velocity(x, t, c)
    vn = stage.velocity(x, t, np.full(500, NULL))
    exact = bool(np.array_equal(guided_velocity(stage, x, t, c, 1.0), vc))
    worst = 0.0
    for alpha in (0.0, 1.0, 1.5, 4.0):
        g = guided_velocity(stage, x, t, c, alpha)
        ref = alpha * vc + (1 - alpha) * vn
        worst = max(worst, float(np.max(np.abs(g - ref) / (1 + np.abs(ref)))))
    ok = exact and worst <= 1e-12
    record_verdict(9, "CFG contract", ok, f"alpha=1 exact: {exact}; affine error {worst:.1e} (<= 1e-12)")
    assert ok


# 10 ---------------------------------------------------------------------------

def _tree(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            full = os.path.join(dirpath, n)
            out[os.path.relpath(full, root)] = full
    return out


def _content(path):
    if os.sep + "manifests" + os.sep in path:
        # the manifest keeps the step's wall-clock time; everything else must match
        with open(path) as fh:
            m = json.load(fh)
        m.pop("wall_time_s", None)
        return json.dumps(m, sort_keys=True).encode()
    with open(path, "rb") as fh:
        return fh.read()


def test_determinism_and_idempotence(runs):
    a, b = runs.get(0), runs.get(0, "-again")
    ta, tb = _tree(a), _tree(b)
    differing = sorted(k for k in ta if k not in tb or _content(ta[k]) != _content(tb[k]))
    differing += sorted(k for k in tb if k not in ta)
    before = {k: (os.path.getmtime(p), _content(p)) for k, p in ta.items()}
    start = time.perf_counter()
    assert main(["pipeline", "--seed", "0", "--out", a]) == 0
    rerun = time.perf_counter() - start
    touched = sorted(k for k, p in _tree(a).items() if before.get(k) != (os.path.getmtime(p), _content(p)))
    ok = not differing and not touched
    record_verdict(10, "determinism and idempotence", ok,
                   f"{len(ta)} files compared, {len(differing)} differ {differing[:3]}; "
                   f"rerun {rerun:.1f} s touched {len(touched)} files")
    assert ok


# 11 ---------------------------------------------------------------------------

def test_runtime_budget(runs):
    runs.get(0)
    wall = runs.wall[(0, "")]
    ok = wall < RUNTIME_BUDGET_S
    record_verdict(11, "runtime budget", ok,
                   f"default pipeline {wall:.0f} s (< {RUNTIME_BUDGET_S:.0f} s) on {os.cpu_count()} core(s)")
    assert ok

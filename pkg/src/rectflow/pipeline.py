"""Staged experiment execution with manifests, lineage checks and resumption.

Every step declares its input and output files. After a step runs, a
manifest ``manifests/<step>.json`` records the config hash, derived seeds and
SHA-256 of all inputs and outputs; a later run with the same config and
unchanged files skips the step.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import replace

import numpy as np

from .config import dumps_config
from .datagen import sample_targets_for
from .distill import SimilarityLoss, default_schedule, distill
from .errors import FormatError, LineageError, MissingInputError, UsageError
from .flow import FLOW, ONE_STEP, load_stage, save_stage
from .metrics import (
    MetricsRecord,
    coupling_fidelity,
    energy_distance,
    median_bandwidth,
    mmd_gaussian,
    shared_inputs,
    stage_samples,
    straightness,
    transport_cost,
    write_metrics_csv,
    write_metrics_json,
)
from .reflow import generate_pairs, load_pairs, read_pair_meta, reflow_step, save_pairs
from .training import train_base, write_loss_log

log = logging.getLogger(__name__)

COMPARISON_ROWS = ("v1", "v2", "v1+distill", "v2+distill")


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_filename(stage_id):
    return stage_id.replace("+", "_") + ".ckpt"


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Workspace:
    """An output directory bound to one experiment config."""

    def __init__(self, cfg, out_dir=None, threads=1):
        self.cfg = cfg
        self.out = os.path.abspath(out_dir or cfg.out_dir)
        self.threads = max(1, int(threads))
        self.hash = cfg.config_hash()
        os.makedirs(os.path.join(self.out, "manifests"), exist_ok=True)
        # the snapshot names its own directory, so identical runs in different
        # places produce identical files
        cfg_path = self.path("config.toml")
        text = dumps_config(replace(cfg, out_dir="."))
        if not os.path.exists(cfg_path) or open(cfg_path).read() != text:
            with open(cfg_path, "w") as fh:
                fh.write(text)

    def path(self, name):
        return os.path.join(self.out, name)

    def stage_path(self, stage_id):
        return self.path(stage_filename(stage_id))

    def pairs_path(self, stage_id):
        return self.path(f"pairs_{stage_id}.rfpr")

    # -- lineage-checked loading --------------------------------------------------

    def load_stage(self, stage_id):
        path = self.stage_path(stage_id)
        if not os.path.exists(path):
            raise MissingInputError(f"stage {stage_id} has no checkpoint at {path}")
        stage, meta = load_stage(path)
        if meta.get("config_hash") != self.hash:
            raise LineageError(
                f"{path} was produced under config {meta.get('config_hash')}, current config is {self.hash}"
            )
        if stage.stage_id != stage_id:
            raise LineageError(f"{path} holds stage {stage.stage_id}, expected {stage_id}")
        return stage

    def load_pairs_for(self, stage):
        path = self.pairs_path(stage.stage_id)
        if not os.path.exists(path):
            raise MissingInputError(f"no pair file for {stage.stage_id} at {path}; run gen-pairs first")
        pairs = load_pairs(path)
        if pairs.meta.get("config_hash") != self.hash:
            raise LineageError(f"{path} was produced under config {pairs.meta.get('config_hash')}")
        return pairs

    # -- manifests ----------------------------------------------------------------

    def _rel(self, path):
        return os.path.relpath(path, self.out)

    def run_step(self, name, inputs, outputs, fn, force=False):
        """Run ``fn`` unless the manifest proves the outputs are current.

        Returns True if the step ran, False if it was skipped.
        """
        for p in inputs:
            if not os.path.exists(p):
                raise MissingInputError(f"step {name} needs {p}, which does not exist")
        in_hashes = {self._rel(p): file_sha256(p) for p in inputs}
        manifest_path = self.path(os.path.join("manifests", f"{name}.json"))
        if not force and os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                old = json.load(fh)
            current = (
                old.get("config_hash") == self.hash
                and old.get("inputs") == in_hashes
                and all(
                    os.path.exists(self.path(rel)) and file_sha256(self.path(rel)) == digest
                    for rel, digest in old.get("outputs", {}).items()
                )
                and set(old.get("outputs", {})) == {self._rel(p) for p in outputs}
            )
            if current:
                log.info("%s: up to date, skipped", name)
                return False
        log.info("%s: running", name)
        start = time.perf_counter()
        fn()
        wall = time.perf_counter() - start
        for p in outputs:
            validate_artifact(p)
        manifest = {
            "step": name,
            "config_hash": self.hash,
            "seeds": self.cfg.seed_table(),
            "threads": self.threads,
            "inputs": in_hashes,
            "outputs": {self._rel(p): file_sha256(p) for p in outputs},
            "wall_time_s": round(wall, 3),
        }
        _write_json(manifest_path, manifest)
        log.info("%s: done in %.1f s", name, wall)
        return True

    # -- steps --------------------------------------------------------------------

    def train_base(self, force=False):
        cfg = self.cfg
        out = [self.stage_path("v1"), self.path("v1_loss.csv")]

        def run():
            tc = cfg.base_train()
            stage, losses = train_base(
                cfg.target, tc, hidden=tuple(cfg.network.hidden), cond_dim=cfg.network.cond_dim,
                time_freqs=cfg.network.time_freqs, alpha=cfg.stage_alpha(1), init_seed=cfg.stage_seed("init"),
            )
            save_stage(out[0], stage, config_hash=self.hash)
            write_loss_log(out[1], losses, every=tc.log_every)

        return self.run_step("train-base", [], out, run, force)

    def gen_pairs(self, stage_id, force=False):
        cfg = self.cfg
        out = [self.pairs_path(stage_id)]

        def run():
            stage = self.load_stage(stage_id)
            if stage.role != FLOW:
                raise UsageError(f"{stage_id} is a one-step model; pairs come from continuous flows")
            pairs = generate_pairs(
                stage, cfg.target.label_probs(), cfg.pairs.count, cfg.pairs.n_steps, None,
                cfg.stage_seed(f"pairs-v{stage.k}"), self.threads,
            )
            save_pairs(out[0], pairs, config_hash=self.hash)

        return self.run_step(f"gen-pairs-{stage_id}", [self.stage_path(stage_id)], out, run, force)

    def reflow(self, stage_id, force=False):
        teacher_k = _flow_index(stage_id)
        new_id = f"v{teacher_k + 1}"
        out = [self.stage_path(new_id), self.path(f"{new_id}_loss.csv")]

        def run():
            teacher = self.load_stage(stage_id)
            pairs = self.load_pairs_for(teacher)
            tc = self.cfg.reflow_train(teacher_k + 1)
            student, losses = reflow_step(teacher, pairs, tc, alpha=self.cfg.stage_alpha(teacher_k + 1))
            save_stage(out[0], student, config_hash=self.hash)
            write_loss_log(out[1], losses, every=tc.log_every)

        inputs = [self.stage_path(stage_id), self.pairs_path(stage_id)]
        return self.run_step(f"reflow-{new_id}", inputs, out, run, force)

    def distill(self, stage_id, force=False):
        cfg = self.cfg
        k = _flow_index(stage_id)
        new_id = f"{stage_id}+distill"
        out = [self.stage_path(new_id), self.path(f"{stage_id}_distill_loss.csv")]

        def run():
            teacher = self.load_stage(stage_id)
            pairs = self.load_pairs_for(teacher)
            tc = cfg.distill_train(k)
            grid = tuple(cfg.target.grid) if cfg.target.is_grid else None
            schedule = default_schedule(tc.steps, grid, cfg.distill.l2_fraction)
            schedule[1] = (SimilarityLoss("patch", grid=grid, scales=tuple(cfg.distill.patch_scales)),
                           schedule[1][1])
            student, losses, phases = distill(teacher, pairs, schedule, tc, widen=cfg.distill.widen or None)
            save_stage(out[0], student, config_hash=self.hash)
            write_loss_log(out[1], losses, every=tc.log_every, phase=phases)

        inputs = [self.stage_path(stage_id), self.pairs_path(stage_id)]
        return self.run_step(f"distill-{stage_id}", inputs, out, run, force)

    def evaluate(self, stage_ids=None, force=False):
        if stage_ids is None:
            stage_ids = self.available_stages()
        files = ["metrics.csv", "metrics.json", "comparison.csv", "fewstep.csv", "guidance_sweep.csv"]
        out = [self.path(f) for f in files]
        inputs = [self.stage_path(s) for s in stage_ids]

        def run():
            stages = {s: self.load_stage(s) for s in stage_ids}
            ev = Evaluator(self.cfg, stages, self.threads)
            records = ev.records()
            write_metrics_csv(out[0], records)
            write_metrics_json(out[1], records)
            write_metrics_csv(out[2], [r for r in records if r.stage_id in COMPARISON_ROWS])
            ev.write_fewstep(out[3])
            ev.write_guidance_sweep(out[4])

        return self.run_step("eval", inputs, out, run, force)

    def available_stages(self):
        ids = [f"v{k}" for k in range(1, self.cfg.k_max + 1)]
        ids += [f"v{k}+distill" for k in range(1, self.cfg.k_max + 1)]
        return [s for s in ids if os.path.exists(self.stage_path(s))]

    def pipeline(self):
        """train-base, then pairs + reflow up to k_max, then both distillations and eval."""
        self.train_base()
        for k in range(1, self.cfg.k_max):
            self.gen_pairs(f"v{k}")
            self.reflow(f"v{k}")
        # direct distillation of v1 is the baseline for distilling v2
        self.gen_pairs("v2")
        self.distill("v1")
        self.distill("v2")
        stage_ids = [f"v{k}" for k in range(1, self.cfg.k_max + 1)] + ["v1+distill", "v2+distill"]
        self.evaluate(stage_ids)


def _flow_index(stage_id):
    if not stage_id.startswith("v") or not stage_id[1:].isdigit():
        raise UsageError(f"{stage_id!r} does not name a continuous flow stage (expected v1, v2, ...)")
    return int(stage_id[1:])


def validate_artifact(path):
    """Re-read the header of a freshly written artifact."""
    if not os.path.exists(path):
        raise MissingInputError(f"declared output {path} was not written")
    if path.endswith(".ckpt"):
        load_stage(path)
    elif path.endswith(".rfpr"):
        read_pair_meta(path)
    elif path.endswith(".csv"):
        with open(path, newline="") as fh:
            if not next(csv.reader(fh), None):
                raise FormatError(f"{path}: empty CSV")
    elif path.endswith(".json"):
        with open(path) as fh:
            json.load(fh)


class Evaluator:
    """Metric rows, few-step and guidance tables for a set of stages."""

    def __init__(self, cfg, stages, threads=1):
        self.cfg = cfg
        self.stages = stages
        self.threads = threads
        self.seed = cfg.stage_seed("eval")
        self.probs = cfg.target.label_probs()
        ev = cfg.eval
        rng = np.random.default_rng([self.seed, 1])
        self.z0, self.cond = shared_inputs(next(iter(stages.values())), ev.n_samples, [self.seed, 0], self.probs)
        self.reference = sample_targets_for(cfg.target, self.cond, rng)
        self.bandwidth = median_bandwidth(self.reference, self.reference)

    def _distances(self, x):
        return (energy_distance(x, self.reference),
                mmd_gaussian(x, self.reference, bandwidth=self.bandwidth))

    def record(self, stage):
        ev = self.cfg.eval
        if stage.role == ONE_STEP:
            x = stage_samples(stage, self.z0, self.cond)
            teacher = self.stages.get(f"v{stage.teacher_k}")
            fid = None
            if teacher is not None:
                fid = coupling_fidelity(teacher, stage, SimilarityLoss(), ev.fidelity_n, [self.seed, 2],
                                        self.probs, self.cfg.pairs.n_steps)
            s, n_steps, n_traj = None, 1, 0
        else:
            x = stage_samples(stage, self.z0, self.cond, ev.n_steps)
            s = straightness(stage, ev.n_traj, ev.straightness_steps, self.probs, seed=[self.seed, 3])
            fid, n_steps, n_traj = None, ev.n_steps, ev.n_traj
        ed, mmd = self._distances(x)
        return MetricsRecord(
            stage_id=stage.stage_id, k=stage.k, role=stage.role,
            alpha=float(stage.alpha), n_steps=n_steps, straightness=s,
            cost_l2sq=transport_cost(self.z0, x, "l2sq"), cost_l2=transport_cost(self.z0, x, "l2"),
            energy_distance=ed, mmd=mmd, mmd_bandwidth=self.bandwidth, coupling_fidelity=fid,
            n_samples=len(x), n_traj=n_traj, seed=self.seed,
            conditions="label_probs=" + "/".join(f"{p:.6g}" for p in self.probs),
        ).validate()

    def records(self):
        return [self.record(s) for s in self.stages.values()]

    def flows(self):
        return [s for s in self.stages.values() if s.role == FLOW]

    def write_fewstep(self, path):
        steps = sorted(set(int(n) for n in self.cfg.eval.few_steps) | {self.cfg.eval.n_steps})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage_id", "alpha", "n_steps", "energy_distance", "mmd"])
            for stage in self.flows():
                for n in steps:
                    ed, mmd = self._distances(stage_samples(stage, self.z0, self.cond, n))
                    w.writerow([stage.stage_id, repr(float(stage.alpha)), n, repr(ed), repr(mmd)])
            for stage in self.stages.values():
                if stage.role == ONE_STEP:
                    ed, mmd = self._distances(stage_samples(stage, self.z0, self.cond))
                    w.writerow([stage.stage_id, repr(1.0), 1, repr(ed), repr(mmd)])

    def write_guidance_sweep(self, path):
        n = self.cfg.eval.n_steps
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage_id", "alpha", "n_steps", "energy_distance", "mmd", "cost_l2sq"])
            for stage in self.flows():
                for a in self.cfg.eval.alphas:
                    x = stage_samples(stage, self.z0, self.cond, n, float(a))
                    ed, mmd = self._distances(x)
                    w.writerow([stage.stage_id, repr(float(a)), n, repr(ed), repr(mmd),
                                repr(transport_cost(self.z0, x, "l2sq"))])

"""Command-line front-end: ``rectflow <subcommand> [--config PATH] [--out DIR] ...``"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ExperimentConfig, dumps_config, load_config
from .datagen import sample_target
from .distill import one_step_generate
from .errors import RectFlowError, UsageError
from .flow import ONE_STEP, euler_simulate, write_trajectories_csv
from .metrics import shared_inputs
from .pipeline import Workspace
from .reflow import read_pair_meta

log = logging.getLogger("rectflow")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="experiment TOML (defaults if omitted)")
    p.add_argument("--seed", type=int, metavar="U64", help="override the master seed")
    p.add_argument("--threads", type=int, default=1, metavar="N",
                   help="workers for pair generation (results do not depend on it)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    p.add_argument("--force", action="store_true", help="rerun even if the manifest says up to date")


def build_parser():
    parser = argparse.ArgumentParser(prog="rectflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train-base", help="train v1 on the independent coupling"))
    p = sub.add_parser("gen-pairs", help="simulate a flow stage into coupling pairs")
    _common(p)
    p.add_argument("--stage", default="v1")
    p = sub.add_parser("reflow", help="train v{k+1} on the pairs of v{k}")
    _common(p)
    p.add_argument("--from", dest="from_stage", default="v1")
    p = sub.add_parser("distill", help="distill a flow stage into a one-step model")
    _common(p)
    p.add_argument("--from", dest="from_stage", default="v2")
    p = sub.add_parser("eval", help="metrics, comparison, few-step and guidance tables")
    _common(p)
    p.add_argument("--stages", nargs="+", help="stage ids (default: every checkpoint present)")
    p = sub.add_parser("sample", help="write endpoint samples of a stage to CSV")
    _common(p)
    _sampling_args(p)
    p = sub.add_parser("export-traj", help="write Euler trajectories as CSV plus an SVG sketch")
    _common(p)
    _sampling_args(p)
    _common(sub.add_parser("pipeline", help="run every stage end to end (resumable)"))

    p = sub.add_parser("config", help="configuration helpers")
    csub = p.add_subparsers(dest="action", required=True)
    csub.add_parser("print-default", help="print the default config as TOML")
    p = sub.add_parser("pairs", help="pair-file helpers")
    psub = p.add_subparsers(dest="action", required=True)
    pi = psub.add_parser("info", help="print the metadata of a pair file")
    pi.add_argument("path")
    p = sub.add_parser("data", help="target-distribution helpers")
    dsub = p.add_subparsers(dest="action", required=True)
    dp = dsub.add_parser("preview", help="write n target samples per condition to CSV")
    _common(dp)
    dp.add_argument("--n", type=int, default=200)
    return parser


def _sampling_args(p):
    p.add_argument("--stage", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--steps", type=int, help="Euler steps (default: eval n_steps; 1 for one-step stages)")
    p.add_argument("--alpha", type=float, help="guidance scale (default: the stage's own)")
    p.add_argument("--cond", type=int, help="fixed condition label (default: sampled)")


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg.validate()


def _workspace(args):
    cfg = _load_cfg(args)
    return Workspace(cfg, cfg.out_dir, args.threads)


def _draw_inputs(ws, stage, args):
    cfg = ws.cfg
    seed = [cfg.stage_seed("sample"), args.n]
    if args.cond is not None:
        z0, _ = shared_inputs(stage, args.n, seed, cfg.target.label_probs())
        return z0, np.full(args.n, args.cond)
    return shared_inputs(stage, args.n, seed, cfg.target.label_probs())


def _resolve_steps(ws, stage, args):
    if stage.role == ONE_STEP:
        if (args.steps not in (None, 1)) or (args.alpha not in (None, 1.0)):
            raise UsageError(f"{stage.stage_id} is a one-step model: only --steps 1 and --alpha 1 apply")
        return 1, 1.0
    steps = ws.cfg.eval.n_steps if args.steps is None else args.steps
    return steps, stage.alpha if args.alpha is None else args.alpha


def _tag(stage_id, steps, alpha, args):
    tag = f"{stage_id.replace('+', '_')}_N{steps}_a{alpha:g}_n{args.n}"
    return tag if args.cond is None else f"{tag}_c{args.cond}"


def cmd_sample(args):
    ws = _workspace(args)
    stage = ws.load_stage(args.stage)
    steps, alpha = _resolve_steps(ws, stage, args)
    path = ws.path(f"samples_{_tag(stage.stage_id, steps, alpha, args)}.csv")

    def run():
        z0, cond = _draw_inputs(ws, stage, args)
        if stage.role == ONE_STEP:
            x = one_step_generate(stage, z0, cond)
        else:
            x = euler_simulate(stage, z0, cond, steps, alpha, keep_path=False).z1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "condition"] + [f"x_{j}" for j in range(x.shape[1])])
            for i in range(len(x)):
                w.writerow([i, int(cond[i])] + [repr(float(v)) for v in x[i]])

    ws.run_step(f"sample-{os.path.basename(path)[:-4]}", [ws.stage_path(args.stage)], [path], run, args.force)
    print(path)


def write_svg(path, traj, size=480, coords=(0, 1)):
    """Polylines of two state coordinates over time, with axes through the origin."""
    i, j = coords
    xy = traj.states[:, :, [i, j]]
    lim = float(np.max(np.abs(xy))) * 1.05 or 1.0
    scale = size / (2 * lim)

    def px(v):
        return (v[0] + lim) * scale, (lim - v[1]) * scale

    colors = ["#888888", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="0" y1="{size / 2}" x2="{size}" y2="{size / 2}" stroke="#cccccc"/>',
        f'<line x1="{size / 2}" y1="0" x2="{size / 2}" y2="{size}" stroke="#cccccc"/>',
    ]
    for b in range(xy.shape[1]):
        color = colors[int(traj.cond[b]) % len(colors)]
        pts = " ".join("{:.2f},{:.2f}".format(*px(xy[t, b])) for t in range(xy.shape[0]))
        lines.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1" stroke-opacity="0.7"/>')
        cx, cy = px(xy[-1, b])
        lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="1.5" fill="{color}"/>')
    lines.append(f'<text x="6" y="16" font-size="12" font-family="monospace">x_{i} vs x_{j}, N={traj.n_steps}, alpha={traj.alpha:g}</text>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_export_traj(args):
    ws = _workspace(args)
    stage = ws.load_stage(args.stage)
    steps, alpha = _resolve_steps(ws, stage, args)
    tag = _tag(stage.stage_id, steps, alpha, args)
    paths = [ws.path(f"traj_{tag}.csv"), ws.path(f"traj_{tag}.svg")]

    def run():
        z0, cond = _draw_inputs(ws, stage, args)
        traj = euler_simulate(stage, z0, cond, steps, alpha)
        # high-dimensional states: export a few evenly spread coordinates
        coords = None if stage.dim <= 8 else np.linspace(0, stage.dim - 1, 8).astype(int)
        write_trajectories_csv(paths[0], traj, coords=coords)
        write_svg(paths[1], traj)

    ws.run_step(f"export-traj-{tag}", [ws.stage_path(args.stage)], paths, run, args.force)
    print(paths[0])


def cmd_data_preview(args):
    ws = _workspace(args)
    spec = ws.cfg.target
    path = ws.path("data_preview.csv")

    def run():
        rng = np.random.default_rng(ws.cfg.stage_seed("preview"))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition"] + [f"x_{j}" for j in range(spec.dim)])
            for c in range(1, spec.vocab):
                for row in sample_target(spec, c, args.n, rng):
                    w.writerow([c] + [repr(float(v)) for v in row])

    ws.run_step("data-preview", [], [path], run, args.force)
    print(path)


def dispatch(args):
    cmd = args.command
    if cmd == "config":
        sys.stdout.write(dumps_config(ExperimentConfig()))
        return
    if cmd == "pairs":
        print(json.dumps(read_pair_meta(args.path), indent=2, sort_keys=True))
        return
    if cmd == "data":
        return cmd_data_preview(args)
    if cmd == "sample":
        return cmd_sample(args)
    if cmd == "export-traj":
        return cmd_export_traj(args)
    ws = _workspace(args)
    if cmd == "train-base":
        ws.train_base(args.force)
    elif cmd == "gen-pairs":
        ws.gen_pairs(args.stage, args.force)
    elif cmd == "reflow":
        ws.reflow(args.from_stage, args.force)
    elif cmd == "distill":
        ws.distill(args.from_stage, args.force)
    elif cmd == "eval":
        ws.evaluate(args.stages, args.force)
        print(ws.path("comparison.csv"))
    elif cmd == "pipeline":
        ws.pipeline()
        print(ws.path("comparison.csv"))


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get("RECTFLOW_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        # one BLAS thread keeps every floating-point reduction in a fixed order
        with threadpool_limits(limits=1):
            dispatch(args)
    except RectFlowError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

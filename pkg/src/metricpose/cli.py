"""Command-line entry point: generate | solve | train | eval | gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import gradcheck, io
from .config import RunConfig, load_config
from .correspondence import correspondence_model
from .errors import ConfigError, DivergenceError, DomainError, MetricPoseError, NoHypothesisError, ShapeError
from .evaluation import Estimate, evaluate
from .ransac import estimate_pose, seed_sequence, substream
from .toy import (
    generate_scene,
    initialize_backbone,
    make_optimizer,
    render_ground_truth_maps,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("metricpose")


def scene_seed(cfg: RunConfig, k: int) -> int:
    return 1000 * cfg.seed + k


def cmd_generate(cfg: RunConfig, out_dir, count: int | None = None) -> list[str]:
    """Write ``count`` scenes plus a manifest and a ground-truth file into ``out_dir``."""
    count = cfg.num_scenes if count is None else count
    if count < 0:
        raise ConfigError("count must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.scene_config()
    echo = cfg.to_json()
    entries, gts = [], []
    for k in range(count):
        scene = generate_scene(scfg, scene_seed(cfg, k))
        pid = f"pair{k:04d}"
        name = f"scene_{k:04d}.txt"
        io.write_text(out / name, io.serialize_scene(scene, echo))
        entries.append((pid, name))
        gts.append(io.GroundTruth(pid, scene.intrinsics_b, scene.gt_relative))
    io.write_text(out / "manifest.txt", io.serialize_manifest(entries, echo))
    io.write_text(out / "gt.txt", io.serialize_ground_truth(gts, echo))
    return [pid for pid, _ in entries]


def load_scenes(manifest_path):
    manifest_path = Path(manifest_path)
    entries = io.parse_manifest(io.read_text(manifest_path))
    return [(pid, io.parse_scene(io.read_text(manifest_path.parent / name))) for pid, name in entries]


def solve_scene(scene, cfg: RunConfig, k: int) -> tuple:
    """Pose estimate from the scene's ground-truth maps (query view corrupted per the scene)."""
    maps_a = render_ground_truth_maps(scene, "a", substream(cfg.seed, 11, k), corrupt=False)
    maps_b = render_ground_truth_maps(scene, "b", substream(cfg.seed, 12, k))
    with torch.no_grad():
        prob = correspondence_model(maps_a, maps_b, cfg.temperature, cfg.dustbin)
    return estimate_pose(prob, maps_a, maps_b, scene.intrinsics_a, scene.intrinsics_b, cfg.ransac_test(),
                         seed_sequence(cfg.seed, 13, k), cfg.solve_set_size, cfg.samplings)


def cmd_solve(cfg: RunConfig, manifest, out_path) -> list[Estimate]:
    estimates = []
    for k, (pid, scene) in enumerate(load_scenes(manifest)):
        try:
            est = solve_scene(scene, cfg, k)
            estimates.append(Estimate(est.pose.detach(), est.confidence, pid))
        except NoHypothesisError:
            estimates.append(Estimate(None, float("nan"), pid))
    io.write_text(out_path, io.serialize_estimates(estimates, cfg.to_json()))
    return estimates


def _checkpoint(path, backbone, optimizer, iteration, cfg, grid_shape):
    torch.save({"iteration": iteration, "model": backbone.state_dict(), "optimizer": optimizer.state_dict(),
                "config": cfg.to_dict(), "grid_shape": grid_shape, "num_scenes": backbone.num_scenes}, path)
    log.info("wrote %s", path)


def cmd_train(cfg: RunConfig, out_dir, manifest=None, resume=None):
    """Train the toy backbone; writes history.txt and checkpoint files into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is not None:
        scenes = [s for _, s in load_scenes(manifest)]
    else:
        scfg = cfg.scene_config()
        scenes = [generate_scene(scfg, scene_seed(cfg, k)) for k in range(cfg.num_scenes)]
    if not scenes:
        raise ConfigError("training needs at least one scene")
    tcfg = cfg.train_config()
    backbone = initialize_backbone(scenes, cfg.init_descriptor_noise, cfg.init_depth_noise, offset_noise=0.0,
                                   seed=cfg.seed, dustbin=cfg.dustbin)
    optimizer = make_optimizer(backbone, tcfg)
    start = 0
    if resume is not None:
        ckpt = torch.load(resume, weights_only=False)
        if ckpt["num_scenes"] != len(scenes) or tuple(ckpt["grid_shape"]) != scenes[0].grid_shape:
            raise ConfigError("checkpoint does not match the scenes")
        backbone.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        start = int(ckpt["iteration"])
    end = start + cfg.iterations
    every = cfg.checkpoint_every or cfg.iterations or 1
    records = []
    it = start
    echo = cfg.to_json()
    try:
        while it < end:
            chunk = min(every - it % every, end - it)
            step_cfg = replace(tcfg, iterations=chunk)
            records += train(scenes, backbone, step_cfg, seed=cfg.seed, start_iteration=it,
                             optimizer=optimizer).records
            it += chunk
            _checkpoint(out / f"checkpoint_{it:06d}.pt", backbone, optimizer, it, cfg, scenes[0].grid_shape)
    except DivergenceError as exc:
        io.write_text(out / "history.txt", io.serialize_history(records, echo))
        snap = exc.snapshot or {}
        lines = [f"# metricpose-divergence {io.VERSION}", f"# config {echo}", f"message {exc}",
                 f"iteration {snap.get('iteration', it)}"]
        if "scene_losses" in snap:
            lines.append("scene_losses " + " ".join(io.fmt(v) for v in snap["scene_losses"]))
        io.write_text(out / "divergence.txt", "\n".join(lines) + "\n")
        if "params" in snap:
            torch.save(snap["params"], out / "divergence_params.pt")
        raise
    _checkpoint(out / "checkpoint_last.pt", backbone, optimizer, it, cfg, scenes[0].grid_shape)
    io.write_text(out / "history.txt", io.serialize_history(records, echo))
    return records


def cmd_eval(cfg: RunConfig, estimates_path, gt_path, out_path, curve_path=None):
    estimates = io.parse_estimates(io.read_text(estimates_path))
    gts = io.parse_ground_truth(io.read_text(gt_path))
    by_id = {}
    for e in estimates:
        if e.pair_id in by_id:
            raise ShapeError(f"duplicate estimate for {e.pair_id}")
        by_id[e.pair_id] = e
    known = {g.pair_id for g in gts}
    unknown = sorted(set(by_id) - known)
    if unknown:
        raise ShapeError(f"estimates for unknown pairs: {unknown[:5]}")
    aligned = [by_id.get(g.pair_id, Estimate(None, float("nan"), g.pair_id)) for g in gts]
    report, (ratios, precisions) = evaluate(aligned, [g.pose for g in gts], [g.intrinsics for g in gts],
                                            threshold_px=cfg.threshold_px)
    echo = cfg.to_json()
    io.write_text(out_path, io.serialize_report(report, echo))
    if curve_path is not None:
        io.write_text(curve_path, io.serialize_curve(ratios, precisions, echo))
    return report


def cmd_gradcheck(instances: int = 100, tolerance: float | None = None, inject_bug: str | None = None,
                  seed: int = 0, out_path=None):
    if inject_bug is not None and inject_bug not in gradcheck.SUITES:
        raise ConfigError(f"unknown check {inject_bug!r}; choose from {', '.join(gradcheck.SUITES)}")
    if instances < 1:
        raise ConfigError("instances must be positive")
    rows = gradcheck.run_all(instances, tolerance, inject_bug, seed)
    table = gradcheck.format_table(rows)
    if out_path is not None:
        io.write_text(out_path, table + "\n")
    return rows, table


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metricpose", description="Metric relative pose from 3D-3D keypoint matches.")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, help="random seed (default: $METRICPOSE_SEED or 0)")
    p.add_argument("--toy", action="store_true", help="start from the small demonstration preset")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic scenes")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, help="number of scenes (default: num_scenes)")

    s = sub.add_parser("solve", help="estimate poses for every scene of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the toy backbone")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--manifest", help="train on these scenes instead of generating")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="score estimates against ground truth")
    e.add_argument("--estimates", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--curve", help="also write the precision-vs-ratio curve")

    c = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--tolerance", type=float, help="override every row's tolerance")
    c.add_argument("--inject-bug", choices=gradcheck.SUITES, help="perturb one analytic gradient")
    c.add_argument("--out", help="also write the table here")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides, toy=args.toy)
        if args.command == "generate":
            ids = cmd_generate(cfg, args.out, args.count)
            print(f"wrote {len(ids)} scenes to {args.out}")
        elif args.command == "solve":
            ests = cmd_solve(cfg, args.manifest, args.out)
            print(f"solved {sum(e.present for e in ests)}/{len(ests)} pairs")
        elif args.command == "train":
            recs = cmd_train(cfg, args.out, args.manifest, args.resume)
            if recs:
                print(f"iterations {recs[0].iteration}..{recs[-1].iteration}, final loss {recs[-1].loss:.4g}")
        elif args.command == "eval":
            rep = cmd_eval(cfg, args.estimates, args.gt, args.out, args.curve)
            print(f"precision {rep.precision:.4f} auc {rep.auc:.4f} rate {rep.estimate_rate:.4f}")
        elif args.command == "gradcheck":
            rows, table = cmd_gradcheck(args.instances, args.tolerance, args.inject_bug, cfg.seed, args.out)
            print(table)
            return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERICAL
    except (ConfigError, DomainError, ShapeError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MetricPoseError, np.linalg.LinAlgError, torch.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line orchestration.

Commands map one-to-one onto the experiments: ``render`` (synthetic
scene files), ``toy`` (trajectory-regression invariance run),
``gradcheck`` (finite-difference verification), ``pretrain`` (base
denoiser), ``edit`` (concept-swap pipeline), ``ablate`` (guide-input
comparison). Exit codes: 0 success / verdict passed, 1 verdict failed,
2 environment or config error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import diffusion, gradcheck, guide, mt1, scene, toy
from .config import ConfigError, ExperimentConfig, load_config
from .params import load_paramset, save_paramset
from .toy import DivergenceError


def _ensure_outdir(cfg: ExperimentConfig) -> str:
    try:
        os.makedirs(cfg.out, exist_ok=True)
        probe = os.path.join(cfg.out, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.out!r} is not writable: {exc}") from exc
    return cfg.out


def _write_video_files(video: scene.SyntheticVideo, out: str) -> None:
    for i in range(video.n):
        scene.write_ppm(os.path.join(out, f"rgb_{i:03d}.ppm"), video.rgb[i])
        scene.write_ppm(os.path.join(out, f"corr_{i:03d}.ppm"), video.corr[i])
        scene.write_pgm16(os.path.join(out, f"depth_{i:03d}.pgm"), video.depth[i, 0])
        scene.write_pgm16(os.path.join(out, f"mask_{i:03d}.pgm"), video.mask[i, 0])
    scene.write_trajectory_csv(os.path.join(out, "trajectory.csv"),
                               video.trajectory, video.alpha)
    for name in ("corr", "depth", "mask", "rgb"):
        mt1.save_mt1(os.path.join(out, f"{name}.mt1"), getattr(video, name))


def cmd_render(cfg: ExperimentConfig) -> int:
    out = _ensure_outdir(cfg)
    video = scene.render_scene(cfg.scene_spec())
    _write_video_files(video, out)
    print(f"rendered {video.n} frames into {out}")
    return 0


def cmd_toy(cfg: ExperimentConfig) -> int:
    out = _ensure_outdir(cfg)
    spec = cfg.scene_spec()
    base = scene.render_scene(spec)
    positive = scene.make_positive_sample(spec, cfg.pos_scale)
    negative = scene.make_negative_sample(spec, cfg.seed, cfg.neg_separation)

    tcfg = cfg.toy_config()
    params, curve, stats = toy.train_toy(base, base.trajectory, tcfg)
    pos_mse = toy.eval_toy(params, positive, positive.trajectory, stats, tcfg)
    neg_mse = toy.eval_toy(params, negative, negative.trajectory, stats, tcfg)
    report = toy.invariance_report(curve, pos_mse, neg_mse, (cfg.toy_k, cfg.toy_m))

    toy.write_loss_csv(os.path.join(out, "loss.csv"), curve)
    report.to_csv(os.path.join(out, "report.csv"))
    save_paramset(params, os.path.join(out, "guide_params"))
    print(f"train_mse={report.final_train_mse:.6g} pos_mse={pos_mse:.6g} "
          f"neg_mse={neg_mse:.6g}")
    print(f"shape_invariant={report.shape_invariant} motion_sensitive={report.motion_sensitive}")
    return 0 if report.passed else 1


def cmd_gradcheck(cfg: ExperimentConfig, corrupt_op=None) -> int:
    out = _ensure_outdir(cfg)
    results = gradcheck.run_all(seed=cfg.seed, corrupt_op=corrupt_op)
    gradcheck.write_report_csv(os.path.join(out, "gradcheck.csv"), results)
    ok = True
    for res in results:
        status = "pass" if res.passed else "FAIL"
        print(f"{res.op}: max_rel_err={res.max_error:.3g} tol={res.tolerance:g} {status}")
        for tensor, err in res.per_tensor.items():
            print(f"    {tensor}: {err:.3g}")
        ok = ok and res.passed
    return 0 if ok else 1


def _checkpoint_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out, "checkpoint")


def _run_pretrain(cfg: ExperimentConfig):
    dcfg = cfg.diffusion_config()
    camera = scene.Camera(width=cfg.resolution, height=cfg.resolution, focal=cfg.focal)
    corpus = diffusion.make_corpus(dcfg, camera, cfg.frames, cfg.seed)
    params, losses = diffusion.pretrain(corpus, dcfg, cfg.seed)
    return params, losses


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    out = _ensure_outdir(cfg)
    dcfg = cfg.diffusion_config()
    params, losses = _run_pretrain(cfg)
    meta = {"timesteps": dcfg.timesteps, "beta_min": dcfg.beta_min,
            "beta_max": dcfg.beta_max, "channels": dcfg.channels,
            "blocks": dcfg.blocks, "mlp_hidden": dcfg.mlp_hidden,
            "concepts": list(dcfg.concepts)}
    save_paramset(params, _checkpoint_dir(cfg), meta=meta)
    with open(os.path.join(out, "pretrain_loss.csv"), "w") as fh:
        fh.write("iter,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
    print(f"pretrained {dcfg.pretrain_iterations} iterations; "
          f"loss {losses[0]:.4g} -> {losses[-1]:.4g}")
    return 0


def _load_or_pretrain(cfg: ExperimentConfig, do_pretrain: bool, checkpoint: str | None):
    ckpt = checkpoint or _checkpoint_dir(cfg)
    if do_pretrain:
        params, _ = _run_pretrain(cfg)
        return params
    if not os.path.isdir(ckpt):
        raise ConfigError(f"no checkpoint at {ckpt!r}; run `pretrain` first or pass --pretrain")
    params, _ = load_paramset(ckpt)
    return params


def cmd_edit(cfg: ExperimentConfig, do_pretrain: bool = False,
             checkpoint: str | None = None) -> int:
    out = _ensure_outdir(cfg)
    dcfg = cfg.diffusion_config()
    pretrained = _load_or_pretrain(cfg, do_pretrain, checkpoint)
    source = scene.render_scene(cfg.scene_spec())
    edited, z0, _, _ = diffusion.run_edit(pretrained, source, dcfg, cfg.seed,
                                          mode=cfg.guide_mode, lam=cfg.lam,
                                          blend_background=cfg.blend)
    frames = diffusion.decode_video(edited, dcfg)
    for i in range(frames.shape[0]):
        scene.write_ppm(os.path.join(out, f"edit_{i:03d}.ppm"), frames[i])
    diffusion.write_centroid_csv(os.path.join(out, "centroids.csv"),
                                 diffusion.centroid_track(edited, dcfg))
    diffusion.write_centroid_csv(os.path.join(out, "source_centroids.csv"),
                                 diffusion.centroid_track(z0, dcfg))
    mt1.save_mt1(os.path.join(out, "edited_latents.mt1"), edited)
    print(f"edited {frames.shape[0]} frames into {out}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, do_pretrain: bool = False,
               checkpoint: str | None = None) -> int:
    out = _ensure_outdir(cfg)
    dcfg = cfg.diffusion_config()
    pretrained = _load_or_pretrain(cfg, do_pretrain, checkpoint)
    source = scene.render_scene(cfg.scene_spec())
    rows = diffusion.ablate(pretrained, source, dcfg, cfg.seed, modes=cfg.ablate_modes)
    diffusion.write_ablation_csv(os.path.join(out, "ablation.csv"), rows)
    for row in rows:
        print(f"{row.mode}: centroid_mse={row.centroid_mse:.4g} "
              f"range_ratio={row.range_ratio:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionlab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="root RNG seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("render", help="render the synthetic scene to files")
    common(p)
    p.add_argument("--frames", type=int, help="frame count")

    p = sub.add_parser("toy", help="trajectory-regression invariance experiment")
    common(p)
    p.add_argument("--frames", type=int)
    p.add_argument("--iterations", type=int, dest="toy_iterations")
    p.add_argument("--neg-separation", type=float, dest="neg_separation")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--corrupt-op", help="test hook: corrupt one op's analytic gradients")

    p = sub.add_parser("pretrain", help="train the base denoiser on the synthetic corpus")
    common(p)

    p = sub.add_parser("edit", help="concept-swap editing pipeline")
    common(p)
    p.add_argument("--pretrain", action="store_true", help="pretrain instead of loading")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--lambda", type=float, dest="lam", help="injection weight")
    p.add_argument("--blend", action="store_true", help="background latent blending")

    p = sub.add_parser("ablate", help="guide-input ablation comparison")
    common(p)
    p.add_argument("--pretrain", action="store_true")
    p.add_argument("--checkpoint", help="checkpoint directory")
    return parser


_OVERRIDE_KEYS = ("seed", "out", "frames", "toy_iterations", "neg_separation", "lam")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    for key in _OVERRIDE_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "blend", False):
        overrides["blend"] = True
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "render":
            return cmd_render(cfg)
        if args.command == "toy":
            return cmd_toy(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, corrupt_op=args.corrupt_op)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "edit":
            return cmd_edit(cfg, do_pretrain=args.pretrain, checkpoint=args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg, do_pretrain=args.pretrain, checkpoint=args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, scene.SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

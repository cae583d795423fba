"""Command-line surface for the whole pipeline.

Every run takes an optional JSON config file plus flag overrides, and records
its fully resolved configuration (seed included) in the output directory so
it can be replayed exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .evaluate import AblationBudget, AblationConfig, directional_ablation, psnr, ssim
from .geometry import CameraIntrinsics, Trajectory
from .infer import InferenceConfig, create_session, run
from .cache import CacheConfig
from .scene import generate_scene, render_gt, sample_trajectory, save_frame
from .schedule import InferenceNoiseConfig, ROLE_BLANK, ROLE_HISTORY, ROLE_WARPED, schedule_matrix
from .train import TrainConfig, train_loop
from . import denoiser as dn


def _write_resolved(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps({"command": command, **resolved}, indent=1, sort_keys=True))


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return json.loads(p.read_text())


def _resolve(defaults: dict, config: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags (argparse defaults are None)."""
    resolved = dict(defaults)
    for key in defaults:
        if key in config:
            resolved[key] = config[key]
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _save_png(path: Path, image: np.ndarray) -> None:
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_scene_gen(args) -> int:
    defaults = {"seed": 0, "complexity": 4, "preview": False}
    resolved = _resolve(defaults, _load_config(args.config), args)
    out = Path(args.out)
    _write_resolved(out, "scene gen", resolved)
    scene = generate_scene(resolved["seed"], resolved["complexity"])
    scene.save(out / "scene.json")
    if resolved["preview"]:
        K = CameraIntrinsics(fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64)
        traj = sample_trajectory(scene, "dolly", 2, seed=resolved["seed"], intrinsics=K)
        save_frame(render_gt(scene, traj.poses[0], K), out, "preview")
    print(f"scene written to {out / 'scene.json'}")
    return 0


def cmd_train(args) -> int:
    defaults = {k: getattr(TrainConfig(), k) for k in (
        "steps", "batch", "lr", "seed", "scene_count", "complexity", "image_size",
        "chunk_len", "patch", "noise_variant", "base_channels", "depth",
        "frame_mixing", "sigma_embed_dim")}
    defaults["checkpoint_every"] = 0  # 0: final checkpoint only
    resolved = _resolve(defaults, _load_config(args.config), args)
    out = Path(args.out)
    _write_resolved(out, "train", resolved)
    every = resolved.pop("checkpoint_every")
    cfg = TrainConfig(**resolved)
    hook = None
    if every > 0:
        def hook(state):
            if state.step % every == 0:
                state.save(out / f"checkpoint_step{state.step:06d}")
    state, trace = train_loop(cfg, on_step=hook)
    state.save(out / "checkpoint")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(trace):
            writer.writerow([i, repr(value)])
    print(f"trained {resolved['steps']} steps; checkpoint at {out / 'checkpoint'}")
    return 0


def _load_model(args):
    if getattr(args, "checkpoint", None):
        return dn.DenoiserState.load(args.checkpoint)
    # diagnostic zero-velocity model: generation decodes the start latents
    return lambda z, sigma, cond: np.zeros_like(z)


def cmd_generate(args) -> int:
    defaults = {"scene_seed": 0, "complexity": 4, "frames": 16, "chunk": 8,
                "overlap": 2, "steps": 50, "tau": 0.8, "cache_mode": "splats",
                "cache_steps": 150, "cache_stride": 2, "image_size": 32,
                "focal": 40.0, "patch": 4, "seed": 0, "trajectory": "dolly"}
    resolved = _resolve(defaults, _load_config(args.config), args)
    out = Path(args.out)
    _write_resolved(out, "generate", resolved)

    scene = generate_scene(resolved["scene_seed"], resolved["complexity"])
    half = resolved["image_size"] / 2
    K = CameraIntrinsics(fx=resolved["focal"], fy=resolved["focal"], cx=half, cy=half,
                         width=resolved["image_size"], height=resolved["image_size"])
    initial = sample_trajectory(scene, resolved["trajectory"], 2,
                                seed=resolved["seed"], intrinsics=K)
    cfg = InferenceConfig(
        chunk_len=resolved["chunk"], overlap=resolved["overlap"],
        noise=InferenceNoiseConfig(tau=resolved["tau"], steps=resolved["steps"]),
        cache=CacheConfig(steps=resolved["cache_steps"], stride=resolved["cache_stride"]),
        cache_mode=resolved["cache_mode"], patch=resolved["patch"])
    session = create_session(scene, initial, _load_model(args), cfg, seed=resolved["seed"])
    frames, diags = run(session, resolved["frames"])

    for i, frame in enumerate(frames):
        _save_png(out / f"frame_{i:04d}.png", frame)
    session.history_traj.save(out / "trajectory.json")
    for c, diag in enumerate(diags):
        ddir = out / "diagnostics" / f"chunk_{c:03d}"
        ddir.mkdir(parents=True, exist_ok=True)
        for t in range(len(diag.priors)):
            _save_png(ddir / f"prior_{t}.png", diag.priors.warped[t])
            _save_png(ddir / f"mask_{t}.png", diag.priors.masks[t])
        diag.matrix.save_csv(ddir / "schedule.csv")
        diag.matrix.save_heatmap(ddir / "schedule.png")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    defaults = {"scene_seed": 0, "complexity": 4, "initial_count": 2}
    resolved = _resolve(defaults, _load_config(args.config), args)
    gen_dir = Path(args.generated)
    if not gen_dir.exists():
        print(f"generated directory {gen_dir} not found", file=sys.stderr)
        return 1
    out = Path(args.out)
    _write_resolved(out, "eval", resolved)
    traj = Trajectory.load(gen_dir / "trajectory.json")
    scene = generate_scene(resolved["scene_seed"], resolved["complexity"])
    frame_paths = sorted(gen_dir.glob("frame_*.png"))
    offset = resolved["initial_count"]
    per_frame = []
    for i, path in enumerate(frame_paths):
        img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        pose, K = traj[offset + i]
        gt = render_gt(scene, pose, K).rgb
        per_frame.append({"frame": i, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    metrics = {
        "per_frame": per_frame,
        "mean_psnr": float(np.mean([m["psnr"] for m in per_frame])),
        "mean_ssim": float(np.mean([m["ssim"] for m in per_frame])),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(json.dumps({k: metrics[k] for k in ("mean_psnr", "mean_ssim")}))
    return 0


def cmd_ablate(args) -> int:
    defaults = {k: getattr(AblationBudget(), k) for k in (
        "seeds", "train_steps", "batch", "lr", "scene_count", "complexity",
        "image_size", "chunk_len", "overlap", "solver_steps", "tau",
        "eval_scene_seeds", "total_frames", "cache_steps", "cache_stride")}
    resolved = _resolve(defaults, _load_config(args.config), args)
    out = Path(args.out)
    _write_resolved(out, "ablate", resolved)
    budget = AblationBudget(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in resolved.items()})
    report = directional_ablation(budget, verbose=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "seed", "short_psnr", "long_psnr", "mean_ssim"])
        for seed, rep in zip(budget.seeds, report["per_seed"]):
            for section in ("noise", "cache"):
                for row, metrics in rep[section].items():
                    if isinstance(metrics, dict):
                        writer.writerow([row, seed, metrics["short_psnr"],
                                         metrics["long_psnr"], metrics["mean_ssim"]])
    print(json.dumps(report["majority_verdicts"]))
    return 0


def cmd_schedule_viz(args) -> int:
    defaults = {"tau": 0.8, "steps": 50, "tokens": 13, "history": 2}
    resolved = _resolve(defaults, _load_config(args.config), args)
    out = Path(args.out)
    _write_resolved(out, "schedule viz", resolved)
    cfg = InferenceNoiseConfig(tau=resolved["tau"], steps=resolved["steps"])
    tokens, history = resolved["tokens"], resolved["history"]
    sigma_init = np.zeros(tokens)
    roles = []
    for t in range(tokens):
        if t < history:
            roles.append(ROLE_HISTORY)
        elif t % 2 == 0:
            roles.append(ROLE_WARPED)
            sigma_init[t] = cfg.tau
        else:
            roles.append(ROLE_BLANK)
            sigma_init[t] = cfg.sigma_max
    matrix = schedule_matrix(sigma_init, tuple(roles), cfg)
    matrix.save_csv(out / "schedule.csv")
    matrix.save_heatmap(out / "schedule.png")
    print(f"schedule matrix written to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(model=_load_model(args))
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpflow",
                                     description="forward-warped flow-matching generation")
    sub = parser.add_subparsers(dest="command", required=True)

    scene_p = sub.add_parser("scene", help="scene utilities")
    scene_sub = scene_p.add_subparsers(dest="scene_command", required=True)
    gen = scene_sub.add_parser("gen", help="generate a procedural scene")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--complexity", type=int)
    gen.add_argument("--preview", action="store_const", const=True)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_scene_gen)

    train_p = sub.add_parser("train", help="train the velocity network")
    for flag, typ in (("steps", int), ("batch", int), ("lr", float), ("seed", int),
                      ("scene_count", int), ("complexity", int), ("image_size", int),
                      ("chunk_len", int), ("patch", int), ("base_channels", int),
                      ("depth", int), ("sigma_embed_dim", int)):
        train_p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=typ)
    train_p.add_argument("--noise-variant", dest="noise_variant",
                         choices=["spatio-temporal", "spatial", "temporal", "full"])
    train_p.add_argument("--frame-mixing", dest="frame_mixing",
                         choices=["temporal_conv", "attention"])
    train_p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    train_p.add_argument("--config")
    train_p.add_argument("--out", required=True)
    train_p.set_defaults(func=cmd_train)

    gen_p = sub.add_parser("generate", help="generate frames autoregressively")
    for flag, typ in (("scene_seed", int), ("complexity", int), ("frames", int),
                      ("chunk", int), ("overlap", int), ("steps", int), ("tau", float),
                      ("cache_steps", int), ("cache_stride", int), ("image_size", int),
                      ("focal", float), ("patch", int), ("seed", int)):
        gen_p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=typ)
    gen_p.add_argument("--cache-mode", dest="cache_mode",
                       choices=["splats", "pointcloud", "none", "oracle"])
    gen_p.add_argument("--trajectory", choices=["dolly", "orbit", "lateral", "mixed"])
    gen_p.add_argument("--checkpoint")
    gen_p.add_argument("--config")
    gen_p.add_argument("--out", required=True)
    gen_p.set_defaults(func=cmd_generate)

    eval_p = sub.add_parser("eval", help="score generated frames against ground truth")
    eval_p.add_argument("--generated", required=True)
    eval_p.add_argument("--scene-seed", dest="scene_seed", type=int)
    eval_p.add_argument("--complexity", type=int)
    eval_p.add_argument("--initial-count", dest="initial_count", type=int)
    eval_p.add_argument("--config")
    eval_p.add_argument("--out", required=True)
    eval_p.set_defaults(func=cmd_eval)

    abl_p = sub.add_parser("ablate", help="train noise variants and compare")
    abl_p.add_argument("--train-steps", dest="train_steps", type=int)
    abl_p.add_argument("--seeds", type=int, nargs="+")
    abl_p.add_argument("--total-frames", dest="total_frames", type=int)
    abl_p.add_argument("--cache-steps", dest="cache_steps", type=int)
    abl_p.add_argument("--solver-steps", dest="solver_steps", type=int)
    abl_p.add_argument("--config")
    abl_p.add_argument("--out", required=True)
    abl_p.set_defaults(func=cmd_ablate)

    sched_p = sub.add_parser("schedule", help="noise schedule utilities")
    sched_sub = sched_p.add_subparsers(dest="schedule_command", required=True)
    viz = sched_sub.add_parser("viz", help="export the schedule matrix")
    viz.add_argument("--tau", type=float)
    viz.add_argument("--steps", type=int)
    viz.add_argument("--tokens", type=int)
    viz.add_argument("--history", type=int)
    viz.add_argument("--config")
    viz.add_argument("--out", required=True)
    viz.set_defaults(func=cmd_schedule_viz)

    serve_p = sub.add_parser("serve", help="run the HTTP session service")
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8600)
    serve_p.add_argument("--checkpoint")
    serve_p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

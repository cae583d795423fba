"""End-to-end training over synthetic scenes.

Each example: pick a source frame, one-to-all warp it across the chunk's
viewpoints, encode both sequences, composite valid warped regions over
ground truth, then noise with per-frame per-region levels and regress the
velocity toward the ground-truth latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import denoiser as dn
from .geometry import CameraIntrinsics, Trajectory, plucker_map
from .latent import LatentChunk, composite, encode
from .scene import RgbdFrame, SyntheticScene, generate_scene, render_gt, sample_trajectory
from .schedule import SigmaMap, apply_noise, build_sigma_map
from .warp import downsample_masks, one_to_all

NOISE_VARIANTS = ("spatio-temporal", "spatial", "temporal", "full")


class DivergenceError(RuntimeError):
    """Raised when the loss blows up; carries the recorded trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch: int = 4
    lr: float = 2e-4
    seed: int = 0
    scene_count: int = 4
    complexity: int = 4
    image_size: int = 32
    focal: float = 40.0
    chunk_len: int = 8
    patch: int = 4
    radius_px: float = 1.0
    noise_variant: str = "spatio-temporal"
    base_channels: int = 32
    depth: int = 2
    frame_mixing: str = "temporal_conv"
    sigma_embed_dim: int = 8
    trajectory_kinds: tuple[str, ...] = ("dolly", "orbit", "lateral", "mixed")
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if self.noise_variant not in NOISE_VARIANTS:
            raise ValueError(f"noise variant must be one of {NOISE_VARIANTS}")
        if self.image_size % self.patch:
            raise ValueError("patch must divide image size")

    def intrinsics(self) -> CameraIntrinsics:
        half = self.image_size / 2
        return CameraIntrinsics(fx=self.focal, fy=self.focal, cx=half, cy=half,
                                width=self.image_size, height=self.image_size)

    def denoiser_config(self) -> dn.DenoiserConfig:
        return dn.DenoiserConfig(
            latent_channels=3 * self.patch * self.patch,
            base_channels=self.base_channels, depth=self.depth,
            frame_mixing=self.frame_mixing, sigma_embed_dim=self.sigma_embed_dim,
            patch=self.patch, chunk_len=self.chunk_len)


@dataclass(frozen=True)
class TrainingExample:
    z_gt: LatentChunk
    z_warp: LatentChunk
    z_composite: LatentChunk
    z_noisy: np.ndarray
    m_latent: np.ndarray
    sigma: SigmaMap
    sigma_warped: np.ndarray
    sigma_filled: np.ndarray
    eps: np.ndarray
    rays: np.ndarray

    def batch_item(self) -> dict:
        return {"z_gt": self.z_gt, "z_noisy": self.z_noisy, "sigma": self.sigma,
                "mask": self.m_latent, "z_warp": self.z_warp.values,
                "rays": self.rays, "eps": self.eps}


def sample_noise_levels(rng: np.random.Generator, chunk_len: int,
                        variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (warped, filled) noise levels under the given ablation variant."""
    if variant == "spatio-temporal":
        return rng.uniform(size=chunk_len), rng.uniform(size=chunk_len)
    if variant == "temporal":  # per-frame level, uniform across regions
        s = rng.uniform(size=chunk_len)
        return s, s.copy()
    if variant == "spatial":  # per-region level, shared across frames
        sw, sf = rng.uniform(), rng.uniform()
        return np.full(chunk_len, sw), np.full(chunk_len, sf)
    if variant == "full":  # one level for everything
        s = rng.uniform()
        return np.full(chunk_len, s), np.full(chunk_len, s)
    raise ValueError(f"unknown noise variant {variant!r}")


def latent_rays(trajectory: Trajectory, patch: int) -> np.ndarray:
    """Per-frame ray maps evaluated at latent-pixel centers: (T, 6, h', w')."""
    maps = []
    for pose, K in zip(trajectory.poses, trajectory.intrinsics):
        pm = plucker_map(pose, K.scaled(1.0 / patch))
        maps.append(pm.values.transpose(2, 0, 1))
    return np.stack(maps)


def make_training_example(scene: SyntheticScene, trajectory: Trajectory,
                          source_index: int, rng: np.random.Generator,
                          patch: int = 4, radius_px: float = 1.0,
                          noise_variant: str = "spatio-temporal",
                          frames: list[RgbdFrame] | None = None) -> TrainingExample:
    if not (0 <= source_index < len(trajectory)):
        raise ValueError(f"source index {source_index} outside trajectory")
    if frames is None:
        frames = [render_gt(scene, pose, K)
                  for pose, K in zip(trajectory.poses, trajectory.intrinsics)]
    chunk = one_to_all(frames[source_index], trajectory, radius_px)
    z_gt = encode(np.stack([f.rgb for f in frames]), patch=patch)
    z_warp = encode(chunk.warped, patch=patch, tag="warped")
    m_latent = downsample_masks(chunk.masks, patch)
    sigma_w, sigma_f = sample_noise_levels(rng, len(trajectory), noise_variant)
    sigma = build_sigma_map(m_latent, sigma_w, sigma_f)
    z_c = composite(z_warp, z_gt, m_latent)
    eps = rng.normal(size=z_gt.shape)
    z_noisy = apply_noise(z_c, sigma, eps)
    return TrainingExample(
        z_gt=z_gt, z_warp=z_warp, z_composite=z_c, z_noisy=z_noisy.values,
        m_latent=m_latent, sigma=sigma, sigma_warped=sigma_w, sigma_filled=sigma_f,
        eps=eps, rays=latent_rays(trajectory, patch))


@dataclass
class ScenePool:
    """Pre-rendered (scene, trajectory, frames) sequences for fast batch assembly."""

    scenes: list[SyntheticScene]
    trajectories: list[Trajectory]
    frames: list[list[RgbdFrame]]
    scene_of: list[int]

    @classmethod
    def build(cls, cfg: TrainConfig, seed_offset: int = 0) -> "ScenePool":
        scenes, trajectories, frames, scene_of = [], [], [], []
        K = cfg.intrinsics()
        for i in range(cfg.scene_count):
            scene = generate_scene(cfg.seed * 1009 + seed_offset + i, cfg.complexity)
            scenes.append(scene)
            for j, kind in enumerate(cfg.trajectory_kinds):
                traj = sample_trajectory(scene, kind, cfg.chunk_len,
                                         seed=cfg.seed * 31 + i * 7 + j, intrinsics=K)
                trajectories.append(traj)
                frames.append([render_gt(scene, p, k)
                               for p, k in zip(traj.poses, traj.intrinsics)])
                scene_of.append(i)
        return cls(scenes, trajectories, frames, scene_of)

    def __len__(self) -> int:
        return len(self.trajectories)


def smoothed(trace: list[float], window: int = 50) -> np.ndarray:
    """Moving average of the loss trace (trailing window)."""
    arr = np.asarray(trace, dtype=np.float64)
    if len(arr) == 0:
        return arr
    w = min(window, len(arr))
    kernel = np.ones(w) / w
    return np.convolve(arr, kernel, mode="valid")


def train_loop(cfg: TrainConfig, pool: ScenePool | None = None,
               on_step=None) -> tuple[dn.DenoiserState, list[float]]:
    """Adam training of the velocity net; deterministic given seed.

    Aborts with DivergenceError when the loss exceeds divergence_factor x the
    initial loss for divergence_patience consecutive steps.  `on_step(state)`
    runs after every optimizer step (checkpoint hooks and the like).
    """
    rng = np.random.default_rng(cfg.seed)
    state = dn.init_denoiser(cfg.denoiser_config(), seed=cfg.seed)
    if cfg.steps == 0:
        return state, []
    if pool is None:
        pool = ScenePool.build(cfg)
    opt = ad.Adam(state.parameters(), lr=cfg.lr)
    trace: list[float] = []
    bad_streak = 0
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch):
            pick = int(rng.integers(len(pool)))
            source = int(rng.integers(cfg.chunk_len))
            ex = make_training_example(
                pool.scenes[pool.scene_of[pick]], pool.trajectories[pick], source, rng,
                patch=cfg.patch, radius_px=cfg.radius_px,
                noise_variant=cfg.noise_variant, frames=pool.frames[pick])
            batch.append(ex.batch_item())
        opt.zero_grad()
        loss = dn.loss(state, batch)
        trace.append(float(loss.data))
        ad.backward(loss)
        opt.step()
        state.step += 1
        if on_step is not None:
            on_step(state)
        if trace[-1] > cfg.divergence_factor * trace[0]:
            bad_streak += 1
            if bad_streak >= cfg.divergence_patience:
                raise DivergenceError(
                    f"loss {trace[-1]:.3g} stayed above "
                    f"{cfg.divergence_factor}x initial for {bad_streak} steps", trace)
        else:
            bad_streak = 0
    return state, trace

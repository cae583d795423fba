"""Autoregressive chunked generation.

Each chunk: rebuild the geometric cache from recent history, render warped
priors at the next viewpoints, start the reverse solver from spatially-varying
noise (tau on warped regions, full noise on blanks, zero on overlap tokens),
integrate the flow with per-token step sizes, and append the decoded frames.

Depth and poses for history frames come from the known synthetic scene, which
stands in for an external 3D estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from .cache import CacheConfig, SplatCloud, init_cache, optimize_cache, render_priors
from .geometry import CameraIntrinsics, CameraPose, Trajectory, extrapolate_trajectory
from .latent import decode, encode
from .scene import RgbdFrame, SyntheticScene, render_gt
from .schedule import (
    InferenceNoiseConfig,
    ScheduleMatrix,
    SigmaMap,
    build_start_map,
    schedule_matrix,
    sigma_at_step,
    summarize_start_map,
)
from .train import latent_rays
from .warp import RgbPointCloud, WarpedPriorChunk, downsample_masks, lift, splat_render

CACHE_MODES = ("splats", "pointcloud", "none", "oracle")


@dataclass(frozen=True)
class InferenceConfig:
    chunk_len: int = 8
    overlap: int = 2
    noise: InferenceNoiseConfig = field(default_factory=InferenceNoiseConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    cache_mode: str = "splats"
    cache_window: int = 4  # recent frames fed to the cache, plus the initial frames
    patch: int = 4
    radius_px: float = 1.0  # point size for the fixed-radius point-cloud cache
    alpha_threshold: float = 0.5
    extrapolation_window: int = 20
    # when set, the very first chunk also hard-constrains its overlap tokens
    # against the trailing initial frames (interactive-session behavior)
    constrain_first_chunk: bool = False

    def __post_init__(self):
        if not (0 <= self.overlap < self.chunk_len):
            raise ValueError("overlap must satisfy 0 <= overlap < chunk_len")
        if self.cache_mode not in CACHE_MODES:
            raise ValueError(f"cache_mode must be one of {CACHE_MODES}")


@dataclass
class ChunkDiagnostics:
    chunk_frames: np.ndarray  # (T, h, w, 3) decoded chunk, overlap tokens included
    priors: WarpedPriorChunk
    m_latent: np.ndarray
    start_map: SigmaMap
    matrix: ScheduleMatrix
    sigma_trace: np.ndarray  # (N, T, h', w') sigma actually used at each solver step
    pure_noise: bool
    history_token_count: int
    cache_loss_trace: list[float]
    poses: tuple[CameraPose, ...]


@dataclass
class GenerationSession:
    scene: SyntheticScene
    denoiser: object  # DenoiserState or velocity callable (z, sigma_values, cond) -> array
    config: InferenceConfig
    rng: np.random.Generator
    history_rgb: list[np.ndarray]
    history_traj: Trajectory
    initial_count: int
    chunk_counter: int = 0
    current_cache: SplatCloud | None = None

    def __post_init__(self):
        if len(self.history_rgb) != len(self.history_traj):
            raise ValueError("history frames and poses must align")
        if self.config.overlap >= self.config.chunk_len:
            raise ValueError("overlap must be smaller than the chunk length")


def create_session(scene: SyntheticScene, initial: Trajectory, denoiser,
                   config: InferenceConfig | None = None, seed: int = 0) -> GenerationSession:
    """Start a session from ground-truth initial frame(s) along `initial`."""
    config = config or InferenceConfig()
    frames = [render_gt(scene, p, k).rgb for p, k in zip(initial.poses, initial.intrinsics)]
    return GenerationSession(scene=scene, denoiser=denoiser, config=config,
                             rng=np.random.default_rng(seed), history_rgb=frames,
                             history_traj=initial, initial_count=len(frames))


def _continue_poses(traj: Trajectory, count: int, window: int) -> Trajectory:
    """Constant-velocity continuation; a single-pose history repeats in place."""
    if len(traj) >= 2:
        return extrapolate_trajectory(traj, count, window)
    pose, K = traj[0]
    return traj.extended([pose] * count, [K] * count,
                         [traj.frames[-1] + 1 + i for i in range(count)])


def _history_rgbd(session: GenerationSession, indices: list[int]) -> list[RgbdFrame]:
    """History frames with depth looked up from the known scene geometry."""
    frames = []
    for i in indices:
        pose, K = session.history_traj[i]
        depth = render_gt(session.scene, pose, K).depth
        frames.append(RgbdFrame(rgb=np.clip(session.history_rgb[i], 0.0, 1.0),
                                depth=depth, pose=pose, intrinsics=K))
    return frames


def _cache_window_indices(session: GenerationSession) -> list[int]:
    n = len(session.history_rgb)
    recent = list(range(max(0, n - session.config.cache_window), n))
    initials = list(range(session.initial_count))
    return sorted(set(initials + recent))


def _build_priors(session: GenerationSession, chunk_traj: Trajectory
                  ) -> tuple[WarpedPriorChunk, list[float]]:
    cfg = session.config
    h, w = chunk_traj.intrinsics[0].height, chunk_traj.intrinsics[0].width
    if cfg.cache_mode == "none":
        zeros = np.zeros((len(chunk_traj), h, w, 3))
        return WarpedPriorChunk(zeros, np.zeros((len(chunk_traj), h, w)),
                                chunk_traj.poses, chunk_traj.intrinsics), []
    if cfg.cache_mode == "oracle":
        rgb = np.stack([render_gt(session.scene, p, k).rgb
                        for p, k in zip(chunk_traj.poses, chunk_traj.intrinsics)])
        masks = np.ones((len(chunk_traj), h, w))
        return WarpedPriorChunk(rgb, masks, chunk_traj.poses, chunk_traj.intrinsics), []

    window = _history_rgbd(session, _cache_window_indices(session))
    if cfg.cache_mode == "pointcloud":
        clouds = [lift(f) for f in window]
        merged = RgbPointCloud(
            positions=np.concatenate([c.positions for c in clouds]),
            colors=np.concatenate([c.colors for c in clouds]),
            pixel_index=np.concatenate([c.pixel_index for c in clouds]))
        warped, masks = [], []
        for pose, K in zip(chunk_traj.poses, chunk_traj.intrinsics):
            img, m = splat_render(merged, pose, K, cfg.radius_px)
            warped.append(img)
            masks.append(m)
        return WarpedPriorChunk(np.stack(warped), np.stack(masks),
                                chunk_traj.poses, chunk_traj.intrinsics), []

    cloud = init_cache(window, cfg.cache)
    cloud, trace = optimize_cache(cloud, window, cfg.cache)
    session.current_cache = cloud
    return render_priors(cloud, chunk_traj, cfg.alpha_threshold,
                         cfg.cache.cutoff_sigmas), trace


def history_token_count(session: GenerationSession) -> int:
    """Overlap tokens the next chunk will hard-constrain."""
    cfg = session.config
    if session.chunk_counter == 0 and not (
            cfg.constrain_first_chunk and len(session.history_rgb) >= cfg.overlap):
        return 0
    return cfg.overlap


def _velocity(session: GenerationSession, z: np.ndarray, sigma_values: np.ndarray,
              cond: dict) -> np.ndarray:
    if isinstance(session.denoiser, dn.DenoiserState):
        return dn.forward(session.denoiser, z, SigmaMap(sigma_values), cond["mask"],
                          cond["z_warp"], cond["rays"]).data
    return session.denoiser(z, sigma_values, cond)


def step_chunk(session: GenerationSession, target_poses: Trajectory | None = None
               ) -> tuple[list[np.ndarray], ChunkDiagnostics]:
    """Generate the next chunk; returns the newly emitted frames and diagnostics."""
    if len(session.history_rgb) < 1:
        raise ValueError("session has no history frames")
    cfg = session.config
    hist_count = history_token_count(session)
    new_count = cfg.chunk_len - hist_count

    if target_poses is not None:
        if len(target_poses) != new_count:
            raise ValueError(f"need {new_count} target poses, got {len(target_poses)}")
        new_traj = target_poses
    else:
        continued = _continue_poses(session.history_traj, new_count, cfg.extrapolation_window)
        new_traj = continued.tail(new_count)

    hist_idx = list(range(len(session.history_rgb) - hist_count, len(session.history_rgb)))
    chunk_poses = tuple(session.history_traj.poses[i] for i in hist_idx) + new_traj.poses
    chunk_K = tuple(session.history_traj.intrinsics[i] for i in hist_idx) + new_traj.intrinsics
    chunk_frames_ids = tuple(session.history_traj.frames[i] for i in hist_idx) + new_traj.frames
    chunk_traj = Trajectory(chunk_poses, chunk_K, chunk_frames_ids)

    priors, cache_trace = _build_priors(session, chunk_traj)
    pure_noise = bool(priors.masks.sum() == 0)

    z_warp = encode(priors.warped, patch=cfg.patch, tag="warped")
    m_latent = downsample_masks(priors.masks, cfg.patch)
    start = build_start_map(m_latent, cfg.noise, hist_count)
    sigma_init, roles = summarize_start_map(start, m_latent, hist_count)
    matrix = schedule_matrix(sigma_init, roles, cfg.noise)

    eps = session.rng.normal(size=z_warp.shape)
    s = start.values[:, None, :, :]
    z = (1.0 - s) * z_warp.values + s * eps
    if hist_count:
        z_hist = encode(np.stack([session.history_rgb[i] for i in hist_idx]),
                        patch=cfg.patch).values
        z[:hist_count] = z_hist

    rays = latent_rays(chunk_traj, cfg.patch)
    cond = {"mask": m_latent, "z_warp": z_warp.values, "rays": rays, "eps": eps,
            "poses": chunk_traj.poses, "intrinsics": chunk_traj.intrinsics,
            "history_count": hist_count}

    n = cfg.noise.steps
    sigma_trace = np.empty((n, *start.shape))
    for k in range(n, 0, -1):
        sig_k = sigma_at_step(start, cfg.noise, k)
        sigma_trace[n - k] = sig_k
        delta = sig_k - sigma_at_step(start, cfg.noise, k - 1)
        v = _velocity(session, z, sig_k, cond)
        z = z - delta[:, None, :, :] * v
        if hist_count:
            z[:hist_count] = z_hist  # hard constraint, re-imposed every step

    chunk_images = decode(z_warp.with_values(z, tag="noisy"))
    new_frames = [np.clip(chunk_images[t], 0.0, 1.0) for t in range(hist_count, cfg.chunk_len)]

    session.history_rgb.extend(new_frames)
    session.history_traj = session.history_traj.extended(
        new_traj.poses, new_traj.intrinsics, new_traj.frames)
    session.chunk_counter += 1

    diag = ChunkDiagnostics(
        chunk_frames=chunk_images, priors=priors, m_latent=m_latent, start_map=start,
        matrix=matrix, sigma_trace=sigma_trace, pure_noise=pure_noise,
        history_token_count=hist_count, cache_loss_trace=cache_trace,
        poses=chunk_traj.poses)
    return new_frames, diag


def run(session: GenerationSession, total_frames: int
        ) -> tuple[list[np.ndarray], list[ChunkDiagnostics]]:
    """Generate exactly `total_frames` new frames, chunk by chunk with overlap."""
    if total_frames < session.config.chunk_len:
        raise ValueError("total_frames must be at least one chunk")
    frames: list[np.ndarray] = []
    diags: list[ChunkDiagnostics] = []
    while len(frames) < total_frames:
        new, diag = step_chunk(session)
        frames.extend(new)
        diags.append(diag)
    return frames[:total_frames], diags

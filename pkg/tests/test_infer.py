"""Autoregressive inference tests: solver exactness, overlap constraints, chunking."""

from __future__ import annotations

import numpy as np
import pytest

from warpflow.cache import CacheConfig
from warpflow.denoiser import init_denoiser
from warpflow.geometry import CameraIntrinsics, Trajectory
from warpflow.infer import InferenceConfig, create_session, run, step_chunk
from warpflow.latent import encode
from warpflow.scene import generate_scene, render_gt, sample_trajectory
from warpflow.schedule import InferenceNoiseConfig

K16 = CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)


def small_session(scene_seed=5, cache_mode="none", tau=0.8, steps=10, chunk_len=4,
                  overlap=1, denoiser=None, seed=0, initial_len=2):
    scene = generate_scene(scene_seed, 3)
    initial = sample_trajectory(scene, "dolly", max(initial_len, 2), seed=1, intrinsics=K16)
    if initial_len == 1:
        initial = Trajectory.from_lists([initial.poses[0]], K16)
    cfg = InferenceConfig(
        chunk_len=chunk_len, overlap=overlap,
        noise=InferenceNoiseConfig(tau=tau, steps=steps),
        cache=CacheConfig(steps=4, learning_rate=1.6e-3, stride=2),
        cache_mode=cache_mode, patch=4)
    if denoiser is None:
        denoiser = lambda z, sigma, cond: np.zeros_like(z)
    return create_session(scene, initial, denoiser, cfg, seed=seed), scene


def oracle_velocity(scene, patch=4):
    """Emits the exact constant field ε − z_true along the chunk's viewpoints."""
    def fn(z, sigma, cond):
        gt = np.stack([render_gt(scene, p, k).rgb
                       for p, k in zip(cond["poses"], cond["intrinsics"])])
        return cond["eps"] - encode(gt, patch=patch).values
    return fn


class TestSolverExactness:
    @pytest.mark.parametrize("steps", [1, 3, 25])
    def test_oracle_recovers_ground_truth_from_pure_noise(self, steps):
        session, scene = small_session(cache_mode="none", steps=steps)
        session.denoiser = oracle_velocity(scene)
        new, diag = step_chunk(session)
        assert diag.pure_noise
        for t, frame in enumerate(new):
            pose = diag.poses[t]
            gt = render_gt(scene, pose, K16).rgb
            assert np.max(np.abs(frame - gt)) < 1e-9

    def test_tau_zero_with_perfect_priors_reproduces_priors(self):
        # sigma starts at 0 everywhere, so even a hostile velocity field is inert
        session, scene = small_session(cache_mode="oracle", tau=0.0, steps=8)
        session.denoiser = lambda z, sigma, cond: np.full_like(z, 1e6)
        new, diag = step_chunk(session)
        for t, frame in enumerate(new):
            assert np.array_equal(frame, diag.priors.warped[t])

    def test_sigma_trace_matches_schedule_matrix(self):
        # oracle cache -> every generated token uniformly warped; trace == matrix rows
        session, _ = small_session(cache_mode="oracle", tau=0.8, steps=10)
        _, diag = step_chunk(session)
        n = 10
        for step in range(n):
            k = n - step
            for t in range(session.config.chunk_len):
                expected = diag.matrix.values[t, step]
                got = np.unique(diag.sigma_trace[step][t])
                assert got.size == 1 and got[0] == expected
        assert np.all(diag.matrix.values[:, -1] == 0.0)

    def test_sigma_trace_blank_tokens_full_ladder(self):
        session, _ = small_session(cache_mode="none", steps=10)
        _, diag = step_chunk(session)
        for step in range(10):
            assert np.all(diag.sigma_trace[step] == (10 - step) / 10)


class TestOverlapConstraint:
    def test_overlap_tokens_bit_identical_to_history(self):
        session, scene = small_session(cache_mode="oracle", steps=5, chunk_len=4, overlap=2)
        session.denoiser = oracle_velocity(scene)
        first, _ = step_chunk(session)
        snapshot = [f.copy() for f in session.history_rgb[-2:]]
        _, diag = step_chunk(session)
        assert diag.history_token_count == 2
        for t in range(2):
            assert np.array_equal(diag.chunk_frames[t], snapshot[t])

    def test_history_never_modified(self):
        session, _ = small_session(cache_mode="none", steps=3, chunk_len=4, overlap=1)
        step_chunk(session)
        before = [f.copy() for f in session.history_rgb]
        step_chunk(session)
        for old, new in zip(before, session.history_rgb):
            assert np.array_equal(old, new)


class TestRun:
    def test_single_chunk_total(self):
        session, _ = small_session(cache_mode="none", steps=2, chunk_len=4, overlap=1)
        frames, diags = run(session, 4)
        assert len(frames) == 4 and len(diags) == 1

    def test_chunk_overlap_counting(self):
        # chunk 8, overlap 2, total 20 -> chunks emit 8 + 6 + 6
        session, _ = small_session(cache_mode="none", steps=2, chunk_len=8, overlap=2)
        frames, diags = run(session, 20)
        assert len(frames) == 20
        assert len(diags) == 3
        assert diags[0].history_token_count == 0
        assert all(d.history_token_count == 2 for d in diags[1:])

    def test_truncated_total(self):
        session, _ = small_session(cache_mode="none", steps=2, chunk_len=4, overlap=1)
        frames, _ = run(session, 5)
        assert len(frames) == 5

    def test_total_below_chunk_rejected(self):
        session, _ = small_session()
        with pytest.raises(ValueError):
            run(session, 2)

    def test_determinism_bit_identical(self):
        cfg_args = dict(cache_mode="none", steps=4, chunk_len=4, overlap=1, seed=9)
        state = init_denoiser(
            __import__("warpflow.denoiser", fromlist=["DenoiserConfig"]).DenoiserConfig(
                latent_channels=48, base_channels=8, depth=1, sigma_embed_dim=4,
                patch=4, chunk_len=4), seed=3)
        a_session, _ = small_session(denoiser=state, **cfg_args)
        b_session, _ = small_session(denoiser=state, **cfg_args)
        a_frames, _ = run(a_session, 7)
        b_frames, _ = run(b_session, 7)
        for fa, fb in zip(a_frames, b_frames):
            assert np.array_equal(fa, fb)


class TestCacheModes:
    def test_splat_cache_produces_coverage(self):
        session, _ = small_session(cache_mode="splats", steps=2)
        new, diag = step_chunk(session)
        assert not diag.pure_noise
        assert diag.priors.masks.sum() > 0
        assert len(diag.cache_loss_trace) == 4
        assert session.current_cache is not None

    def test_pointcloud_cache_produces_coverage(self):
        session, _ = small_session(cache_mode="pointcloud", steps=2)
        _, diag = step_chunk(session)
        assert diag.priors.masks.sum() > 0
        assert diag.cache_loss_trace == []

    def test_none_cache_flags_pure_noise(self):
        session, _ = small_session(cache_mode="none", steps=2)
        _, diag = step_chunk(session)
        assert diag.pure_noise

    def test_explicit_target_poses(self):
        session, scene = small_session(cache_mode="none", steps=2, chunk_len=4, overlap=1)
        targets = sample_trajectory(scene, "lateral", 4, seed=4, intrinsics=K16)
        new, diag = step_chunk(session, target_poses=targets)
        assert len(new) == 4
        assert diag.poses == targets.poses
        with pytest.raises(ValueError):
            step_chunk(session, target_poses=targets)  # next chunk needs 3, not 4

    def test_single_initial_frame_repeats_pose(self):
        session, _ = small_session(cache_mode="none", steps=2, initial_len=1,
                                   chunk_len=4, overlap=1)
        new, diag = step_chunk(session)
        assert len(new) == 4
        for pose in diag.poses[1:]:
            assert np.allclose(pose.translation, diag.poses[0].translation)

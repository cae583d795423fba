"""Splat cache tests: init, differentiable rasterization, optimization, priors.

The compositing oracle is the two-term front-to-back formula computed by
hand; rasterizer gradients are checked against central finite differences.
"""

from __future__ import annotations

import numpy as np
import pytest

from warpflow import autodiff as ad
from warpflow.cache import (
    CacheConfig,
    SplatCloud,
    init_cache,
    optimize_cache,
    render_priors,
    render_splats,
    splat_render_op,
)
from warpflow.geometry import CameraIntrinsics, CameraPose, Trajectory
from warpflow.scene import RgbdFrame, Surface, SyntheticScene, render_gt
from warpflow.warp import lift

K8 = CameraIntrinsics(fx=8.0, fy=8.0, cx=4.0, cy=4.0, width=8, height=8)


def make_cloud(positions, radii, colors, opacities) -> SplatCloud:
    positions = np.asarray(positions, dtype=np.float64)
    colors = np.clip(np.asarray(colors, dtype=np.float64), 1e-5, 1 - 1e-5)
    opacities = np.clip(np.asarray(opacities, dtype=np.float64), 1e-12, 1 - 1e-12)
    return SplatCloud(
        positions=positions,
        log_radii=np.log(np.asarray(radii, dtype=np.float64)),
        color_logits=np.log(colors) - np.log1p(-colors),
        opacity_logits=np.log(opacities) - np.log1p(-opacities),
    )


def plane_frame(depth=2.0, K=K8):
    scene = SyntheticScene(
        (Surface((0, 0, depth), (1, 0, 0), (0, 1, 0), 50.0, 50.0, 3),),
        background=(0.0, 0.0, 0.0), seed=0)
    return render_gt(scene, CameraPose.identity(), K)


class TestInitCache:
    def test_one_splat_per_finite_pixel(self):
        frame = plane_frame()
        cloud = init_cache([frame])
        assert len(cloud) == 64

    def test_two_frames_no_dedup(self):
        frame = plane_frame()
        cloud = init_cache([frame, frame])
        assert len(cloud) == 128

    def test_positions_match_lift_oracle(self):
        frame = plane_frame()
        cloud = init_cache([frame])
        reference = lift(frame)
        assert np.max(np.abs(cloud.positions - reference.positions)) < 1e-12

    def test_opacity_starts_at_half(self):
        cloud = init_cache([plane_frame()])
        assert np.all(cloud.opacity_logits == 0.0)
        assert np.allclose(cloud.opacities, 0.5)

    def test_stride(self):
        cloud = init_cache([plane_frame()], CacheConfig(stride=2))
        assert len(cloud) == 16

    def test_colors_recover_pixels(self):
        frame = plane_frame()
        cloud = init_cache([frame])
        assert np.max(np.abs(cloud.colors - frame.rgb.reshape(-1, 3))) < 1e-4

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            init_cache([])

    def test_no_finite_depth_rejected(self):
        frame = RgbdFrame(rgb=np.zeros((4, 4, 3)), depth=np.full((4, 4), np.inf),
                          pose=CameraPose.identity(), intrinsics=K8.scaled(0.5))
        with pytest.raises(ValueError):
            init_cache([frame])


class TestRenderSplats:
    def test_single_opaque_splat_on_pixel_center(self):
        # pixel (4, 4) center (4.5, 4.5): the ray there is ((0.0625, 0.0625, 1)) * z
        cloud = make_cloud([[0.0625, 0.0625, 1.0]], [0.1], [[0.9, 0.2, 0.4]],
                           [1.0 - 1e-12])
        rgb, alpha = render_splats(cloud, CameraPose.identity(), K8)
        assert np.max(np.abs(rgb[4, 4] - [0.9, 0.2, 0.4])) < 1e-6
        assert alpha[4, 4] >= 0.99

    def test_zero_opacity_black(self):
        cloud = make_cloud([[0.0, 0.0, 1.0]], [0.2], [[0.5, 0.5, 0.5]], [1e-12])
        rgb, alpha = render_splats(cloud, CameraPose.identity(), K8)
        assert np.max(np.abs(rgb)) < 1e-9
        assert np.max(alpha) < 1e-9

    def test_two_splat_compositing_oracle(self):
        # both centered on pixel (4, 4): near at z=1 (opacity 0.5), far at z=2 (0.8)
        cloud = make_cloud([[0.0625, 0.0625, 1.0], [0.125, 0.125, 2.0]],
                           [0.1, 0.2], [[1.0 - 1e-5, 0, 0], [0, 1.0 - 1e-5, 0]],
                           [0.5, 0.8])
        rgb, alpha = render_splats(cloud, CameraPose.identity(), K8)
        w_near, w_far = 0.5, 0.8  # g = 1 exactly at the shared center
        c_near = cloud.colors[0]
        c_far = cloud.colors[1]
        expected_rgb = w_near * c_near + (1 - w_near) * w_far * c_far
        expected_alpha = w_near + (1 - w_near) * w_far
        assert np.max(np.abs(rgb[4, 4] - expected_rgb)) < 1e-9
        assert abs(alpha[4, 4] - expected_alpha) < 1e-9

    def test_behind_camera_skipped(self):
        cloud = make_cloud([[0.0, 0.0, -1.0]], [0.1], [[0.5, 0.5, 0.5]], [0.9])
        rgb, alpha = render_splats(cloud, CameraPose.identity(), K8)
        assert rgb.sum() == 0 and alpha.sum() == 0

    def test_alpha_in_unit_interval(self, rng):
        n = 40
        cloud = make_cloud(rng.uniform([-1, -1, 0.5], [1, 1, 3], (n, 3)),
                           rng.uniform(0.05, 0.3, n), rng.random((n, 3)),
                           rng.uniform(0.1, 0.99, n))
        _, alpha = render_splats(cloud, CameraPose.identity(), K8)
        assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0)

    def test_alpha_monotone_in_opacity(self, rng):
        n = 10
        cloud = make_cloud(rng.uniform([-0.5, -0.5, 1], [0.5, 0.5, 2], (n, 3)),
                           rng.uniform(0.05, 0.2, n), rng.random((n, 3)),
                           rng.uniform(0.2, 0.8, n))
        _, alpha_before = render_splats(cloud, CameraPose.identity(), K8)
        bumped = SplatCloud(cloud.positions, cloud.log_radii, cloud.color_logits,
                            cloud.opacity_logits + np.eye(n)[3] * 1.0)
        _, alpha_after = render_splats(bumped, CameraPose.identity(), K8)
        assert np.all(alpha_after >= alpha_before - 1e-12)

    def test_cutoff_matches_full_rasterization(self, rng):
        # a generous cutoff loses only numerically negligible tail weight
        n = 15
        cloud = make_cloud(rng.uniform([-0.5, -0.5, 1], [0.5, 0.5, 2.5], (n, 3)),
                           rng.uniform(0.05, 0.15, n), rng.random((n, 3)),
                           rng.uniform(0.2, 0.8, n))
        rgb_cut, alpha_cut = render_splats(cloud, CameraPose.identity(), K8, cutoff_sigmas=6.0)
        rgb_full, alpha_full = render_splats(cloud, CameraPose.identity(), K8, cutoff_sigmas=None)
        assert np.max(np.abs(rgb_cut - rgb_full)) < 1e-6
        assert np.max(np.abs(alpha_cut - alpha_full)) < 1e-6

    def test_determinism(self, rng):
        n = 25
        cloud = make_cloud(rng.uniform([-1, -1, 0.5], [1, 1, 3], (n, 3)),
                           rng.uniform(0.05, 0.3, n), rng.random((n, 3)),
                           rng.uniform(0.1, 0.99, n))
        a = render_splats(cloud, CameraPose.identity(), K8)
        b = render_splats(cloud, CameraPose.identity(), K8)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def three_splat_instance():
    positions = np.array([[0.05, -0.03, 1.0], [-0.08, 0.06, 1.5], [0.02, 0.01, 2.2]])
    return make_cloud(positions, [0.08, 0.12, 0.2],
                      [[0.8, 0.3, 0.2], [0.2, 0.7, 0.5], [0.4, 0.4, 0.9]],
                      [0.6, 0.5, 0.7])


def splat_loss(cloud_arrays, target, alpha_weight=0.0):
    """Photometric loss graph on an 8x8 view; returns (loss tensor, param tensors)."""
    params = [ad.parameter(a) for a in cloud_arrays]
    rendered = splat_render_op(params[0], params[1], params[2], params[3],
                               CameraPose.identity(), K8, cutoff_sigmas=None)
    rgb = ad.narrow(rendered, 2, 0, 3)
    diff = ad.sub(rgb, ad.constant(target))
    loss = ad.tmean(ad.mul(diff, diff))
    if alpha_weight:
        alpha = ad.narrow(rendered, 2, 3, 4)
        loss = ad.add(loss, ad.scale(ad.tmean(ad.mul(alpha, alpha)), alpha_weight))
    return loss, params


class TestRasterizerGradients:
    @pytest.mark.parametrize("pidx,tol", [(0, 1e-3), (1, 1e-3), (2, 1e-3), (3, 1e-3)])
    def test_photometric_gradients_vs_finite_differences(self, pidx, tol, rng):
        cloud = three_splat_instance()
        arrays = [cloud.positions.copy(), cloud.log_radii.copy(),
                  cloud.color_logits.copy(), cloud.opacity_logits.copy()]
        target = rng.random((8, 8, 3))

        loss, params = splat_loss(arrays, target)
        ad.backward(loss)
        analytic = params[pidx].grad.copy()

        h = 1e-4
        data = arrays[pidx]
        numeric = np.zeros_like(data)
        flat, nf = data.ravel(), numeric.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(splat_loss(arrays, target)[0].data)
            flat[i] = old - h
            fm = float(splat_loss(arrays, target)[0].data)
            flat[i] = old
            nf[i] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < tol

    def test_alpha_gradient_path(self, rng):
        cloud = three_splat_instance()
        arrays = [cloud.positions.copy(), cloud.log_radii.copy(),
                  cloud.color_logits.copy(), cloud.opacity_logits.copy()]
        target = rng.random((8, 8, 3))
        loss, params = splat_loss(arrays, target, alpha_weight=0.5)
        ad.backward(loss)
        analytic = params[3].grad.copy()
        h = 1e-4
        numeric = np.zeros_like(arrays[3])
        for i in range(arrays[3].size):
            old = arrays[3][i]
            arrays[3][i] = old + h
            fp = float(splat_loss(arrays, target, 0.5)[0].data)
            arrays[3][i] = old - h
            fm = float(splat_loss(arrays, target, 0.5)[0].data)
            arrays[3][i] = old
            numeric[i] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-3


class TestOptimizeCache:
    def test_single_splat_single_pixel_convex_fit(self):
        K1 = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5, width=1, height=1)
        cloud = make_cloud([[0.0, 0.0, 1.0]], [1.0], [[0.5, 0.5, 0.5]], [0.5])
        target = np.full((1, 1, 3), 0.7)
        frame = RgbdFrame(rgb=target, depth=np.ones((1, 1)),
                          pose=CameraPose.identity(), intrinsics=K1)
        cfg = CacheConfig(steps=500, learning_rate=0.05, cutoff_sigmas=None)
        out, trace = optimize_cache(cloud, [frame], cfg)
        rgb, _ = render_splats(out, CameraPose.identity(), K1, cutoff_sigmas=None)
        assert np.max(np.abs(rgb[0, 0] - 0.7)) < 1e-2
        assert trace[-1] < trace[0]

    def test_zero_steps_unchanged(self):
        cloud = three_splat_instance()
        out, trace = optimize_cache(cloud, [], CacheConfig(steps=0))
        assert out is cloud
        assert trace == []

    def test_loss_decreases_on_plane_scene(self):
        frame = plane_frame()
        cloud = init_cache([frame], CacheConfig(stride=1))
        cfg = CacheConfig(steps=40, learning_rate=1.6e-3)
        _, trace = optimize_cache(cloud, [frame], cfg)
        assert trace[-1] < trace[0]

    def test_determinism_bit_identical(self):
        frame = plane_frame()
        cfg = CacheConfig(steps=10, learning_rate=1.6e-3, stride=2)
        a, _ = optimize_cache(init_cache([frame], cfg), [frame], cfg)
        b, _ = optimize_cache(init_cache([frame], cfg), [frame], cfg)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.log_radii, b.log_radii)
        assert np.array_equal(a.color_logits, b.color_logits)
        assert np.array_equal(a.opacity_logits, b.opacity_logits)


class TestRenderPriors:
    def test_zero_opacity_all_masked(self):
        cloud = make_cloud([[0.0, 0.0, 1.5]], [0.3], [[0.5, 0.5, 0.5]], [1e-12])
        traj = Trajectory.from_lists([CameraPose.identity()], K8)
        chunk = render_priors(cloud, traj)
        assert chunk.masks.sum() == 0

    def test_dense_opaque_cloud_full_mask(self):
        frame = plane_frame()
        cloud = init_cache([frame])
        opaque = SplatCloud(cloud.positions, cloud.log_radii + 0.7,
                            cloud.color_logits, np.full(len(cloud), 8.0))
        traj = Trajectory.from_lists([CameraPose.identity()], K8)
        chunk = render_priors(opaque, traj, alpha_threshold=0.5)
        assert np.all(chunk.masks == 1.0)

    def test_threshold_monotonicity(self):
        frame = plane_frame()
        cloud = init_cache([frame], CacheConfig(stride=2))
        traj = Trajectory.from_lists([CameraPose.identity()], K8)
        low = render_priors(cloud, traj, alpha_threshold=0.2)
        high = render_priors(cloud, traj, alpha_threshold=0.7)
        assert np.all(low.masks >= high.masks)

    def test_masked_pixels_zero(self):
        cloud = make_cloud([[0.0, 0.0, 1.5]], [0.05], [[0.9, 0.9, 0.9]], [0.95])
        traj = Trajectory.from_lists([CameraPose.identity()], K8)
        chunk = render_priors(cloud, traj, alpha_threshold=0.5)
        assert np.all(chunk.warped[0][chunk.masks[0] == 0.0] == 0.0)

    def test_bad_threshold_rejected(self):
        cloud = three_splat_instance()
        traj = Trajectory.from_lists([CameraPose.identity()], K8)
        for thr in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                render_priors(cloud, traj, alpha_threshold=thr)


class TestSplatIO:
    def test_checkpoint_round_trip(self, tmp_path, rng):
        n = 9
        cloud = make_cloud(rng.uniform([-1, -1, 0.5], [1, 1, 3], (n, 3)),
                           rng.uniform(0.05, 0.3, n), rng.random((n, 3)),
                           rng.uniform(0.1, 0.9, n))
        cloud.save(tmp_path / "ckpt")
        loaded = SplatCloud.load(tmp_path / "ckpt")
        assert np.allclose(loaded.positions, cloud.positions, atol=1e-6)
        assert np.allclose(loaded.opacity_logits, cloud.opacity_logits, atol=1e-6)

"""Online 3D geometric cache: isotropic Gaussian splats fit to history frames.

Splats are initialized from lifted RGB-D pixels and photometrically optimized
with Adam; rendering composites depth-sorted Gaussian discs front to back.
The rasterizer registers on the autodiff tape with an analytic backward pass
(verified against finite differences), which is what makes the optimization
possible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .geometry import CameraIntrinsics, CameraPose, Trajectory
from .scene import RgbdFrame
from .warp import WarpedPriorChunk

_W_MAX = 1.0 - 1e-6  # compositing weights stay strictly below 1
_Z_NEAR = 1e-6


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-5, 1.0 - 1e-5)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class SplatCloud:
    """Isotropic splats: world positions, log radii, logistic colors and opacities."""

    positions: np.ndarray  # (N, 3)
    log_radii: np.ndarray  # (N,)
    color_logits: np.ndarray  # (N, 3); color = sigmoid(logit)
    opacity_logits: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.positions)
        if n < 1:
            raise ValueError("splat cloud must contain at least one splat")
        if self.log_radii.shape != (n,) or self.color_logits.shape != (n, 3) \
                or self.opacity_logits.shape != (n,):
            raise ValueError("splat parameter arrays must align")
        for arr in (self.positions, self.log_radii, self.color_logits, self.opacity_logits):
            if not np.all(np.isfinite(arr)):
                raise ValueError("splat parameters must be finite")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def radii(self) -> np.ndarray:
        return np.exp(self.log_radii)

    @property
    def colors(self) -> np.ndarray:
        return _sigmoid(self.color_logits)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    def save(self, path: str | Path) -> None:
        """Checkpoint: little-endian float32 arrays + JSON header."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = {"positions": self.positions, "log_radii": self.log_radii,
                  "color_logits": self.color_logits, "opacity_logits": self.opacity_logits}
        manifest = {}
        blob = bytearray()
        for name, arr in arrays.items():
            raw = arr.astype("<f4").tobytes()
            manifest[name] = {"shape": list(arr.shape), "offset": len(blob), "nbytes": len(raw)}
            blob.extend(raw)
        (path / "splats.bin").write_bytes(bytes(blob))
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SplatCloud":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "splats.bin").read_bytes()
        arrays = {}
        for name, meta in manifest.items():
            raw = blob[meta["offset"]:meta["offset"] + meta["nbytes"]]
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).astype(np.float64)
        return cls(**arrays)


@dataclass(frozen=True)
class CacheConfig:
    steps: int = 500
    learning_rate: float = 1.6e-3
    init_radius: float | None = None  # None: per-splat pixel footprint at its depth
    stride: int = 1
    cutoff_sigmas: float | None = 4.0  # rasterization footprint; None = full image

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def init_cache(history: list[RgbdFrame], cfg: CacheConfig | None = None) -> SplatCloud:
    """One splat per (strided) finite-depth pixel across all history frames."""
    cfg = cfg or CacheConfig()
    if not history:
        raise ValueError("history must be non-empty")
    positions, radii, colors = [], [], []
    for frame in history:
        K = frame.intrinsics
        depth = frame.depth[::cfg.stride, ::cfg.stride]
        rgb = frame.rgb[::cfg.stride, ::cfg.stride]
        rows, cols = np.nonzero(np.isfinite(depth))
        if rows.size == 0:
            continue
        u = cols * cfg.stride + 0.5
        v = rows * cfg.stride + 0.5
        z = depth[rows, cols]
        p_cam = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=1)
        positions.append(frame.pose.transform(p_cam))
        colors.append(rgb[rows, cols])
        if cfg.init_radius is not None:
            radii.append(np.full(rows.size, cfg.init_radius))
        else:
            f = 0.5 * (K.fx + K.fy)
            radii.append(0.75 * cfg.stride * z / f)
    if not positions:
        raise ValueError("no finite-depth pixels in history; cannot build a cache")
    return SplatCloud(
        positions=np.concatenate(positions),
        log_radii=np.log(np.concatenate(radii)),
        color_logits=_logit(np.concatenate(colors)),
        opacity_logits=np.zeros(sum(len(p) for p in positions)),
    )


def _rasterize_forward(positions, log_radii, color_logits, opacity_logits,
                       pose: CameraPose, K: CameraIntrinsics, cutoff_sigmas):
    """Shared forward pass; returns (rgb, alpha, saved-intermediates-for-backward)."""
    h, w = K.height, K.width
    rgb = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    n = len(positions)

    R = CameraPose(pose.quaternion, pose.translation).rotation_matrix()
    p_cam = (positions - pose.translation) @ R
    z = p_cam[:, 2]
    valid = z > _Z_NEAR
    if not np.any(valid):
        return rgb, alpha_map, None
    vid = np.flatnonzero(valid)
    x, y, zc = p_cam[vid, 0], p_cam[vid, 1], p_cam[vid, 2]
    u = K.fx * x / zc + K.cx
    v = K.fy * y / zc + K.cy
    f_mean = 0.5 * (K.fx + K.fy)
    radii = np.exp(log_radii[vid])
    sigma_px = radii * f_mean / zc
    col = _sigmoid(color_logits[vid])
    opa = _sigmoid(opacity_logits[vid])

    if cutoff_sigmas is None:
        cut = np.full(len(vid), float(max(h, w)) * 2.0)
    else:
        cut = cutoff_sigmas * sigma_px
    jmin = np.clip(np.ceil(u - 0.5 - cut), 0, w - 1).astype(np.int64)
    jmax = np.clip(np.floor(u - 0.5 + cut), 0, w - 1).astype(np.int64)
    imin = np.clip(np.ceil(v - 0.5 - cut), 0, h - 1).astype(np.int64)
    imax = np.clip(np.floor(v - 0.5 + cut), 0, h - 1).astype(np.int64)
    inside = (u + cut > 0.5) & (u - cut < w - 0.5) & (v + cut > 0.5) & (v - cut < h - 0.5)
    nx = np.where(inside, jmax - jmin + 1, 0)
    ny = np.where(inside, imax - imin + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return rgb, alpha_map, None

    sid = np.repeat(np.arange(len(vid)), counts)  # index into the valid subset
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    nx_rep = np.repeat(nx, counts)
    px = np.repeat(jmin, counts) + local % np.maximum(nx_rep, 1)
    py = np.repeat(imin, counts) + local // np.maximum(nx_rep, 1)

    dx = (px + 0.5) - u[sid]
    dy = (py + 0.5) - v[sid]
    s2 = sigma_px[sid] ** 2
    g = np.exp(-(dx * dx + dy * dy) / (2.0 * s2))
    w_raw = opa[sid] * g
    clamped = w_raw > _W_MAX
    wgt = np.where(clamped, _W_MAX, w_raw)

    # depth order rank per valid splat (ties by index, so lexsort stability suffices)
    rank = np.empty(len(vid), dtype=np.int64)
    rank[np.argsort(zc, kind="stable")] = np.arange(len(vid))
    pix = py * w + px
    order = np.lexsort((rank[sid], pix))

    sid_s = sid[order]
    pix_s = pix[order]
    w_s = wgt[order]

    seg_start = np.ones(total, dtype=bool)
    seg_start[1:] = pix_s[1:] != pix_s[:-1]
    start_idx = np.flatnonzero(seg_start)
    seg_id = np.cumsum(seg_start) - 1
    seg_len = np.diff(np.append(start_idx, total))

    log_one_minus = np.log1p(-w_s)
    cs = np.cumsum(log_one_minus)
    base = (cs[start_idx] - log_one_minus[start_idx])[seg_id]
    transmit = np.exp(cs - log_one_minus - base)  # exclusive prefix product of (1 - w)

    contrib = transmit * w_s
    np.add.at(rgb.reshape(-1, 3), pix_s, contrib[:, None] * col[sid_s])
    np.add.at(alpha_map.ravel(), pix_s, contrib)

    saved = {
        "vid": vid, "x": x, "y": y, "z": zc, "u": u, "v": v, "R": R,
        "sigma_px": sigma_px, "col": col, "opa": opa,
        "sid_s": sid_s, "pix_s": pix_s, "w_s": w_s, "transmit": transmit,
        "dx_s": dx[order], "dy_s": dy[order], "g_s": g[order],
        "clamped_s": clamped[order], "seg_id": seg_id, "start_idx": start_idx,
        "seg_len": seg_len, "n_total": n, "shape": (h, w),
    }
    return rgb, alpha_map, saved


def _rasterize_backward(saved, grad_rgb: np.ndarray, grad_alpha: np.ndarray,
                        K: CameraIntrinsics):
    """Analytic gradients of (rgb, alpha) w.r.t. all splat parameters."""
    n = saved["n_total"]
    d_pos = np.zeros((n, 3))
    d_logr = np.zeros(n)
    d_clog = np.zeros((n, 3))
    d_olog = np.zeros(n)
    if saved["sid_s"] is None:
        return d_pos, d_logr, d_clog, d_olog

    vid = saved["vid"]
    sid_s = saved["sid_s"]
    pix_s = saved["pix_s"]
    w_s = saved["w_s"]
    T_s = saved["transmit"]
    col = saved["col"]
    g_rgb = grad_rgb.reshape(-1, 3)[pix_s]
    g_alpha = grad_alpha.ravel()[pix_s]

    q = np.einsum("ec,ec->e", g_rgb, col[sid_s]) + g_alpha

    # color gradient: dL/dcol = T w grad_rgb
    d_col_v = np.zeros_like(col)
    np.add.at(d_col_v, sid_s, (T_s * w_s)[:, None] * g_rgb)

    # weight gradient: T q minus the discounted suffix it occludes
    u_term = T_s * w_s * q
    cs = np.cumsum(u_term)
    start_idx = saved["start_idx"]
    seg_id = saved["seg_id"]
    seg_total = np.add.reduceat(u_term, start_idx)
    suffix = seg_total[seg_id] - cs + (cs[start_idx] - u_term[start_idx])[seg_id]
    d_w = T_s * q - suffix / (1.0 - w_s)
    d_w[saved["clamped_s"]] = 0.0

    g_s = saved["g_s"]
    opa = saved["opa"]
    d_opa_v = np.zeros_like(opa)
    np.add.at(d_opa_v, sid_s, g_s * d_w)
    d_g = opa[sid_s] * d_w

    sigma = saved["sigma_px"]
    s2 = sigma[sid_s] ** 2
    dx_s, dy_s = saved["dx_s"], saved["dy_s"]
    d2 = dx_s * dx_s + dy_s * dy_s
    d_d2 = d_g * g_s * (-0.5 / s2)
    d_dx = d_d2 * 2.0 * dx_s
    d_dy = d_d2 * 2.0 * dy_s
    d_sigma_e = d_g * g_s * d2 / (sigma[sid_s] ** 3)

    d_u_v = np.zeros_like(sigma)
    d_v_v = np.zeros_like(sigma)
    d_sigma_v = np.zeros_like(sigma)
    np.add.at(d_u_v, sid_s, -d_dx)  # d(dx)/du = -1
    np.add.at(d_v_v, sid_s, -d_dy)
    np.add.at(d_sigma_v, sid_s, d_sigma_e)

    x, y, z = saved["x"], saved["y"], saved["z"]
    f_mean = 0.5 * (K.fx + K.fy)
    # sigma = exp(log_r) * f / z
    d_logr_v = d_sigma_v * sigma
    d_z_from_sigma = d_sigma_v * (-sigma / z)
    # u = fx x / z + cx, v = fy y / z + cy
    d_x = d_u_v * K.fx / z
    d_y = d_v_v * K.fy / z
    d_z = -d_u_v * K.fx * x / (z * z) - d_v_v * K.fy * y / (z * z) + d_z_from_sigma
    d_pcam = np.stack([d_x, d_y, d_z], axis=1)
    d_pos_v = d_pcam @ saved["R"].T

    d_pos[vid] = d_pos_v
    d_logr[vid] = d_logr_v
    d_clog[vid] = d_col_v * col * (1.0 - col)
    d_olog[vid] = d_opa_v * opa * (1.0 - opa)
    return d_pos, d_logr, d_clog, d_olog


def render_splats(cloud: SplatCloud, pose: CameraPose, K: CameraIntrinsics,
                  cutoff_sigmas: float | None = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Render to (rgb, alpha) with front-to-back Gaussian compositing (no tape)."""
    rgb, alpha_map, _ = _rasterize_forward(
        cloud.positions, cloud.log_radii, cloud.color_logits, cloud.opacity_logits,
        pose, K, cutoff_sigmas)
    return rgb, alpha_map


def splat_render_op(positions: ad.Tensor, log_radii: ad.Tensor, color_logits: ad.Tensor,
                    opacity_logits: ad.Tensor, pose: CameraPose, K: CameraIntrinsics,
                    cutoff_sigmas: float | None = 4.0) -> ad.Tensor:
    """Differentiable rasterization on the autodiff tape; output (h, w, 4) = rgb + alpha."""
    rgb, alpha_map, saved = _rasterize_forward(
        positions.data, log_radii.data, color_logits.data, opacity_logits.data,
        pose, K, cutoff_sigmas)
    packed = np.concatenate([rgb, alpha_map[..., None]], axis=2)

    def backward_fn(g):
        if saved is None:
            return None, None, None, None
        return _rasterize_backward(saved, g[..., :3], g[..., 3], K)

    return ad.custom_op((positions, log_radii, color_logits, opacity_logits),
                        packed, backward_fn)


def optimize_cache(cloud: SplatCloud, history: list[RgbdFrame],
                   cfg: CacheConfig) -> tuple[SplatCloud, list[float]]:
    """Photometric Adam fit of the splats against the history views.

    Returns the optimized cloud and the recorded loss trace (one entry per
    step, loss measured before the update).  Zero steps returns the input
    unchanged with an empty trace.
    """
    if cfg.steps == 0:
        return cloud, []
    params = {
        "positions": ad.parameter(cloud.positions.copy()),
        "log_radii": ad.parameter(cloud.log_radii.copy()),
        "color_logits": ad.parameter(cloud.color_logits.copy()),
        "opacity_logits": ad.parameter(cloud.opacity_logits.copy()),
    }
    opt = ad.Adam(list(params.values()), lr=cfg.learning_rate)
    trace: list[float] = []
    for step in range(cfg.steps):
        opt.zero_grad()
        loss = None
        for frame in history:
            rendered = splat_render_op(params["positions"], params["log_radii"],
                                       params["color_logits"], params["opacity_logits"],
                                       frame.pose, frame.intrinsics, cfg.cutoff_sigmas)
            rgb = ad.narrow(rendered, 2, 0, 3)
            diff = ad.sub(rgb, ad.constant(frame.rgb))
            view_loss = ad.tmean(ad.mul(diff, diff))
            loss = view_loss if loss is None else ad.add(loss, view_loss)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"cache optimization diverged at step {step}: loss={loss.data}")
        trace.append(float(loss.data))
        ad.backward(loss)
        opt.step()
    out = SplatCloud(positions=params["positions"].data,
                     log_radii=params["log_radii"].data,
                     color_logits=params["color_logits"].data,
                     opacity_logits=params["opacity_logits"].data)
    return out, trace


def render_priors(cloud: SplatCloud, targets: Trajectory, alpha_threshold: float = 0.5,
                  cutoff_sigmas: float | None = 4.0) -> WarpedPriorChunk:
    """Render warped priors for target views; mask = (alpha >= threshold)."""
    if not (0.0 < alpha_threshold < 1.0):
        raise ValueError("alpha threshold must lie strictly inside (0, 1)")
    warped, masks = [], []
    for pose, K in zip(targets.poses, targets.intrinsics):
        rgb, alpha_map = render_splats(cloud, pose, K, cutoff_sigmas)
        mask = (alpha_map >= alpha_threshold).astype(np.float64)
        warped.append(rgb * mask[..., None])
        masks.append(mask)
    return WarpedPriorChunk(np.stack(warped), np.stack(masks),
                            targets.poses, targets.intrinsics)

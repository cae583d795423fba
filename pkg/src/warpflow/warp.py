"""One-to-all forward warping.

A source RGB-D frame is lifted to a world-space RGB point cloud, then splatted
into every target viewpoint with a hard z-buffer.  Each point covers the
pixels whose centers lie within `radius_px` of its projection; the nearest
point wins per pixel, ties broken by lower point index for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, Trajectory, project_points
from .scene import RgbdFrame


@dataclass(frozen=True)
class RgbPointCloud:
    positions: np.ndarray  # (N, 3) world coordinates
    colors: np.ndarray  # (N, 3) in [0, 1]
    pixel_index: np.ndarray  # (N,) flattened source pixel per point

    def __post_init__(self):
        if len(self.positions) != len(self.colors) or len(self.positions) != len(self.pixel_index):
            raise ValueError("positions, colors and pixel indices must align")
        if len(self.positions) and not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class WarpedPriorChunk:
    """Warped prior images plus validity masks for a sequence of target views."""

    warped: np.ndarray  # (T, h, w, 3)
    masks: np.ndarray  # (T, h, w) in {0.0, 1.0}
    poses: tuple[CameraPose, ...]
    intrinsics: tuple[CameraIntrinsics, ...]

    def __post_init__(self):
        if self.warped.shape[0] < 1:
            raise ValueError("chunk must contain at least one frame")
        if self.warped.shape[:3] != self.masks.shape:
            raise ValueError("warped and mask shapes disagree")
        vals = np.unique(self.masks)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("masks must be binary")
        if np.any(self.warped[self.masks == 0.0] != 0.0):
            raise ValueError("pixels outside the mask must be exactly zero")

    def __len__(self) -> int:
        return self.warped.shape[0]


def lift(frame: RgbdFrame) -> RgbPointCloud:
    """Unproject every finite-depth pixel (at its center) into a world-space RGB point."""
    K = frame.intrinsics
    h, w = K.height, K.width
    finite = np.isfinite(frame.depth)
    idx = np.flatnonzero(finite.ravel())
    if idx.size == 0:
        return RgbPointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    rows, cols = np.divmod(idx, w)
    u = cols + 0.5
    v = rows + 0.5
    z = frame.depth.ravel()[idx]
    p_cam = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=1)
    positions = frame.pose.transform(p_cam)
    colors = frame.rgb.reshape(-1, 3)[idx]
    return RgbPointCloud(positions, colors, idx)


def splat_render(cloud: RgbPointCloud, pose: CameraPose, K: CameraIntrinsics,
                 radius_px: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Render the cloud into a view as z-buffered discs of radius `radius_px`.

    Returns (image (h, w, 3), mask (h, w)); mask is 1 where any point landed,
    and masked-out pixels are exactly zero.  Behind-camera and out-of-bounds
    points are skipped.
    """
    if radius_px < 0.5:
        raise ValueError("radius_px must be >= 0.5 so every point covers its own pixel")
    h, w = K.height, K.width
    image = np.zeros((h, w, 3))
    mask = np.zeros((h, w))
    if len(cloud) == 0:
        return image, mask

    uv, z = project_points(cloud.positions, pose, K)
    front = z > 0
    if not np.any(front):
        return image, mask
    uv = uv[front]
    z = z[front]
    colors = cloud.colors[front]
    order_id = np.flatnonzero(front)  # original point index, for deterministic ties

    # candidate pixel window per point: centers within radius_px (inclusive)
    jmin = np.ceil(uv[:, 0] - 0.5 - radius_px).astype(np.int64)
    imin = np.ceil(uv[:, 1] - 0.5 - radius_px).astype(np.int64)
    span = int(np.floor(2.0 * radius_px)) + 1

    offs = np.arange(span, dtype=np.int64)
    jj, ii = np.broadcast_arrays(jmin[:, None, None] + offs[None, None, :],
                                 imin[:, None, None] + offs[None, :, None])
    du = (jj + 0.5) - uv[:, 0, None, None]
    dv = (ii + 0.5) - uv[:, 1, None, None]
    inside = (du * du + dv * dv) <= radius_px * radius_px
    inside &= (jj >= 0) & (jj < w) & (ii >= 0) & (ii < h)

    pt, _, _ = np.nonzero(inside)
    if pt.size == 0:
        return image, mask
    flat_pix = (ii[inside] * w + jj[inside])
    depths = z[pt]
    ids = order_id[pt]

    # nearest point per pixel; ties by lower original point index
    order = np.lexsort((ids, depths, flat_pix))
    flat_sorted = flat_pix[order]
    first = np.ones(len(flat_sorted), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]

    image.reshape(-1, 3)[flat_pix[winners]] = colors[pt[winners]]
    mask.ravel()[flat_pix[winners]] = 1.0
    return image, mask


def one_to_all(source: RgbdFrame, targets: Trajectory, radius_px: float = 1.0) -> WarpedPriorChunk:
    """Warp one source frame into every target viewpoint (including its own, if present)."""
    cloud = lift(source)
    warped = []
    masks = []
    for pose, K in zip(targets.poses, targets.intrinsics):
        img, m = splat_render(cloud, pose, K, radius_px)
        warped.append(img)
        masks.append(m)
    return WarpedPriorChunk(np.stack(warped), np.stack(masks),
                            targets.poses, targets.intrinsics)


def downsample_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Majority-rule downsample: cell is valid iff >= half its patch pixels are valid."""
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} must divide mask dims {h}x{w}")
    blocks = mask.reshape(h // patch, patch, w // patch, patch)
    frac = blocks.mean(axis=(1, 3))
    return (frac >= 0.5).astype(np.float64)


def downsample_masks(masks: np.ndarray, patch: int) -> np.ndarray:
    """Per-frame majority downsample of a (T, h, w) mask stack."""
    return np.stack([downsample_mask(m, patch) for m in masks])

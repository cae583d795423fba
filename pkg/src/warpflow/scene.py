"""Procedural synthetic worlds with exact ground-truth RGB, depth and poses.

Surfaces are textured rectangles; ray casting against them gives per-pixel
exact depth (camera-frame z), which makes these scenes the oracle for every
warping test downstream.  Background pixels carry depth = +inf.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, CameraPose, Trajectory, quat_from_axis_angle

BACKGROUND_DEPTH = np.inf

_HIT_EPS = 1e-12


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1). splitmix64-style mixing; wraps mod 2^64."""
    seed_term = np.uint64((seed * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             + iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
             + seed_term)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Smooth value noise in [0, 1] over lattice coordinates (x, y)."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = _smoothstep(x - x0)
    ty = _smoothstep(y - y0)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    return (v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty)
            + v01 * (1 - tx) * ty + v11 * tx * ty)


@dataclass(frozen=True)
class Surface:
    """Textured rectangle: center, orthonormal tangent frame, half extents."""

    center: tuple[float, float, float]
    tangent_u: tuple[float, float, float]
    tangent_v: tuple[float, float, float]
    half_u: float
    half_v: float
    texture_seed: int

    def __post_init__(self):
        if self.half_u <= 0 or self.half_v <= 0:
            raise ValueError("surface extents must be positive")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.tangent_u, self.tangent_v)

    def texture(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Color at local coordinates (u, v); smooth noise gradients + faint checker.

        Pure function of (surface, u, v), so warped and re-rendered views of
        the same world point agree exactly.
        """
        su = (u / self.half_u + 1.0) * 2.0  # ~4 noise cells across the surface
        sv = (v / self.half_v + 1.0) * 2.0
        channels = [0.25 + 0.6 * _value_noise(su, sv, self.texture_seed * 3 + c)
                    for c in range(3)]
        rgb = np.stack(channels, axis=-1)
        # smooth cosine checker: structured detail with no aliasing traps
        checker = 0.08 * np.cos(np.pi * 2.0 * su) * np.cos(np.pi * 2.0 * sv)
        rgb = rgb + checker[..., None]
        return np.clip(rgb, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "center": list(self.center), "tangent_u": list(self.tangent_u),
            "tangent_v": list(self.tangent_v), "half_u": self.half_u,
            "half_v": self.half_v, "texture_seed": self.texture_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Surface":
        return cls(center=tuple(d["center"]), tangent_u=tuple(d["tangent_u"]),
                   tangent_v=tuple(d["tangent_v"]), half_u=d["half_u"],
                   half_v=d["half_v"], texture_seed=d["texture_seed"])


@dataclass(frozen=True)
class SyntheticScene:
    surfaces: tuple[Surface, ...]
    background: tuple[float, float, float]
    seed: int

    def __post_init__(self):
        if len(self.surfaces) == 0:
            raise ValueError("scene needs at least one surface")

    def transformed(self, pose: CameraPose) -> "SyntheticScene":
        """Rigidly move every surface by the given transform (for equivariance tests)."""
        R = pose.rotation_matrix()
        moved = tuple(
            Surface(
                center=tuple(R @ np.array(s.center) + pose.translation),
                tangent_u=tuple(R @ np.array(s.tangent_u)),
                tangent_v=tuple(R @ np.array(s.tangent_v)),
                half_u=s.half_u, half_v=s.half_v, texture_seed=s.texture_seed,
            )
            for s in self.surfaces
        )
        return SyntheticScene(moved, self.background, self.seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "background": list(self.background),
                "surfaces": [s.to_dict() for s in self.surfaces]}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(surfaces=tuple(Surface.from_dict(s) for s in d["surfaces"]),
                   background=tuple(d["background"]), seed=d["seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RgbdFrame:
    """Ground-truth color + depth at a camera; depth is camera-frame z, +inf on background."""

    rgb: np.ndarray  # (h, w, 3) in [0, 1]
    depth: np.ndarray  # (h, w) > 0 or +inf
    pose: CameraPose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth shapes disagree")
        finite = np.isfinite(self.depth)
        if np.any(self.depth[finite] <= 0):
            raise ValueError("finite depth values must be positive")


def generate_scene(seed: int, complexity: int) -> SyntheticScene:
    """Deterministic room-scale scene with `complexity` surfaces.

    Surface 0 is a large backdrop facing the origin; the rest are smaller
    panels scattered in front of it, some fronto-parallel, some side-on.
    """
    if complexity < 1:
        raise ValueError("complexity must be >= 1")
    rng = np.random.default_rng(seed)
    background = tuple(0.04 + 0.08 * rng.random(3))
    surfaces = [Surface(center=(0.0, 0.0, 2.2),
                        tangent_u=(1.0, 0.0, 0.0), tangent_v=(0.0, 1.0, 0.0),
                        half_u=1.6, half_v=1.6,
                        texture_seed=int(rng.integers(1, 2**31)))]
    for _ in range(complexity - 1):
        kind = rng.integers(0, 3)
        cx = float(rng.uniform(-0.55, 0.55))
        cy = float(rng.uniform(-0.45, 0.45))
        cz = float(rng.uniform(1.0, 1.9))
        hu = float(rng.uniform(0.12, 0.38))
        hv = float(rng.uniform(0.12, 0.38))
        tseed = int(rng.integers(1, 2**31))
        if kind == 0:  # fronto-parallel panel
            s = Surface((cx, cy, cz), (1, 0, 0), (0, 1, 0), hu, hv, tseed)
        elif kind == 1:  # side wall segment
            s = Surface((cx, cy, cz), (0, 0, 1), (0, 1, 0), hu, hv, tseed)
        else:  # floor/ceiling segment
            s = Surface((cx, cy, cz), (1, 0, 0), (0, 0, 1), hu, hv, tseed)
        surfaces.append(s)
    return SyntheticScene(tuple(surfaces), background, seed)


def render_gt(scene: SyntheticScene, pose: CameraPose, K: CameraIntrinsics) -> RgbdFrame:
    """Ray-cast every pixel center against every surface; keep the nearest hit.

    Camera rays use the unnormalized direction K^-1 [u, v, 1] so the ray
    parameter t equals camera-frame z exactly.
    """
    h, w = K.height, K.width
    u = np.arange(w, dtype=np.float64) + 0.5
    v = np.arange(h, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v, indexing="xy")
    d_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    R = pose.rotation_matrix()
    d_world = d_cam @ R.T
    origin = pose.translation

    best_t = np.full((h, w), BACKGROUND_DEPTH)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (h, w, 3)).copy()

    for surf in scene.surfaces:
        n = surf.normal
        denom = d_world @ n
        center = np.asarray(surf.center, dtype=np.float64)
        numer = float((center - origin) @ n)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = numer / denom
        hit = np.isfinite(t) & (t > _HIT_EPS)
        if not np.any(hit):
            continue
        p = origin + t[..., None] * d_world
        rel = p - center
        lu = rel @ np.asarray(surf.tangent_u, dtype=np.float64)
        lv = rel @ np.asarray(surf.tangent_v, dtype=np.float64)
        hit &= (np.abs(lu) <= surf.half_u) & (np.abs(lv) <= surf.half_v)
        hit &= t < best_t
        if not np.any(hit):
            continue
        best_t[hit] = t[hit]
        rgb[hit] = surf.texture(lu[hit], lv[hit])

    return RgbdFrame(rgb=rgb, depth=best_t, pose=pose, intrinsics=K)


def surface_coverage(frame: RgbdFrame) -> float:
    """Fraction of pixels that hit a surface."""
    return float(np.mean(np.isfinite(frame.depth)))


def sample_trajectory(scene: SyntheticScene, kind: str, length: int,
                      seed: int, intrinsics: CameraIntrinsics | None = None) -> Trajectory:
    """Smooth deterministic camera path of the requested kind.

    All kinds start near the origin looking down +z into the scene, which
    keeps first-frame surface coverage high by construction.
    """
    if length < 2:
        raise ValueError("trajectory length must be >= 2")
    if kind not in ("dolly", "orbit", "lateral", "mixed"):
        raise ValueError(f"unknown trajectory kind {kind!r}")
    rng = np.random.default_rng(seed)
    if intrinsics is None:
        intrinsics = CameraIntrinsics(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)

    start_t = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), -0.15])
    identity_q = np.array([1.0, 0.0, 0.0, 0.0])
    poses: list[CameraPose] = []

    if kind == "dolly":
        step = rng.uniform(0.02, 0.04)
        for i in range(length):
            poses.append(CameraPose(identity_q, start_t + [0, 0, step * i]))
    elif kind == "lateral":
        step = rng.uniform(0.015, 0.03) * rng.choice([-1.0, 1.0])
        for i in range(length):
            poses.append(CameraPose(identity_q, start_t + [step * i, 0, 0]))
    elif kind == "orbit":
        pivot = np.array([0.0, 0.0, 1.6])
        radius = np.linalg.norm(start_t - pivot)
        per_frame = 2.0 * np.pi / length
        for i in range(length):
            angle = per_frame * i
            q = quat_from_axis_angle([0, 1, 0], angle)
            R = CameraPose(q, np.zeros(3)).rotation_matrix()
            poses.append(CameraPose(q, pivot + R @ (start_t - pivot)))
    else:  # mixed: dolly + drift + slow yaw
        dz = rng.uniform(0.015, 0.03)
        dx = rng.uniform(-0.015, 0.015)
        yaw = rng.uniform(-0.01, 0.01)
        for i in range(length):
            q = quat_from_axis_angle([0, 1, 0], yaw * i)
            poses.append(CameraPose(q, start_t + [dx * i, 0, dz * i]))
    return Trajectory.from_lists(poses, intrinsics)


def save_frame(frame: RgbdFrame, directory: str | Path, prefix: str) -> None:
    """PNG for color plus raw little-endian float32 depth with a JSON header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray((np.clip(frame.rgb, 0, 1) * 255.0).round().astype(np.uint8))
    img.save(directory / f"{prefix}.png")
    frame.depth.astype("<f4").tofile(directory / f"{prefix}.depth.raw")
    header = {
        "width": frame.intrinsics.width, "height": frame.intrinsics.height,
        "depth_dtype": "<f4", "pose": frame.pose.to_dict(),
        "intrinsics": frame.intrinsics.to_dict(),
    }
    (directory / f"{prefix}.json").write_text(json.dumps(header, indent=1))


def load_frame(directory: str | Path, prefix: str) -> RgbdFrame:
    directory = Path(directory)
    header = json.loads((directory / f"{prefix}.json").read_text())
    K = CameraIntrinsics.from_dict(header["intrinsics"])
    pose = CameraPose.from_dict(header["pose"])
    rgb = np.asarray(Image.open(directory / f"{prefix}.png"), dtype=np.float64) / 255.0
    depth = np.fromfile(directory / f"{prefix}.depth.raw", dtype="<f4")
    depth = depth.reshape(K.height, K.width).astype(np.float64)
    return RgbdFrame(rgb=rgb, depth=depth, pose=pose, intrinsics=K)

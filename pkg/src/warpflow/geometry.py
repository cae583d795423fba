"""Pinhole cameras, SE(3) pose algebra, SLERP, trajectory extrapolation, and ray maps.

Conventions fixed here and relied on everywhere else:
  - poses are camera-to-world: p_world = R @ p_cam + t
  - quaternions are (w, x, y, z), unit norm
  - pixel (row i, col j) has its center at (u, v) = (j + 0.5, i + 0.5)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_UNIT_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        q = np.array([0.25 / s,
                      (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    return q


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_axis_angle(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Unit quaternion to (axis, angle), angle in [0, pi]."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        q = -q
    vec = q[1:]
    s = np.linalg.norm(vec)
    angle = 2.0 * np.arctan2(s, q[0])
    if s < 1e-12:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return vec / s, angle


def quat_angle(q0: np.ndarray, q1: np.ndarray) -> float:
    """Rotation angle between the two orientations, in [0, pi]."""
    _, angle = quat_to_axis_angle(quat_multiply(quat_conjugate(q0), q1))
    return angle


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Spherical linear interpolation along the shortest arc.

    q1 is negated when dot(q0, q1) < 0 so the short path is taken.  Nearly
    antipodal pairs (|dot| < 1e-6 after the sign fix) and nearly identical
    pairs fall back to normalized linear interpolation.
    """
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot < 1e-6 or dot > 1.0 - 1e-12:
        return quat_normalize((1.0 - t) * q0 + t * q1)
    theta = np.arccos(min(dot, 1.0))
    sin_theta = np.sin(theta)
    w0 = np.sin((1.0 - t) * theta) / sin_theta
    w1 = np.sin(t * theta) / sin_theta
    return quat_normalize(w0 * q0 + w1 * q1)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for the same camera at a resolution scaled by `factor`."""
        return CameraIntrinsics(
            fx=self.fx * factor, fy=self.fy * factor,
            cx=self.cx * factor, cy=self.cy * factor,
            width=int(round(self.width * factor)), height=int(round(self.height * factor)),
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=d["width"], height=d["height"])


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform: p_world = R @ p_cam + t."""

    quaternion: np.ndarray  # (w, x, y, z), unit norm
    translation: np.ndarray  # camera center in world coordinates

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).copy()
        t = np.asarray(self.translation, dtype=np.float64).copy()
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("quaternion must be (4,), translation (3,)")
        if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)} deviates from 1")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "CameraPose":
        return cls(quat_from_axis_angle(np.asarray(axis, dtype=np.float64), angle),
                   np.asarray(translation, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Apply to camera-frame point(s): (3,) or (N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation

    def inverse_transform(self, p: np.ndarray) -> np.ndarray:
        """World point(s) into this camera's frame."""
        p = np.asarray(p, dtype=np.float64)
        return (p - self.translation) @ self.rotation_matrix()

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self ∘ other: apply `other` first, then `self`."""
        q = quat_normalize(quat_multiply(self.quaternion, other.quaternion))
        t = self.transform(other.translation)
        return CameraPose(q, t)

    def inverse(self) -> "CameraPose":
        q = quat_conjugate(self.quaternion)
        return CameraPose(q, -(quat_to_matrix(q) @ self.translation))

    def to_dict(self) -> dict:
        return {"quaternion": self.quaternion.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["quaternion"], dtype=np.float64),
                   np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Trajectory:
    """Ordered camera path: one (pose, intrinsics) per frame."""

    poses: tuple[CameraPose, ...]
    intrinsics: tuple[CameraIntrinsics, ...]
    frames: tuple[int, ...]

    def __post_init__(self):
        if len(self.poses) == 0:
            raise ValueError("trajectory must be non-empty")
        if not (len(self.poses) == len(self.intrinsics) == len(self.frames)):
            raise ValueError("poses, intrinsics and frame indices must align")
        w, h = self.intrinsics[0].width, self.intrinsics[0].height
        for k in self.intrinsics:
            if (k.width, k.height) != (w, h):
                raise ValueError("all intrinsics in a trajectory must share width/height")

    @classmethod
    def from_lists(cls, poses, intrinsics, frames=None) -> "Trajectory":
        poses = tuple(poses)
        if isinstance(intrinsics, CameraIntrinsics):
            intrinsics = tuple(intrinsics for _ in poses)
        else:
            intrinsics = tuple(intrinsics)
        if frames is None:
            frames = tuple(range(len(poses)))
        return cls(poses=poses, intrinsics=intrinsics, frames=tuple(frames))

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i: int) -> tuple[CameraPose, CameraIntrinsics]:
        return self.poses[i], self.intrinsics[i]

    def tail(self, n: int) -> "Trajectory":
        n = min(n, len(self))
        return Trajectory(self.poses[-n:], self.intrinsics[-n:], self.frames[-n:])

    def extended(self, poses, intrinsics, frames) -> "Trajectory":
        return Trajectory(self.poses + tuple(poses),
                          self.intrinsics + tuple(intrinsics),
                          self.frames + tuple(frames))

    def to_json(self) -> list[dict]:
        return [{"frame": f, **p.to_dict(), "intrinsics": k.to_dict()}
                for f, p, k in zip(self.frames, self.poses, self.intrinsics)]

    @classmethod
    def from_json(cls, entries: list[dict]) -> "Trajectory":
        poses, intrinsics, frames = [], [], []
        for e in entries:
            frames.append(int(e["frame"]))
            poses.append(CameraPose.from_dict(e))
            intrinsics.append(CameraIntrinsics.from_dict(e["intrinsics"]))
        return cls(tuple(poses), tuple(intrinsics), tuple(frames))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PluckerMap:
    """Per-pixel 6D rays: channels [0:3] direction d, [3:6] moment o × d."""

    values: np.ndarray  # (h, w, 6)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 6:
            raise ValueError("ray map must be (h, w, 6)")
        object.__setattr__(self, "values", v)

    @property
    def directions(self) -> np.ndarray:
        return self.values[..., :3]

    @property
    def moments(self) -> np.ndarray:
        return self.values[..., 3:]


def unproject(uv, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinate `uv` at `depth` into the camera frame: depth * K^-1 [u, v, 1]."""
    u, v = float(uv[0]), float(uv[1])
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    if not (0 <= u < K.width) or not (0 <= v < K.height):
        raise ValueError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    return depth * np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])


def to_world(p_cam: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Camera-frame point into world coordinates."""
    return pose.transform(np.asarray(p_cam, dtype=np.float64))


def project(p_world: np.ndarray, pose: CameraPose, K: CameraIntrinsics):
    """World point to (uv, depth); None when the point is at or behind the camera plane."""
    p_cam = pose.inverse_transform(np.asarray(p_world, dtype=np.float64))
    z = p_cam[2]
    if z <= 0:
        return None
    uv = np.array([K.fx * p_cam[0] / z + K.cx, K.fy * p_cam[1] / z + K.cy])
    return uv, float(z)


def project_points(points: np.ndarray, pose: CameraPose, K: CameraIntrinsics):
    """Batched projection. Returns (uv (N,2), z (N,)); callers mask z <= 0 themselves."""
    p_cam = pose.inverse_transform(points)
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p_cam[:, 0] / z + K.cx
        v = K.fy * p_cam[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def pixel_centers(K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) center coordinates of every pixel, each (h, w)."""
    u = np.arange(K.width, dtype=np.float64) + 0.5
    v = np.arange(K.height, dtype=np.float64) + 0.5
    return np.meshgrid(u, v, indexing="xy")


def extrapolate_trajectory(history: Trajectory, count: int, window: int = 20) -> Trajectory:
    """Continue a camera path at constant estimated velocity.

    Translation advances by the mean per-frame delta over the last `window`
    frames; rotation advances by the SLERP-chained average of the last
    `window` relative rotations, applied repeatedly.  Intrinsics are copied
    from the last frame.
    """
    if len(history) < 2:
        raise ValueError("need at least 2 frames of history to extrapolate")
    if window < 1:
        raise ValueError("window must be >= 1")
    n_rel = min(window, len(history) - 1)
    recent = history.poses[-(n_rel + 1):]

    deltas = [recent[i + 1].translation - recent[i].translation for i in range(n_rel)]
    velocity = np.mean(deltas, axis=0)

    rels = [quat_normalize(quat_multiply(quat_conjugate(recent[i].quaternion),
                                         recent[i + 1].quaternion))
            for i in range(n_rel)]
    mean_rel = rels[0]
    for i, r in enumerate(rels[1:], start=2):
        mean_rel = slerp(mean_rel, r, 1.0 / i)

    poses = []
    q = history.poses[-1].quaternion
    t = history.poses[-1].translation
    for _ in range(count):
        q = quat_normalize(quat_multiply(q, mean_rel))
        t = t + velocity
        poses.append(CameraPose(q, t))
    last_k = history.intrinsics[-1]
    last_f = history.frames[-1]
    return history.extended(poses, [last_k] * count,
                            [last_f + 1 + i for i in range(count)])


def plucker_map(pose: CameraPose, K: CameraIntrinsics) -> PluckerMap:
    """World-frame ray per pixel center: unit direction d and moment m = o × d."""
    u, v = pixel_centers(K)
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ pose.rotation_matrix().T
    origin = pose.translation
    m = np.cross(np.broadcast_to(origin, d_world.shape), d_world)
    return PluckerMap(np.concatenate([d_world, m], axis=-1))

"""Session-oriented HTTP facade over chunked generation.

JSON over HTTP under /v1.  Sessions live in process memory; frames are
exposed as opaque refs resolving to PNG bytes.  One step may be in flight
per session at a time (409 on concurrent steps); camera commands compose
with trajectory extrapolation to produce the next chunk's target poses.
"""

from __future__ import annotations

import io
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel

from .cache import CacheConfig
from .geometry import CameraIntrinsics, CameraPose, Trajectory, quat_from_axis_angle, quat_multiply, quat_normalize
from .infer import (GenerationSession, InferenceConfig, _continue_poses, create_session,
                    history_token_count, step_chunk)
from .scene import generate_scene, sample_trajectory
from .schedule import InferenceNoiseConfig

CAMERA_COMMANDS = ("forward", "back", "left", "right", "yaw+", "yaw-",
                   "pitch+", "pitch-", "orbit")

_TRANSLATION_COMMANDS = {
    "forward": np.array([0.0, 0.0, 1.0]),
    "back": np.array([0.0, 0.0, -1.0]),
    "left": np.array([-1.0, 0.0, 0.0]),
    "right": np.array([1.0, 0.0, 0.0]),
}
_ROTATION_COMMANDS = {
    "yaw+": (np.array([0.0, 1.0, 0.0]), 1.0),
    "yaw-": (np.array([0.0, 1.0, 0.0]), -1.0),
    "pitch+": (np.array([1.0, 0.0, 0.0]), 1.0),
    "pitch-": (np.array([1.0, 0.0, 0.0]), -1.0),
}


class CreateSessionRequest(BaseModel):
    scene_seed: int = 0
    complexity: int = 4
    image_size: int = 32
    focal: float = 40.0
    chunk_len: int = 8
    overlap: int = 2
    solver_steps: int = 50
    tau: float = 0.8
    cache_mode: str = "splats"
    cache_steps: int = 100
    cache_stride: int = 2
    seed: int = 0


class StepRequest(BaseModel):
    command: str | None = None
    magnitude: float = 0.0
    poses: list[dict] | None = None


@dataclass
class SessionRecord:
    session: GenerationSession
    lock: threading.Lock = field(default_factory=threading.Lock)
    frame_refs: list[str] = field(default_factory=list)


def _command_poses(session: GenerationSession, command: str, magnitude: float) -> Trajectory:
    """Extrapolated continuation with per-frame command increments layered on."""
    cfg = session.config
    new_count = cfg.chunk_len - history_token_count(session)
    base = _continue_poses(session.history_traj, new_count,
                           cfg.extrapolation_window).tail(new_count)
    if magnitude == 0.0:
        return base
    per_frame = magnitude / new_count
    poses = []
    for i, (pose, K) in enumerate(zip(base.poses, base.intrinsics)):
        amount = per_frame * (i + 1)
        if command in _TRANSLATION_COMMANDS:
            step_cam = _TRANSLATION_COMMANDS[command] * amount
            poses.append(CameraPose(pose.quaternion,
                                    pose.translation + pose.rotation_matrix() @ step_cam))
        elif command in _ROTATION_COMMANDS:
            axis, sign = _ROTATION_COMMANDS[command]
            q = quat_multiply(pose.quaternion, quat_from_axis_angle(axis, sign * amount))
            poses.append(CameraPose(quat_normalize(q), pose.translation))
        else:  # orbit: yaw while swinging laterally around the view center
            q = quat_multiply(pose.quaternion, quat_from_axis_angle([0, 1, 0], amount))
            offset = pose.rotation_matrix() @ (np.array([-1.0, 0.0, 0.0]) * amount)
            poses.append(CameraPose(quat_normalize(q), pose.translation + offset))
    return Trajectory(tuple(poses), base.intrinsics, base.frames)


def create_app(model, max_magnitude: float = 1.0) -> FastAPI:
    """Build the service; `model` is a DenoiserState or a velocity callable."""
    app = FastAPI(title="warpflow service", version="1")
    sessions: dict[str, SessionRecord] = {}
    frames: dict[str, bytes] = {}
    app.state.sessions = sessions
    app.state.frames = frames

    def register_frames(record: SessionRecord, rgb_frames: list[np.ndarray]) -> list[str]:
        refs = []
        for frame in rgb_frames:
            ref = uuid.uuid4().hex
            arr = (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)
            buf = io.BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            frames[ref] = buf.getvalue()
            refs.append(ref)
        record.frame_refs.extend(refs)
        return refs

    @app.post("/v1/sessions")
    def create(req: CreateSessionRequest):
        if req.cache_mode not in ("splats", "pointcloud", "none", "oracle"):
            return JSONResponse({"error": f"unknown cache mode {req.cache_mode!r}"},
                                status_code=400)
        scene = generate_scene(req.scene_seed, req.complexity)
        half = req.image_size / 2
        K = CameraIntrinsics(fx=req.focal, fy=req.focal, cx=half, cy=half,
                             width=req.image_size, height=req.image_size)
        initial = sample_trajectory(scene, "dolly", 2, seed=req.seed, intrinsics=K)
        cfg = InferenceConfig(
            chunk_len=req.chunk_len, overlap=req.overlap,
            noise=InferenceNoiseConfig(tau=req.tau, steps=req.solver_steps),
            cache=CacheConfig(steps=req.cache_steps, stride=req.cache_stride),
            cache_mode=req.cache_mode,
            constrain_first_chunk=True)  # sessions continue seamlessly from the seeds
        session = create_session(scene, initial, model, cfg, seed=req.seed)
        record = SessionRecord(session=session)
        session_id = uuid.uuid4().hex
        sessions[session_id] = record
        refs = register_frames(record, session.history_rgb)
        return {"session_id": session_id, "initial_frames": refs,
                "chunk_len": cfg.chunk_len, "overlap": cfg.overlap}

    @app.get("/v1/sessions/{session_id}")
    def get_state(session_id: str):
        record = sessions.get(session_id)
        if record is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        session = record.session
        pose, _ = session.history_traj[len(session.history_traj) - 1]
        return {"history_length": len(session.history_rgb),
                "chunk_counter": session.chunk_counter,
                "current_pose": pose.to_dict(),
                "frame_refs": record.frame_refs}

    @app.post("/v1/sessions/{session_id}/step")
    def step(session_id: str, req: StepRequest):
        record = sessions.get(session_id)
        if record is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        if req.poses is None:
            if req.command not in CAMERA_COMMANDS:
                return JSONResponse({"error": f"unknown command {req.command!r}; "
                                              f"expected one of {CAMERA_COMMANDS}"},
                                    status_code=400)
            if abs(req.magnitude) > max_magnitude:
                return JSONResponse({"error": f"magnitude {req.magnitude} exceeds "
                                              f"bound {max_magnitude}"}, status_code=400)
        if not record.lock.acquire(blocking=False):
            return JSONResponse({"error": "a step is already in flight"}, status_code=409)
        try:
            session = record.session
            if req.poses is not None:
                K = session.history_traj.intrinsics[-1]
                last_frame = session.history_traj.frames[-1]
                try:
                    poses = [CameraPose.from_dict(p) for p in req.poses]
                except (KeyError, ValueError) as err:
                    return JSONResponse({"error": f"bad pose list: {err}"}, status_code=400)
                targets = Trajectory(tuple(poses), tuple(K for _ in poses),
                                     tuple(last_frame + 1 + i for i in range(len(poses))))
            else:
                targets = _command_poses(session, req.command, req.magnitude)
            try:
                new_frames, diag = step_chunk(session, targets)
            except ValueError as err:
                return JSONResponse({"error": str(err)}, status_code=400)
            refs = register_frames(record, new_frames)
            mask_refs = register_frames(record, [np.repeat(m[:, :, None], 3, axis=2)
                                                 for m in diag.priors.masks])
            prior_refs = register_frames(record, list(diag.priors.warped))
            return {"frame_refs": refs, "mask_refs": mask_refs, "prior_refs": prior_refs,
                    "schedule": {"values": diag.matrix.values.tolist(),
                                 "roles": list(diag.matrix.roles)},
                    "poses": [p.to_dict() for p in diag.poses],
                    "pure_noise": diag.pure_noise,
                    "history_length": len(session.history_rgb)}
        finally:
            record.lock.release()

    @app.get("/v1/frames/{ref}")
    def get_frame(ref: str):
        data = frames.get(ref)
        if data is None:
            return JSONResponse({"error": "unknown frame ref"}, status_code=404)
        return Response(content=data, media_type="image/png")

    return app

"""Velocity-prediction network over latent chunks with per-token noise conditioning.

A small bidirectional convolutional network: per-frame spatial convs
interleaved with frame mixing (full-width temporal matrix or frame-axis
attention), so every token sees every frame.  Conditioning enters by channel
concatenation: [noisy latent, warped latent, mask, ray map, noise embedding].
The output head is zero-initialized so training starts at "predict nothing".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .latent import LatentChunk
from .schedule import SigmaMap, sigma_embedding

FRAME_MIX_KINDS = ("temporal_conv", "attention")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 48  # 3 * patch^2
    base_channels: int = 32
    depth: int = 2
    frame_mixing: str = "temporal_conv"
    sigma_embed_dim: int = 8
    patch: int = 4
    chunk_len: int = 8
    attention_dim: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.frame_mixing not in FRAME_MIX_KINDS:
            raise ValueError(f"frame_mixing must be one of {FRAME_MIX_KINDS}")
        if self.sigma_embed_dim % 2:
            raise ValueError("sigma embedding dim must be even")
        if self.latent_channels != 3 * self.patch * self.patch:
            raise ValueError("latent_channels must equal 3*patch^2")

    @property
    def cond_channels(self) -> int:
        # noisy latent + warped latent + residual ratio + mask + 6 ray channels
        # + sigma embedding
        return 3 * self.latent_channels + 1 + 6 + self.sigma_embed_dim


@dataclass
class DenoiserState:
    config: DenoiserConfig
    params: dict[str, ad.Tensor]
    step: int = 0

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def save(self, path: str | Path) -> None:
        """Checkpoint: little-endian float32 blob + JSON manifest."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {"config": self.config.__dict__, "step": self.step, "tensors": {}}
        blob = bytearray()
        for name in sorted(self.params):
            arr = self.params[name].data
            raw = arr.astype("<f4").tobytes()
            manifest["tensors"][name] = {"shape": list(arr.shape),
                                         "offset": len(blob), "nbytes": len(raw)}
            blob.extend(raw)
        (path / "params.bin").write_bytes(bytes(blob))
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DenoiserState":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
        cfg = DenoiserConfig(**manifest["config"])
        params = {}
        for name, meta in manifest["tensors"].items():
            raw = blob[meta["offset"]:meta["offset"] + meta["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).astype(np.float64)
            params[name] = ad.parameter(arr)
        return cls(config=cfg, params=params, step=manifest["step"])


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> DenoiserState:
    rng = np.random.default_rng(seed)
    c_in, b = config.cond_channels, config.base_channels
    params: dict[str, ad.Tensor] = {
        "stem.w": ad.parameter(_he(rng, (b, c_in, 3, 3), c_in * 9)),
        "stem.b": ad.parameter(np.zeros(b)),
    }
    for d in range(config.depth):
        params[f"block{d}.conv.w"] = ad.parameter(_he(rng, (b, b, 3, 3), b * 9))
        params[f"block{d}.conv.b"] = ad.parameter(np.zeros(b))
        # zero-init FiLM from per-frame region noise summaries: identity at init
        params[f"block{d}.film.w"] = ad.parameter(
            np.zeros((2 * config.sigma_embed_dim, 2 * b)))
        params[f"block{d}.film.b"] = ad.parameter(np.zeros(2 * b))
        if config.frame_mixing == "temporal_conv":
            t = config.chunk_len
            params[f"block{d}.mix.w"] = ad.parameter(_he(rng, (t, t), t))
        else:
            dk = config.attention_dim
            params[f"block{d}.attn.q"] = ad.parameter(_he(rng, (b, dk), b))
            params[f"block{d}.attn.k"] = ad.parameter(_he(rng, (b, dk), b))
            params[f"block{d}.attn.v"] = ad.parameter(_he(rng, (b, dk), b))
            params[f"block{d}.attn.o"] = ad.parameter(_he(rng, (dk, b), dk))
    # zero-init head: the untrained network predicts exactly nothing; the
    # gate opens a direct path from the residual-ratio channels to the output
    params["head.w"] = ad.parameter(np.zeros((config.latent_channels, b, 3, 3)))
    params["head.b"] = ad.parameter(np.zeros(config.latent_channels))
    params["head.gate"] = ad.parameter(np.zeros(config.latent_channels))
    return DenoiserState(config=config, params=params)


def _conv_bias(x: ad.Tensor, w: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    y = ad.conv2d(x, w)
    t, c, hh, ww = y.shape
    b4 = ad.reshape(bias, (1, c, 1, 1))
    return ad.add(y, ad.expand(b4, (t, c, hh, ww)))


def _mix_temporal(x: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
    """Full-width frame mixing: a learned (T x T) matrix over the frame axis."""
    t, c, hh, ww = x.shape
    flat = ad.reshape(ad.transpose(x, (1, 2, 3, 0)), (c * hh * ww, t))
    mixed = ad.matmul(flat, w)
    return ad.transpose(ad.reshape(mixed, (c, hh, ww, t)), (3, 0, 1, 2))


def _mix_attention(x: ad.Tensor, q_w: ad.Tensor, k_w: ad.Tensor, v_w: ad.Tensor,
                   o_w: ad.Tensor, dk: int) -> ad.Tensor:
    """Frame-axis attention at each spatial location (permutation-equivariant)."""
    t, c, hh, ww = x.shape
    tokens = ad.reshape(ad.transpose(x, (2, 3, 0, 1)), (hh * ww, t, c))
    q = ad.matmul(tokens, q_w)
    k = ad.matmul(tokens, k_w)
    v = ad.matmul(tokens, v_w)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
    attn = ad.softmax(scores)
    out = ad.matmul(ad.matmul(attn, v), o_w)  # (hw, t, c)
    return ad.transpose(ad.reshape(out, (hh, ww, t, c)), (2, 3, 0, 1))


def assemble_input(config: DenoiserConfig, z_noisy: np.ndarray, sigma: SigmaMap,
                   mask: np.ndarray, z_warp: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Stack conditioning channels: (T, cond_channels, h', w').

    Besides the raw inputs, the net gets the residual ratio
    (z_noisy - z_warp) / max(sigma, eps): on valid warped regions this is the
    velocity up to the warp error, which the conv stack only needs to gate
    and correct rather than derive.
    """
    t, c, hh, ww = z_noisy.shape
    if z_warp.shape != z_noisy.shape:
        raise ValueError("warped latent must match noisy latent shape")
    if mask.shape != (t, hh, ww):
        raise ValueError(f"mask shape {mask.shape} != {(t, hh, ww)}")
    if rays.shape != (t, 6, hh, ww):
        raise ValueError(f"ray map shape {rays.shape} != {(t, 6, hh, ww)}")
    if sigma.shape != (t, hh, ww):
        raise ValueError("sigma map shape mismatch")
    emb = sigma_embedding(sigma, config.sigma_embed_dim)
    safe_sigma = np.maximum(sigma.values, 1e-3)[:, None, :, :]
    ratio = (z_noisy - z_warp) / safe_sigma * mask[:, None, :, :]
    return np.concatenate([z_noisy, z_warp, ratio, mask[:, None], rays, emb], axis=1)


def region_sigma_summary(config: DenoiserConfig, sigma: SigmaMap,
                         mask: np.ndarray) -> np.ndarray:
    """Per-frame global noise descriptor: embedded (valid-region, blank-region) means.

    This is the frame-level counterpart of the per-pixel embedding: it exposes
    the chunk's noise *structure* (which frames are clean, how far apart the
    warped and blank levels sit) to frame-wide modulation.
    """
    t = sigma.shape[0]
    valid_area = mask.sum(axis=(1, 2))
    blank_area = (1.0 - mask).sum(axis=(1, 2))
    s_valid = np.where(valid_area > 0,
                       (sigma.values * mask).sum(axis=(1, 2)) / np.maximum(valid_area, 1),
                       0.0)
    s_blank = np.where(blank_area > 0,
                       (sigma.values * (1.0 - mask)).sum(axis=(1, 2)) / np.maximum(blank_area, 1),
                       s_valid)
    parts = []
    for s in (s_valid, s_blank):
        emb = sigma_embedding(SigmaMap(s[:, None, None]), config.sigma_embed_dim)
        parts.append(emb[:, :, 0, 0])
    return np.concatenate(parts, axis=1)  # (T, 2 * sigma_embed_dim)


def _film(h: ad.Tensor, summary: ad.Tensor, w: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """Frame-wise feature modulation: h * (1 + scale_t) + shift_t."""
    t, c, hh, ww = h.shape
    params = ad.add(ad.matmul(summary, w),
                    ad.expand(ad.reshape(bias, (1, 2 * c)), (t, 2 * c)))
    scale = ad.expand(ad.reshape(ad.narrow(params, 1, 0, c), (t, c, 1, 1)), (t, c, hh, ww))
    shift = ad.expand(ad.reshape(ad.narrow(params, 1, c, 2 * c), (t, c, 1, 1)), (t, c, hh, ww))
    return ad.add(ad.add(h, ad.mul(h, scale)), shift)


def forward(state: DenoiserState, z_noisy: np.ndarray, sigma: SigmaMap,
            mask: np.ndarray, z_warp: np.ndarray, rays: np.ndarray) -> ad.Tensor:
    """Predicted velocity chunk, same shape as z_noisy; builds an autodiff graph."""
    cfg = state.config
    t = z_noisy.shape[0]
    if t != cfg.chunk_len:
        raise ValueError(f"chunk length {t} != configured {cfg.chunk_len}")
    if z_noisy.shape[1] != cfg.latent_channels:
        raise ValueError("latent channel mismatch")
    x = ad.constant(assemble_input(cfg, z_noisy, sigma, mask, z_warp, rays))
    summary = ad.constant(region_sigma_summary(cfg, sigma, mask))
    p = state.params
    h = ad.silu(_conv_bias(x, p["stem.w"], p["stem.b"]))
    for d in range(cfg.depth):
        y = ad.silu(_conv_bias(h, p[f"block{d}.conv.w"], p[f"block{d}.conv.b"]))
        y = _film(y, summary, p[f"block{d}.film.w"], p[f"block{d}.film.b"])
        if cfg.frame_mixing == "temporal_conv":
            y = _mix_temporal(y, p[f"block{d}.mix.w"])
        else:
            y = _mix_attention(y, p[f"block{d}.attn.q"], p[f"block{d}.attn.k"],
                               p[f"block{d}.attn.v"], p[f"block{d}.attn.o"],
                               cfg.attention_dim)
        h = ad.add(h, ad.silu(y))
    out = _conv_bias(h, p["head.w"], p["head.b"])
    c = cfg.latent_channels
    t, _, hh, ww = out.shape
    ratio = ad.narrow(x, 1, 2 * c, 3 * c)
    # x5 scale acts as a learning-rate multiplier so the gate opens quickly
    gate = ad.scale(ad.expand(ad.reshape(p["head.gate"], (1, c, 1, 1)), (t, c, hh, ww)), 5.0)
    return ad.add(out, ad.mul(gate, ratio))


def velocity_target(z_gt: LatentChunk, eps: np.ndarray) -> np.ndarray:
    """Training target ε − z, entrywise against the ground-truth latents."""
    if eps.shape != z_gt.shape:
        raise ValueError("noise and latent shapes disagree")
    return eps - z_gt.values


def loss(state: DenoiserState, batch: list[dict]) -> ad.Tensor:
    """Mean over the batch of Σ_t ||v_θ,t − (ε_t − z_t)||².

    Each batch item is a dict with keys: z_gt (LatentChunk), z_noisy (array),
    sigma (SigmaMap), mask, z_warp, rays, eps.
    """
    if not batch:
        raise ValueError("empty batch")
    total = None
    for item in batch:
        v = forward(state, item["z_noisy"], item["sigma"], item["mask"],
                    item["z_warp"], item["rays"])
        target = ad.constant(velocity_target(item["z_gt"], item["eps"]))
        d = ad.sub(v, target)
        sq = ad.tsum(ad.mul(d, d))
        total = sq if total is None else ad.add(total, sq)
    out = ad.scale(total, 1.0 / len(batch))
    if not np.isfinite(out.data):
        raise RuntimeError(f"non-finite denoiser loss: {out.data}")
    return out

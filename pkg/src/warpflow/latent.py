"""Lossless latent codec and composite construction.

The codec is an exact space-to-depth patchify: every s x s x 3 image patch
becomes one latent pixel with 3*s^2 channels.  Being lossless and linear, it
keeps every compositing identity bit-testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROVENANCE_TAGS = ("ground-truth", "warped", "composite", "noisy")


@dataclass(frozen=True)
class LatentChunk:
    values: np.ndarray  # (T, c, h', w') with c = 3 * patch^2
    patch: int
    tag: str = "ground-truth"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError("latent values must be (T, c, h', w')")
        if v.shape[1] != 3 * self.patch * self.patch:
            raise ValueError(f"channel count {v.shape[1]} != 3*{self.patch}^2")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent values must be finite")
        if self.tag not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance tag {self.tag!r}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def with_values(self, values: np.ndarray, tag: str | None = None) -> "LatentChunk":
        return LatentChunk(values, self.patch, tag or self.tag)


def encode(images: np.ndarray, patch: int = 4, tag: str = "ground-truth") -> LatentChunk:
    """(T, h, w, 3) images -> (T, 3*patch^2, h/patch, w/patch) latents, losslessly."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError("images must be (T, h, w, 3)")
    T, h, w, _ = images.shape
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} must divide image dims {h}x{w}")
    hp, wp = h // patch, w // patch
    x = images.reshape(T, hp, patch, wp, patch, 3)
    x = x.transpose(0, 2, 4, 5, 1, 3)  # (T, py, px, rgb, h', w')
    return LatentChunk(x.reshape(T, 3 * patch * patch, hp, wp), patch, tag)


def decode(latent: LatentChunk) -> np.ndarray:
    """Exact inverse of encode."""
    T, c, hp, wp = latent.values.shape
    s = latent.patch
    x = latent.values.reshape(T, s, s, 3, hp, wp)
    x = x.transpose(0, 4, 1, 5, 2, 3)  # (T, h', py, w', px, rgb)
    return x.reshape(T, hp * s, wp * s, 3)


def composite(z_warp: LatentChunk, z_gt: LatentChunk, m_latent: np.ndarray) -> LatentChunk:
    """Per token: m ⊙ z_warp + (1 - m) ⊙ z_gt, mask broadcast over channels."""
    if z_warp.shape != z_gt.shape or z_warp.patch != z_gt.patch:
        raise ValueError("latent chunks must have matching shapes")
    T, _, hp, wp = z_warp.shape
    m_latent = np.asarray(m_latent, dtype=np.float64)
    if m_latent.shape != (T, hp, wp):
        raise ValueError(f"mask shape {m_latent.shape} != {(T, hp, wp)}")
    m = m_latent[:, None, :, :]
    return LatentChunk(m * z_warp.values + (1.0 - m) * z_gt.values, z_warp.patch, "composite")

"""Spatially and temporally varying noise levels.

Training draws an independent (sigma_warped, sigma_filled) pair per frame and
mixes them through the latent mask; inference starts warped regions at the
strength tau and blank regions at full noise, with history tokens pinned to
zero.  The per-token evolution over the reverse solver follows
min(global ladder, initial level): plateau first, then join the descent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .latent import LatentChunk

ROLE_HISTORY = "history"
ROLE_WARPED = "warped"
ROLE_BLANK = "blank"


@dataclass(frozen=True)
class SigmaMap:
    """Per-token noise level in [0, 1] over a chunk: (T, h', w')."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("sigma map must be (T, h', w')")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("sigma values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class InferenceNoiseConfig:
    tau: float = 0.8  # start noise for warped regions
    steps: int = 50  # reverse solver steps
    sigma_max: float = 1.0  # start noise for blank regions

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("need at least one solver step")


@dataclass(frozen=True)
class ScheduleMatrix:
    """sigma per (token row, solver step column), columns from step N down to 0."""

    values: np.ndarray  # (T, N + 1)
    roles: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.roles):
            raise ValueError("matrix rows must match role labels")
        if np.any(np.diff(v, axis=1) > 1e-15):
            raise ValueError("each row must be non-increasing")
        for t, role in enumerate(self.roles):
            if role == ROLE_HISTORY and np.any(v[t] != 0.0):
                raise ValueError("history rows must be identically zero")
        object.__setattr__(self, "values", v)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        n = self.values.shape[1] - 1
        writer.writerow(["token", "role"] + [f"k={k}" for k in range(n, -1, -1)])
        for t, role in enumerate(self.roles):
            writer.writerow([t, role] + [repr(float(x)) for x in self.values[t]])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def save_heatmap(self, path: str | Path) -> None:
        """Render the matrix as a (token x step) heatmap image."""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 3))
        im = ax.imshow(self.values, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0,
                       interpolation="nearest")
        ax.set_xlabel("solver step (high noise -> clean)")
        ax.set_ylabel("token")
        ax.set_yticks(range(len(self.roles)))
        ax.set_yticklabels([f"{t}:{r}" for t, r in enumerate(self.roles)], fontsize=6)
        fig.colorbar(im, ax=ax, label="sigma")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def sample_training_pair(rng: np.random.Generator) -> tuple[float, float]:
    """Independent Uniform[0,1] noise levels for (warped, filled) regions of one frame."""
    return float(rng.uniform()), float(rng.uniform())


def build_sigma_map(m_latent: np.ndarray, sigma_warped: np.ndarray,
                    sigma_filled: np.ndarray) -> SigmaMap:
    """Mix per-frame region levels through the latent mask: m⊙σ_w + (1−m)⊙σ_f."""
    m_latent = np.asarray(m_latent, dtype=np.float64)
    sigma_warped = np.atleast_1d(np.asarray(sigma_warped, dtype=np.float64))
    sigma_filled = np.atleast_1d(np.asarray(sigma_filled, dtype=np.float64))
    T = m_latent.shape[0]
    if sigma_warped.shape != (T,) or sigma_filled.shape != (T,):
        raise ValueError("need one (sigma_warped, sigma_filled) pair per frame")
    for s in (sigma_warped, sigma_filled):
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise ValueError("noise levels must lie in [0, 1]")
    sw = sigma_warped[:, None, None]
    sf = sigma_filled[:, None, None]
    return SigmaMap(m_latent * sw + (1.0 - m_latent) * sf)


def apply_noise(z: LatentChunk, sigma: SigmaMap, eps: np.ndarray) -> LatentChunk:
    """Noisy latents (1 − Σ)⊙z + Σ⊙ε, with Σ broadcast over channels."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z.shape}")
    T, _, hp, wp = z.shape
    if sigma.shape != (T, hp, wp):
        raise ValueError(f"sigma shape {sigma.shape} incompatible with latent {z.shape}")
    s = sigma.values[:, None, :, :]
    return z.with_values((1.0 - s) * z.values + s * eps, tag="noisy")


def build_start_map(m_latent: np.ndarray, cfg: InferenceNoiseConfig,
                    history_token_count: int) -> SigmaMap:
    """Start noise for the reverse solver.

    History tokens are pinned at 0 (hard constraint); in generated tokens,
    warped regions start at tau and blank regions at sigma_max.
    """
    m_latent = np.asarray(m_latent, dtype=np.float64)
    T = m_latent.shape[0]
    if history_token_count >= T:
        raise ValueError("history must leave at least one generated token")
    values = m_latent * cfg.tau + (1.0 - m_latent) * cfg.sigma_max
    values[:history_token_count] = 0.0
    return SigmaMap(values)


def sigma_at_step(start: SigmaMap, cfg: InferenceNoiseConfig, k: int) -> np.ndarray:
    """Pointwise noise level at solver step k: min(k/N, start). k = N..0."""
    if not (0 <= k <= cfg.steps):
        raise ValueError(f"step {k} outside 0..{cfg.steps}")
    return np.minimum(k / cfg.steps, start.values)


def summarize_start_map(start: SigmaMap, m_latent: np.ndarray,
                        history_token_count: int) -> tuple[np.ndarray, tuple[str, ...]]:
    """Collapse a start map to one (sigma_init, role) per token for the schedule matrix.

    A generated token is labelled by its dominant content: warped when any
    region is valid (summarized at the warped plateau level), blank otherwise.
    """
    m_latent = np.asarray(m_latent, dtype=np.float64)
    T = start.shape[0]
    sigma_init = np.zeros(T)
    roles = []
    for t in range(T):
        if t < history_token_count:
            roles.append(ROLE_HISTORY)
        elif np.any(m_latent[t] > 0.0):
            roles.append(ROLE_WARPED)
            sigma_init[t] = float(np.min(start.values[t]))
        else:
            roles.append(ROLE_BLANK)
            sigma_init[t] = float(np.max(start.values[t]))
    return sigma_init, tuple(roles)


def schedule_matrix(sigma_init: np.ndarray, roles: tuple[str, ...],
                    cfg: InferenceNoiseConfig) -> ScheduleMatrix:
    """Full (token x step) evolution: row t at step k is min(k/N, sigma_init[t])."""
    sigma_init = np.asarray(sigma_init, dtype=np.float64)
    n = cfg.steps
    ladder = np.arange(n, -1, -1, dtype=np.float64) / n  # 1.0 ... 0.0
    values = np.minimum(ladder[None, :], sigma_init[:, None])
    values[[r == ROLE_HISTORY for r in roles], :] = 0.0
    return ScheduleMatrix(values, tuple(roles))


def sigma_embedding(sigma: SigmaMap, dim: int) -> np.ndarray:
    """Sinusoidal features of sigma*1000 per latent pixel: (T, dim, h', w').

    Half the channels are sines, half cosines, over a geometric frequency
    ladder; sigma = 0 maps to the fixed zero-phase vector.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    exponents = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    freqs = (1.0 / 10000.0) ** exponents  # 1.0 down to 1e-4
    angle = sigma.values[:, None, :, :] * 1000.0 * freqs[None, :, None, None]
    return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)

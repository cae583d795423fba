"""Forward-warp priors, flow-matching generation with per-token noise, and an online splat cache."""

__version__ = "0.1.0"

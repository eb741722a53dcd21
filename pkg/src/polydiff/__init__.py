"""Trajectory diffusion with policy-guided sampling for two-player
polynomial games: games, transforms, diffusion core, guidance, offline
best-response learning, experiment pipeline, and analysis utilities."""

__version__ = "0.1.0"

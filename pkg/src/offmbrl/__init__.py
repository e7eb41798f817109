"""Offline model-based RL toolkit: latent-planning agents, a temporally
abstract manager/worker hierarchy, and desk-scale benchmark tasks."""

__version__ = "0.1.0"

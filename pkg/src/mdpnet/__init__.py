"""Multiscale diffusion autoencoder with graph-attention latent dynamics for gridded PDE data."""

from .training import MDPNet, ModelConfig, TrainConfig, rollout

__all__ = ["MDPNet", "ModelConfig", "TrainConfig", "rollout"]
__version__ = "0.1.0"

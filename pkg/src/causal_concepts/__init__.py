"""Concept-latent causal interpretability on a toy multimodal classifier."""

__version__ = "0.1.0"

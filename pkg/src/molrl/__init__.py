"""Desk-scale dual-objective continual training (cross-entropy on environment
feedback, KL-to-reference on model decisions) followed by group-relative RL
post-training against a sandboxed mini-language environment."""

__version__ = "0.1.0"

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]

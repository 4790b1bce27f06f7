"""Self-supervised image relighting via latent intrinsics and a low-dimensional lighting code."""

__version__ = "0.1.0"

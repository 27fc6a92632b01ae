"""Multimodal sMRI + FNC classification with latent feature fusion and LDM augmentation."""

__version__ = "0.1.0"

"""Odor source localization on a 2D advection-diffusion-decay grid."""
__version__ = "0.1.0"

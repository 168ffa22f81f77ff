"""Denoise audio in the latent space of a frozen codec with a 1-D U-Net.

Everything, including reverse-mode autodiff, runs on numpy.
"""

__version__ = "0.1.0"

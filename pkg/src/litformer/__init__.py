"""LIT-Former: joint in-plane denoising and through-plane deblurring of CT volumes."""

__version__ = "0.1.0"

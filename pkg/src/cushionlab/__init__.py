"""Desk-scale laboratory for prefix caches that suppress activation outliers
under post-training quantization."""

__version__ = "0.1.0"

"""Sketch-guided, mask-free image segmentation across photo galleries."""

__version__ = "0.1.0"

"""Occlusion-robust transformer for edge-heatmap generation, on a small numpy autodiff."""

__version__ = "0.1.0"

"""Attentive 1D heatmap regression for landmark detection and tracking."""

__version__ = "0.1.0"

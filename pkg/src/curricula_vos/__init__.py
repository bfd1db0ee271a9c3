"""Curriculum learning for one-shot video object segmentation at desk scale."""

__version__ = "0.1.0"

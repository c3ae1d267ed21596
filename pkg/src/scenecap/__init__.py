"""Depth-aware scene-text captioning over file-based feature fixtures."""

__version__ = "0.1.0"

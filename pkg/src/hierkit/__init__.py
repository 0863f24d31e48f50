"""Tooling for unified scene-text detection and layout analysis."""

__version__ = "0.1.0"

"""Semantic part completion for partial voxel scans."""
__version__ = "0.1.0"

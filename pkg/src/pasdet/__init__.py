"""Depth-range-aware volume rendering with a jointly trained 3D box detector,
exercised on synthetic box scenes."""

__version__ = "0.1.0"

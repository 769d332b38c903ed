"""Directional TSDF fusion, view-dependent combination, raycast rendering,
and frame-to-model ICP tracking on the CPU."""

__version__ = "0.1.0"

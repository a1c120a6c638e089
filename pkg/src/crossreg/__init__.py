"""Learned local 3D descriptors for cross-source point cloud registration."""

__version__ = "0.1.0"

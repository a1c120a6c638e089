"""Truncated distance function grids for local patches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, bounding_sphere

DEFAULT_DIM = 16
DEFAULT_TRUNCATION = 3.0


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """``values[i, j, k]`` is the TDF sampled at ``origin + (i, j, k) * voxel_size``.

    Values run from 1 on the surface to 0 at and beyond the truncation distance.
    """

    values: np.ndarray
    origin: np.ndarray
    voxel_size: float
    truncation: float

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def voxel_centers(dim: int) -> np.ndarray:
    """Sample positions in voxel units relative to the patch centre, shape (dim**3, 3).

    Index ``dim // 2`` sits exactly on the centre for every ``dim``; for even
    ``dim`` the lattice therefore reaches half a voxel further on the low side.
    """
    ax = np.arange(dim, dtype=np.float64) - dim // 2
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def voxelize_tdf(region, dim: int = DEFAULT_DIM, truncation: float = DEFAULT_TRUNCATION) -> VoxelGrid:
    """TDF grid of a patch whose containing sphere is inscribed in the grid.

    The patch is recentred on its centroid and scaled by its containing-sphere
    radius, so the grid is unchanged by translating or uniformly scaling the
    patch. ``truncation`` is measured in voxels.
    """
    pts = np.asarray(getattr(region, "points", region), dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("cannot voxelize an empty region")
    if dim < 4:
        raise ValueError("grid dim must be at least 4")
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    sphere = bounding_sphere(pts)
    radius = sphere.radius
    if radius > 0:
        voxel_size = 2.0 * radius / dim
        local = (pts - sphere.center) / voxel_size
    else:
        voxel_size = 1.0
        local = np.zeros_like(pts)
    # distances are computed in voxel units; d_world / (trunc * vs) == d_vox / trunc
    d, _ = cKDTree(local).query(voxel_centers(dim), k=1, distance_upper_bound=truncation)
    values = 1.0 - np.minimum(d / truncation, 1.0)
    origin = sphere.center - (dim // 2) * voxel_size
    return VoxelGrid(values.reshape(dim, dim, dim), origin, voxel_size, truncation)


def save_grid(grid: VoxelGrid, path):
    """ASCII dump: header lines, then dim**3 values with x varying fastest."""
    lines = [f"dim {grid.dim}", f"voxel_size {grid.voxel_size!r}",
             "origin " + " ".join(repr(float(v)) for v in grid.origin),
             f"truncation {grid.truncation!r}"]
    # values is indexed [x, y, z]; transpose so that C-order flattening runs x fastest
    flat = grid.values.transpose(2, 1, 0).reshape(-1)
    lines.extend(repr(float(v)) for v in flat)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_grid(path) -> VoxelGrid:
    lines = Path(path).read_text(encoding="ascii").split("\n")
    head = {}
    for line in lines[:4]:
        key, _, rest = line.partition(" ")
        head[key] = rest
    dim = int(head["dim"])
    flat = np.array([float(v) for v in lines[4:4 + dim ** 3]])
    if len(flat) != dim ** 3:
        raise ValueError(f"grid file {path} holds {len(flat)} values, expected {dim ** 3}")
    values = flat.reshape(dim, dim, dim).transpose(2, 1, 0)
    origin = np.array([float(v) for v in head["origin"].split()])
    return VoxelGrid(np.ascontiguousarray(values), origin, float(head["voxel_size"]),
                     float(head["truncation"]))


def pair_grids(pairs, dim: int = DEFAULT_DIM, truncation: float = DEFAULT_TRUNCATION,
               dtype=np.float32):
    """Stacked A grids, B grids and a positive mask for a list of training pairs."""
    ga = np.empty((len(pairs), dim, dim, dim), dtype=dtype)
    gb = np.empty_like(ga)
    for i, p in enumerate(pairs):
        ga[i] = voxelize_tdf(p.region_a, dim, truncation).values
        gb[i] = voxelize_tdf(p.region_b, dim, truncation).values
    return ga, gb, np.array([p.positive for p in pairs], dtype=bool)

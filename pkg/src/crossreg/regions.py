"""Per-point features, region growing and training-pair sampling."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from .geometry import (GeometryError, PointCloud, SpatialIndex, bounding_sphere, load_cloud,
                       rotation_about_axis, save_cloud)

MIN_REGION_POINTS = 51


class SamplingShortfall(UserWarning):
    pass


def point_features(cloud: PointCloud, k: int = 10, return_degenerate: bool = False):
    """Fill normals and curvature from the covariance of each point's k-neighbourhood.

    The neighbourhood is the point itself plus its ``k`` nearest neighbours.
    The normal is the eigenvector of the smallest eigenvalue, flipped into the
    +z hemisphere; curvature is ``l0 / (l0 + l1 + l2)``. Neighbourhoods whose
    points all coincide get curvature 0 and normal +z and are reported in the
    optional degenerate mask.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(cloud) < k + 1:
        raise GeometryError(f"need at least {k + 1} points for k={k}, got {len(cloud)}")
    pts = cloud.points
    idx, _ = SpatialIndex(cloud).knn(pts, k + 1)
    nbh = pts[idx]
    centered = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    normals = evecs[:, :, 0].copy()
    total = evals.sum(axis=1)
    degenerate = total <= 1e-30
    curvature = np.divide(evals[:, 0], total, out=np.zeros(len(pts)), where=~degenerate)

    # canonical sign: +z first, then +y, then +x for normals lying in the xy-plane
    eps = 1e-12
    key = np.where(np.abs(normals[:, 2]) > eps, normals[:, 2],
                   np.where(np.abs(normals[:, 1]) > eps, normals[:, 1], normals[:, 0]))
    normals[key < 0] *= -1
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = PointCloud(pts, normals, curvature)
    return (out, degenerate) if return_degenerate else out


def knn_graph(cloud: PointCloud, k: int = 10) -> np.ndarray:
    """Neighbour lists (without the point itself), shape (n, min(k, n-1))."""
    k = min(k, len(cloud) - 1)
    if k <= 0:
        return np.zeros((len(cloud), 0), dtype=np.int64)
    idx, _ = SpatialIndex(cloud).knn(cloud.points, k + 1)
    return idx[:, 1:]


def feature_distance(cloud: PointCloud, i, j, w_curvature=1.0, w_angle=1.0):
    """Weighted Euclidean distance over (curvature, unoriented normal angle)."""
    dc = cloud.curvature[j] - cloud.curvature[i]
    cos = np.abs(np.sum(cloud.normals[j] * cloud.normals[i], axis=-1))
    ang = np.arccos(np.clip(cos, 0.0, 1.0))
    return np.sqrt((w_curvature * dc) ** 2 + (w_angle * ang) ** 2)


@dataclass(frozen=True, eq=False)
class Region:
    ids: np.ndarray
    points: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray
    center: np.ndarray
    radius: float
    source: str = ""

    def __len__(self):
        return len(self.ids)

    @property
    def box_center(self) -> np.ndarray:
        return (self.box_min + self.box_max) / 2

    @classmethod
    def from_points(cls, ids, points, box_min=None, box_max=None, source=""):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise GeometryError("a region needs at least one member")
        sphere = bounding_sphere(points)
        return cls(
            np.asarray(ids, dtype=np.int64), points,
            points.min(axis=0) if box_min is None else np.asarray(box_min, dtype=np.float64),
            points.max(axis=0) if box_max is None else np.asarray(box_max, dtype=np.float64),
            sphere.center, sphere.radius, source,
        )


def grow_region(cloud: PointCloud, seed: int, threshold: float, graph=None, k: int = 10,
                w_curvature: float = 1.0, w_angle: float = 1.0, max_radius: float | None = None,
                source: str = "") -> Region:
    """Breadth-first growth over the k-NN graph.

    A neighbour joins when its feature distance to the *seed* is within
    ``threshold``; the region always contains the seed. Because admission
    only looks at the seed, the region is the set of admissible points
    reachable from the seed along k-NN edges. ``max_radius`` optionally
    bounds growth to a ball around the seed.
    """
    if cloud.normals is None or cloud.curvature is None:
        raise GeometryError("grow_region needs normals and curvature; run point_features first")
    if graph is None:
        graph = knn_graph(cloud, k)
    n = len(cloud)
    admissible = feature_distance(cloud, seed, np.arange(n), w_curvature, w_angle) <= threshold
    if max_radius is not None:
        admissible &= np.sum((cloud.points - cloud.points[seed]) ** 2, axis=1) <= max_radius ** 2
    admissible[seed] = True
    src = np.repeat(np.arange(n), graph.shape[1])
    dst = graph.reshape(-1)
    keep = admissible[src] & admissible[dst]
    adj = csr_matrix((np.ones(int(keep.sum()), dtype=np.int8), (src[keep], dst[keep])), shape=(n, n))
    ids = np.sort(breadth_first_order(adj, seed, directed=True, return_predecessors=False))
    return Region.from_points(ids, cloud.points[ids], source=source)


def crop_box(cloud: PointCloud, box_min, box_max, source="") -> Region | None:
    """Points of ``cloud`` inside the closed box; ``None`` when it is empty.

    The region keeps the query box as its containing box.
    """
    inside = np.all((cloud.points >= box_min) & (cloud.points <= box_max), axis=1)
    ids = np.nonzero(inside)[0]
    if len(ids) == 0:
        return None
    return Region.from_points(ids, cloud.points[ids], box_min, box_max, source)


@dataclass(frozen=True, eq=False)
class TrainingPair:
    region_a: Region
    region_b: Region
    label: str  # "positive" | "negative"
    angle_deg: float | None = None

    @property
    def positive(self) -> bool:
        return self.label == "positive"


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 10
    t_min: float = 0.05
    t_max: float = 0.5
    w_curvature: float = 1.0
    w_angle: float = 1.0
    # growth ball radius, as a fraction of the pc1 containing-sphere radius
    radius_min: float = 0.08
    radius_max: float = 0.18
    min_points: int = MIN_REGION_POINTS
    negative_retries: int = 100
    max_candidates: int = 200_000


def _negative_for(pos_a: Region, pc2: PointCloud, pc2_radius: float, rng, cfg: SamplerConfig):
    r = pos_a.radius
    lo, hi = 3.0 * r, pc2_radius
    if lo > hi:
        return None
    half = (pos_a.box_max - pos_a.box_min) / 2
    for _ in range(cfg.negative_retries):
        dist = rng.uniform(lo, hi)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        center = pos_a.box_center + dist * d
        crop = crop_box(pc2, center - half, center + half, source="pc2")
        if crop is not None:
            return crop
    return None


def sample_pairs(pc1: PointCloud, pc2: PointCloud, n_pos: int, n_neg: int, seed: int = 0,
                 cfg: SamplerConfig = SamplerConfig()) -> list[TrainingPair]:
    """Region-based positive/negative pair sampling.

    Candidate ``i`` draws from its own stream seeded by ``(seed, i)`` so the
    output does not depend on how candidates are scheduled. A positive needs
    more than 50 points on both sides of the shared box; each positive is
    followed by a negative whose crop centre is displaced between ``3 r`` and
    the max radius of ``pc2``. Candidates whose negative cannot be placed are
    dropped together with their positive so the set stays balanced.
    """
    if pc1.normals is None or pc1.curvature is None:
        raise GeometryError("pc1 needs features; run point_features first")
    graph = knn_graph(pc1, cfg.k)
    pc1_radius = bounding_sphere(pc1).radius
    pc2_radius = bounding_sphere(pc2).radius
    pairs: list[TrainingPair] = []
    n_p = n_n = 0
    for cand in range(cfg.max_candidates):
        if n_p >= n_pos and n_n >= n_neg:
            break
        rng = np.random.default_rng([seed, cand])
        seed_id = int(rng.integers(len(pc1)))
        threshold = rng.uniform(cfg.t_min, cfg.t_max)
        reach = rng.uniform(cfg.radius_min, cfg.radius_max) * pc1_radius
        cluster = grow_region(pc1, seed_id, threshold, graph, w_curvature=cfg.w_curvature,
                              w_angle=cfg.w_angle, max_radius=reach)
        if len(cluster) < cfg.min_points:
            continue
        reg_a = crop_box(pc1, cluster.box_min, cluster.box_max, source="pc1")
        reg_b = crop_box(pc2, cluster.box_min, cluster.box_max, source="pc2")
        if reg_b is None or len(reg_b) < cfg.min_points:
            continue  # sparse or empty partner crop: sample not used
        neg = None
        if n_n < n_neg:
            neg = _negative_for(reg_a, pc2, pc2_radius, rng, cfg)
            if neg is None:
                continue
        if n_p < n_pos:
            pairs.append(TrainingPair(reg_a, reg_b, "positive"))
            n_p += 1
        if neg is not None:
            pairs.append(TrainingPair(reg_a, neg, "negative"))
            n_n += 1
    if n_p < n_pos or n_n < n_neg:
        warnings.warn(SamplingShortfall(
            f"candidate budget exhausted: {n_pos - n_p} positive and {n_neg - n_n} negative pairs short"))
    return pairs


def rotate_region(region: Region, angle_deg: float, axis=(0.0, 0.0, 1.0)) -> Region:
    """Rotate a region's points about its centroid; the box follows the rotated corners."""
    rot = rotation_about_axis(axis, angle_deg)
    c = region.points.mean(axis=0)
    pts = (region.points - c) @ rot.T + c
    corners = np.array([[x, y, z] for x in (region.box_min[0], region.box_max[0])
                        for y in (region.box_min[1], region.box_max[1])
                        for z in (region.box_min[2], region.box_max[2])])
    corners = (corners - c) @ rot.T + c
    return Region.from_points(region.ids, pts, np.minimum(corners.min(axis=0), pts.min(axis=0)),
                              np.maximum(corners.max(axis=0), pts.max(axis=0)), region.source)


def augment(pairs, seed: int = 0, axis_mode: str = "z") -> list[TrainingPair]:
    """Originals followed by one rotated copy of each pair (angle in [-90, 90] degrees).

    ``axis_mode="z"`` rotates about the vertical; ``"random"`` draws a uniformly
    random axis per pair.
    """
    rng = np.random.default_rng(seed)
    out = list(pairs)
    for pair in pairs:
        angle = float(rng.uniform(-90.0, 90.0))
        if axis_mode == "z":
            axis = (0.0, 0.0, 1.0)
        elif axis_mode == "random":
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
        else:
            raise ValueError(f"unknown axis mode {axis_mode!r}")
        out.append(replace(pair, region_b=rotate_region(pair.region_b, angle, axis), angle_deg=angle))
    return out


# -- pair dataset directory -----------------------------------------------------

INDEX_FIELDS = ["pair_id", "label", "cx", "cy", "cz", "ex", "ey", "ez", "angle_deg"]


def save_pairs(pairs, directory):
    """Write ``index.csv`` plus ``pair_<id>_a.xyz`` / ``pair_<id>_b.xyz`` per pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "index.csv", "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for i, p in enumerate(pairs):
            c = p.region_b.box_center
            e = p.region_b.box_max - p.region_b.box_min
            angle = "" if p.angle_deg is None else repr(float(p.angle_deg))
            w.writerow([i, p.label, *(repr(float(v)) for v in c), *(repr(float(v)) for v in e), angle])
            save_cloud(PointCloud(p.region_a.points), directory / f"pair_{i:06d}_a.xyz")
            save_cloud(PointCloud(p.region_b.points), directory / f"pair_{i:06d}_b.xyz")


def load_pairs(directory) -> list[TrainingPair]:
    directory = Path(directory)
    index = directory / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no pair index at {index}")
    pairs = []
    with open(index, newline="", encoding="ascii") as fh:
        for row in csv.DictReader(fh):
            i = int(row["pair_id"])
            a = load_cloud(directory / f"pair_{i:06d}_a.xyz").points
            b = load_cloud(directory / f"pair_{i:06d}_b.xyz").points
            c = np.array([float(row[k]) for k in ("cx", "cy", "cz")])
            e = np.array([float(row[k]) for k in ("ex", "ey", "ez")])
            lo = np.minimum(c - e / 2, b.min(axis=0))
            hi = np.maximum(c + e / 2, b.max(axis=0))
            angle = float(row["angle_deg"]) if row["angle_deg"] else None
            pairs.append(TrainingPair(Region.from_points(np.arange(len(a)), a, source="pc1"),
                                      Region.from_points(np.arange(len(b)), b, lo, hi, "pc2"),
                                      row["label"], angle))
    return pairs


# -- synthetic training sets ----------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic cross-source scenes from which training pairs are drawn.

    Each scene yields one dense, lightly degraded cloud (pc1) and one sparse,
    occluded, noisy cloud with outliers (pc2), both in the same frame.
    """

    n_scenes: int = 10
    pairs_per_scene: int = 200  # positives; as many negatives
    density: float = 1500.0
    n_objects: int = 6
    first_scene: int = 0


def scene_pair(scene_seed: int, density: float = 1500.0, n_objects: int = 6):
    """Features-annotated pc1 and raw pc2 for one synthetic scene."""
    from .synth import DegradationProfile, degrade, generate_scene, random_scene

    rng = np.random.default_rng([scene_seed, 0])
    pa = DegradationProfile(keep_fraction=rng.uniform(0.7, 1.0), noise_sigma=rng.uniform(0.0, 0.003))
    pb = DegradationProfile(keep_fraction=rng.uniform(0.3, 0.6), occlusion_cuts=2,
                            occlusion_max_fraction=0.15, noise_sigma=rng.uniform(0.002, 0.008),
                            outlier_fraction=rng.uniform(0.0, 0.08))
    scene = generate_scene(random_scene(scene_seed, n_objects, density))
    pc1 = degrade(scene, pa, 2 * scene_seed + 1)
    pc2 = degrade(scene, pb, 2 * scene_seed + 2)
    return point_features(pc1, 10), pc2


def synthetic_pairs(cfg: DatasetConfig = DatasetConfig(), seed: int = 0,
                    sampler: SamplerConfig = SamplerConfig()) -> list[TrainingPair]:
    pairs = []
    for s in range(cfg.first_scene, cfg.first_scene + cfg.n_scenes):
        pc1, pc2 = scene_pair(s, cfg.density, cfg.n_objects)
        pairs += sample_pairs(pc1, pc2, cfg.pairs_per_scene, cfg.pairs_per_scene,
                              seed=seed * 100003 + s, cfg=sampler)
    return pairs

"""Control points, descriptor matching, Kabsch, RANSAC and the registration pipeline."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (GeometryError, PointCloud, RigidTransform, SpatialIndex, apply_transform,
                       bounding_sphere)
from .net import best_matches, forward_batch
from .regions import Region, knn_graph, point_features
from .tdf import DEFAULT_TRUNCATION, voxelize_tdf


class RegistrationError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass
class ControlPoint:
    position: np.ndarray
    segment: Region
    descriptor: np.ndarray | None = None


@dataclass(frozen=True)
class Correspondence:
    source: int
    target: int
    distance: float


@dataclass(frozen=True)
class SegmentationParams:
    k: int = 10
    angle_deg: float = 15.0
    distance_factor: float = 2.0  # times the mean nearest-neighbour spacing
    min_points: int = 50


# -- control points ------------------------------------------------------------

def mean_spacing(cloud: PointCloud, k: int = 1) -> float:
    """Mean distance from each point to its ``k`` nearest neighbours."""
    if len(cloud) < 2:
        return 0.0
    k = min(k, len(cloud) - 1)
    _, d = SpatialIndex(cloud).knn(cloud.points, k + 1)
    return float(d[:, 1:].mean())


def segment_cloud(cloud: PointCloud, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    """Segment label per point from normal-driven region growing.

    Seeds are taken flattest-first (ascending curvature, then id). A k-NN
    neighbour joins when it is within the distance threshold of the point that
    reached it and its normal is within ``angle_deg`` of the segment's running
    mean normal. Segments smaller than ``min_points`` are then merged into the
    segment holding their closest outside point.
    """
    if len(cloud) == 0:
        raise GeometryError("cannot segment an empty cloud")
    if cloud.normals is None:
        raise GeometryError("segmentation needs normals")
    n = len(cloud)
    pts, nrm = cloud.points, cloud.normals
    graph = knn_graph(cloud, params.k)
    # spacing over the same k-NN edges the growth walks; the first-neighbour
    # distance alone leaves randomly sampled surfaces below percolation
    step = params.distance_factor * mean_spacing(cloud, params.k)
    cos_min = np.cos(np.radians(params.angle_deg))
    curv = cloud.curvature if cloud.curvature is not None else np.zeros(n)
    order = np.lexsort((np.arange(n), curv))
    # distance gate is static, so filter the k-NN lists once up front
    near = np.sum((pts[graph] - pts[:, None, :]) ** 2, axis=2) <= step * step
    nbrs = [g[m].tolist() for g, m in zip(graph, near)]
    nl = nrm.tolist()
    labels = [-1] * n
    n_seg = 0
    for seed in order.tolist():
        if labels[seed] >= 0:
            continue
        labels[seed] = n_seg
        sx, sy, sz = nl[seed]
        queue = deque([seed])
        while queue:
            cur = queue.popleft()
            norm = math.sqrt(sx * sx + sy * sy + sz * sz)
            mx, my, mz = sx / norm, sy / norm, sz / norm
            for nb in nbrs[cur]:
                if labels[nb] >= 0:
                    continue
                x, y, z = nl[nb]
                c = x * mx + y * my + z * mz
                if abs(c) < cos_min:
                    continue
                labels[nb] = n_seg
                if c >= 0:
                    sx, sy, sz = sx + x, sy + y, sz + z
                else:
                    sx, sy, sz = sx - x, sy - y, sz - z
                queue.append(nb)
        n_seg += 1
    labels = np.asarray(labels, dtype=np.int64)
    return _merge_small(pts, labels, params.min_points)


def _merge_small(pts, labels, min_points):
    labels = labels.copy()
    tree = cKDTree(pts)
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        small = ids[counts < min_points]
        if len(small) == 0 or len(ids) == 1:
            break
        # smallest first, lowest label on ties
        target = small[np.lexsort((small, counts[counts < min_points]))[0]]
        inside = np.nonzero(labels == target)[0]
        # size + 1 neighbours always reach at least one outside point
        _, nb = tree.query(pts[inside], k=min(len(inside) + 1, len(pts)))
        nb = nb.reshape(len(inside), -1)
        d2 = np.sum((pts[nb] - pts[inside][:, None, :]) ** 2, axis=2)
        d2[labels[nb] == target] = np.inf
        # exact minimum distance, then lowest outside id
        flat = np.lexsort((nb.ravel(), d2.ravel()))[0]
        labels[inside] = labels[nb.ravel()[flat]]
    # relabel compactly in order of first appearance
    _, first = np.unique(labels, return_index=True)
    remap = {old: new for new, old in enumerate(labels[np.sort(first)])}
    return np.array([remap[l] for l in labels], dtype=np.int64)


def extract_control_points(cloud: PointCloud, params: SegmentationParams = SegmentationParams()):
    """One control point (segment centroid) per segment."""
    if len(cloud) == 0:
        raise GeometryError("cannot extract control points from an empty cloud")
    if cloud.normals is None or cloud.curvature is None:
        cloud = point_features(cloud, params.k)
    labels = segment_cloud(cloud, params)
    out = []
    for s in range(labels.max() + 1):
        ids = np.nonzero(labels == s)[0]
        seg = Region.from_points(ids, cloud.points[ids], source="segment")
        out.append(ControlPoint(cloud.points[ids].mean(axis=0), seg))
    return out


def describe_control_points(cloud: PointCloud, cps, weights, truncation=DEFAULT_TRUNCATION):
    """Fill each control point's descriptor from the TDF of the cloud inside its segment's sphere."""
    index = SpatialIndex(cloud)
    dim = weights.config.input_dim
    grids = np.empty((len(cps), dim, dim, dim), dtype=weights.dtype)
    for i, cp in enumerate(cps):
        ids = index.within(cp.segment.center, cp.segment.radius)
        patch = cloud.points[ids] if len(ids) else cp.segment.points
        grids[i] = voxelize_tdf(patch, dim, truncation).values
    desc = forward_batch(weights, grids)
    for cp, d in zip(cps, desc):
        cp.descriptor = d
    return cps


# -- scale -----------------------------------------------------------------------

def robust_radius(cloud: PointCloud, k: int = 8, factor: float = 3.0):
    """(centre, radius) after dropping isolated points.

    Points whose mean distance to their ``k`` neighbours exceeds ``factor``
    times the median are ignored; the radius is the RMS distance of the rest
    to their centroid.
    """
    pts = cloud.points
    if len(pts) > k + 1:
        _, d = SpatialIndex(cloud).knn(pts, k + 1)
        spread = d[:, 1:].mean(axis=1)
        keep = spread <= factor * np.median(spread)
        pts = pts[keep]
    center = pts.mean(axis=0)
    return center, float(np.sqrt(np.mean(np.sum((pts - center) ** 2, axis=1))))


def normalize_scale(source: PointCloud, target: PointCloud, estimator: str = "sphere"):
    """Rescale ``target`` about its centre so its radius matches the source's.

    ``estimator="sphere"`` uses containing-sphere radii and centroids;
    ``"robust"`` uses :func:`robust_radius`, which tolerates outliers.
    Returns ``(rescaled target, factor, scaling transform)``.
    """
    if len(source) == 0 or len(target) == 0:
        raise GeometryError("normalize_scale needs two non-empty clouds")
    if estimator == "sphere":
        s, t = bounding_sphere(source), bounding_sphere(target)
        rs, rt, center = s.radius, t.radius, t.center
    elif estimator == "robust":
        _, rs = robust_radius(source)
        center, rt = robust_radius(target)
    else:
        raise ValueError(f"unknown scale estimator {estimator!r}")
    if rs <= 0 or rt <= 0:
        raise GeometryError("cannot normalise the scale of a zero-radius cloud")
    factor = rs / rt
    if factor == 1.0:
        return target, 1.0, RigidTransform.identity()
    scaling = RigidTransform(np.eye(3), (1.0 - factor) * center, factor)
    return apply_transform(target, scaling), factor, scaling


# -- matching and fitting -----------------------------------------------------------

def match_descriptors(a, b) -> list[Correspondence]:
    """Mutual nearest neighbours in descriptor space."""
    if not a or not b:
        return []
    da = np.stack([cp.descriptor for cp in a])
    db = np.stack([cp.descriptor for cp in b])
    ab = best_matches(da, db)
    ba = best_matches(db, da)
    out = []
    for i, j in enumerate(ab):
        if ba[j] == i:
            out.append(Correspondence(i, int(j), float(np.linalg.norm(da[i].astype(np.float64) - db[j]))))
    return out


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` rows onto ``dst`` rows."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise GeometryError("kabsch needs equally many source and target points")
    if len(src) < 3:
        raise GeometryError(f"kabsch needs at least 3 pairs, got {len(src)}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    ps, pd = src - cs, dst - cd
    sv = np.linalg.svd(ps, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise GeometryError("kabsch input points are collinear")
    u, _, vt = np.linalg.svd(ps.T @ pd)
    d = 1.0 if np.linalg.det(vt.T @ u.T) > 0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


def _residuals(t: RigidTransform, src, dst):
    return np.linalg.norm(src @ t.rotation.T + t.translation - dst, axis=1)


def ransac_align(src, dst, iterations: int = 1000, threshold: float = 0.05, seed: int = 0):
    """Rigid fit robust to outlier correspondences.

    Iteration ``i`` samples three correspondences from its own stream seeded
    by ``(seed, i)``. The winner has the most inliers, then the lowest inlier
    RMS, then the lowest iteration index; the returned transform is refit on
    all of its inliers. Returns ``(transform, sorted inlier ids)``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n < 3:
        raise GeometryError(f"RANSAC needs at least 3 correspondences, got {n}")
    best = (-1, np.inf, None, None)
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        pick = rng.choice(n, size=3, replace=False)
        try:
            t = kabsch(src[pick], dst[pick])
        except GeometryError:
            continue
        res = _residuals(t, src, dst)
        inl = res <= threshold
        count = int(inl.sum())
        rms = float(np.sqrt(np.mean(res[inl] ** 2))) if count else np.inf
        if count > best[0] or (count == best[0] and rms < best[1]):
            best = (count, rms, inl, t)
    if best[2] is None:
        raise GeometryError("RANSAC found no non-degenerate sample")
    inliers = np.nonzero(best[2])[0]
    try:
        t = kabsch(src[inliers], dst[inliers])
    except GeometryError:
        # collinear inlier set: keep the winning minimal-sample model
        t = best[3]
    return t, inliers


# -- pipeline --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegistrationParams:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    ransac_iterations: int = 1000
    inlier_threshold: float = 0.05
    overlap_threshold: float = 0.05
    scale_estimator: str = "robust"
    normalize: bool = True
    truncation: float = DEFAULT_TRUNCATION
    seed: int = 0


@dataclass
class RegistrationResult:
    transform: RigidTransform  # target -> source, scale included
    inliers: list  # correspondences kept by RANSAC
    overlap_ratio: float
    scale_factor: float
    aligned_target: PointCloud | None = None
    correspondences: list = field(default_factory=list)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (GeometryError, ValueError) as exc:
        raise RegistrationError(name, exc) from exc


def register(source: PointCloud, target: PointCloud, weights,
             params: RegistrationParams = RegistrationParams()) -> RegistrationResult:
    """Align ``target`` onto ``source``: scale, segment, describe, match, RANSAC."""
    from .evaluation import overlap_ratio

    factor, scaling = 1.0, RigidTransform.identity()
    tgt = target
    if params.normalize:
        tgt, factor, scaling = _stage("normalize_scale", normalize_scale, source, target,
                                      params.scale_estimator)
    seg = params.segmentation
    src_f = _stage("features", point_features, source, seg.k)
    tgt_f = _stage("features", point_features, tgt, seg.k)
    cps_src = _stage("control_points", extract_control_points, src_f, seg)
    cps_tgt = _stage("control_points", extract_control_points, tgt_f, seg)
    _stage("describe", describe_control_points, src_f, cps_src, weights, params.truncation)
    _stage("describe", describe_control_points, tgt_f, cps_tgt, weights, params.truncation)
    matches = match_descriptors(cps_src, cps_tgt)
    if len(matches) < 3:
        raise RegistrationError("match", f"only {len(matches)} mutual matches")
    p_src = np.array([cps_src[m.source].position for m in matches])
    p_tgt = np.array([cps_tgt[m.target].position for m in matches])
    rigid, inl = _stage("ransac", ransac_align, p_tgt, p_src, params.ransac_iterations,
                        params.inlier_threshold, params.seed)
    total = rigid.compose(scaling)
    aligned = apply_transform(target, total)
    overlap = overlap_ratio(aligned, source, params.overlap_threshold).ratio
    return RegistrationResult(total, [matches[i] for i in inl], overlap, factor, aligned, matches)


def save_correspondences(result: RegistrationResult, path):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_cp", "target_cp", "descriptor_distance"])
        for m in result.inliers:
            w.writerow([m.source, m.target, repr(m.distance)])

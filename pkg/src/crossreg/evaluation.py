"""Overlap ratio, keypoint recall and the perturbation sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (GeometryError, PointCloud, RigidTransform, SpatialIndex, apply_transform,
                       bounding_sphere, rotation_about_axis)
from .net import best_matches, forward_batch
from .tdf import DEFAULT_TRUNCATION, voxelize_tdf

OVERLAP_THRESHOLD = 0.05


@dataclass(frozen=True)
class OverlapReport:
    n_close: int
    n_total: int
    threshold: float

    @property
    def ratio(self) -> float:
        return self.n_close / self.n_total


def overlap_ratio(a: PointCloud, b: PointCloud, threshold: float = OVERLAP_THRESHOLD) -> OverlapReport:
    """Fraction of points of ``a`` whose nearest neighbour in ``b`` is closer than ``threshold``."""
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("overlap ratio needs two non-empty clouds")
    _, dist = SpatialIndex(b).nearest(a.points)
    return OverlapReport(int(np.count_nonzero(dist < threshold)), len(a), threshold)


@dataclass
class RecallCurve:
    """Per-step recall ``R1 = R0 / RN`` against an abscissa (degrees or percent)."""

    abscissa: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    total: int = 0
    unit: str = "angle_deg"

    @property
    def recall(self) -> list:
        return [h / self.total for h in self.hits]

    def add(self, x, hits):
        if not 0 <= hits <= self.total:
            raise ValueError("hit count outside [0, total]")
        self.abscissa.append(x)
        self.hits.append(int(hits))

    def __len__(self):
        return len(self.hits)

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.unit, "recall"])
            for x, r in zip(self.abscissa, self.recall):
                w.writerow([repr(float(x)), repr(float(r))])


def recall_hits(desc_a, desc_b) -> int:
    """R0: how many keypoints' best match is their own index."""
    return int(np.count_nonzero(best_matches(desc_a, desc_b) == np.arange(len(desc_a))))


def patch_descriptors(weights, cloud_points: np.ndarray, centers: np.ndarray, radius: float,
                      index: SpatialIndex | None = None, truncation: float = DEFAULT_TRUNCATION):
    """Descriptors of fixed-radius neighbourhoods around ``centers``.

    A centre with no neighbour inside the radius falls back to the single
    nearest point.
    """
    index = index or SpatialIndex(cloud_points)
    dim = weights.config.input_dim
    grids = np.empty((len(centers), dim, dim, dim), dtype=weights.dtype)
    for i, c in enumerate(centers):
        ids = index.within(c, radius)
        if len(ids) == 0:
            ids = index.nearest(c[None])[0]
        grids[i] = voxelize_tdf(cloud_points[ids], dim, truncation).values
    return forward_batch(weights, grids)


def sample_keypoints(n_points: int, n_keypoints: int, seed: int) -> np.ndarray:
    if n_points < n_keypoints:
        raise GeometryError(f"need at least {n_keypoints} points, cloud has {n_points}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_points, size=n_keypoints, replace=False))


def _rotated(points, center, angle_deg, axis=(0.0, 0.0, 1.0)):
    if angle_deg % 360 == 0:
        return points.copy()
    rot = rotation_about_axis(axis, angle_deg)
    return (points - center) @ rot.T + center


@dataclass(frozen=True)
class SweepConfig:
    n_keypoints: int = 500
    step_deg: float = 5.0
    n_steps: int = 72
    patch_fraction: float = 0.10
    shift_fraction: float = 0.10  # per-point shift for the rotation+shift sweep
    seed: int = 0


def rotation_sweep(cloud: PointCloud, weights, cfg: SweepConfig = SweepConfig(), angles=None,
                   base_points: np.ndarray | None = None) -> RecallCurve:
    """Recall of keypoint descriptors under rotations of a copy of ``cloud`` about the vertical.

    ``angles`` defaults to ``step, 2 step, ..., n_steps * step``; pass an explicit
    list to evaluate a subset (``[0]`` is the identity control run).
    ``base_points`` replaces the copy's starting coordinates (used by the
    rotation+shift sweep); keypoint indices still refer to ``cloud``.
    """
    pts = cloud.points
    keys = sample_keypoints(len(pts), cfg.n_keypoints, cfg.seed)
    sphere = bounding_sphere(cloud)
    radius = cfg.patch_fraction * sphere.radius
    ref = patch_descriptors(weights, pts, pts[keys], radius)
    copy = pts if base_points is None else np.asarray(base_points, dtype=np.float64)
    if angles is None:
        angles = [cfg.step_deg * (i + 1) for i in range(cfg.n_steps)]
    curve = RecallCurve(total=len(keys), unit="angle_deg")
    for angle in angles:
        moved = _rotated(copy, sphere.center, angle)
        desc = patch_descriptors(weights, moved, moved[keys], radius)
        curve.add(angle, recall_hits(ref, desc))
    return curve


def shift_keypoints(points, keys, center, sphere_radius, fraction, rng):
    """Displace each keypoint by ``fraction * sphere_radius`` in a random direction.

    Positions that leave the containing sphere fall back to the original point.
    """
    d = rng.normal(size=(len(keys), 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    moved = points[keys] + fraction * sphere_radius * d
    outside = np.linalg.norm(moved - center, axis=1) > sphere_radius
    moved[outside] = points[keys][outside]
    return moved


def shift_sweep(cloud: PointCloud, weights, cfg: SweepConfig = SweepConfig(), percents=None) -> RecallCurve:
    """Recall when each keypoint's query position moves by 1%..50% of the containing radius."""
    pts = cloud.points
    keys = sample_keypoints(len(pts), cfg.n_keypoints, cfg.seed)
    sphere = bounding_sphere(cloud)
    radius = cfg.patch_fraction * sphere.radius
    index = SpatialIndex(pts)
    ref = patch_descriptors(weights, pts, pts[keys], radius, index)
    if percents is None:
        percents = list(range(1, 51))
    curve = RecallCurve(total=len(keys), unit="shift_pct")
    for pct in percents:
        rng = np.random.default_rng([cfg.seed, int(round(pct * 1000))])
        centers = shift_keypoints(pts, keys, sphere.center, sphere.radius, pct / 100.0, rng)
        desc = patch_descriptors(weights, pts, centers, radius, index)
        curve.add(pct, recall_hits(ref, desc))
    return curve


def rotation_shift_sweep(cloud: PointCloud, weights, cfg: SweepConfig = SweepConfig(),
                         angles=None) -> RecallCurve:
    """Shift every point once by ``shift_fraction`` of the radius, then run the rotation sweep."""
    pts = cloud.points
    sphere = bounding_sphere(cloud)
    shifted = pts
    if cfg.shift_fraction > 0:
        rng = np.random.default_rng([cfg.seed, 7])
        d = rng.normal(size=pts.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        shifted = pts + cfg.shift_fraction * sphere.radius * d
    return rotation_sweep(cloud, weights, cfg, angles, base_points=shifted)


EXPERIMENTS = ("identity", "translation", "degradation", "rotation")


@dataclass(frozen=True)
class ExperimentConfig:
    translation: tuple = (0.5, -0.3, 0.2)
    rotation_deg: float = 30.0
    keep_fraction: float = 0.5
    noise_sigma: float = 0.005
    outlier_fraction: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class ExperimentRow:
    experiment: str
    method: str
    overlap_ratio: float


def experiment_targets(cloud: PointCloud, cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    """The four target clouds, keyed by experiment name."""
    from .synth import DegradationProfile, degrade

    center = bounding_sphere(cloud).center
    shift = RigidTransform(np.eye(3), np.asarray(cfg.translation, dtype=np.float64))
    rot = rotation_about_axis((0.0, 0.0, 1.0), cfg.rotation_deg)
    spin = RigidTransform(rot, center - rot @ center)
    profile = DegradationProfile(keep_fraction=cfg.keep_fraction, noise_sigma=cfg.noise_sigma,
                                 outlier_fraction=cfg.outlier_fraction)
    return {
        "identity": cloud,
        "translation": apply_transform(cloud, shift),
        "degradation": degrade(cloud, profile, cfg.seed),
        "rotation": apply_transform(cloud, spin),
    }


def compare_experiments(cloud: PointCloud, methods: dict, cfg: ExperimentConfig = ExperimentConfig(),
                        params=None, progress=None) -> list:
    """Register each experiment's target back onto ``cloud`` with every weight set in ``methods``.

    A registration that fails outright scores an overlap of 0.
    """
    from .registration import RegistrationError, RegistrationParams, register

    params = params or RegistrationParams(seed=cfg.seed)
    rows = []
    for name, target in experiment_targets(cloud, cfg).items():
        for method, weights in methods.items():
            try:
                ratio = register(cloud, target, weights, params).overlap_ratio
            except RegistrationError:
                ratio = 0.0
            rows.append(ExperimentRow(name, method, ratio))
            if progress:
                progress(f"{name} {method} {ratio:.4f}")
    return rows


def save_experiments(rows, path):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "method", "overlap_ratio"])
        for r in rows:
            w.writerow([r.experiment, r.method, repr(float(r.overlap_ratio))])
